"""Command-line entry point: data generation, teacher pretraining, distillation, ablation, beta sweep.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .data import (SyntheticShiftSpec, generate_synthetic, load_dataset, load_ucihar, normalize,
                   moderate_shift_spec, parse_scenario, save_dataset, ucihar_scenario)
from .errors import ConfigError, DivergenceError
from .evaluate import evaluate_target
from .nets import build_student, complexity_report
from .train import (VARIANTS, DistillConfig, TeacherConfig, distill_unikd, load_teacher,
                    pretrain_teacher_dann, save_student, save_teacher, _backbone_cfg)

log = logging.getLogger("unikd")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
RESULTS_HEADER = ["scenario", "variant", "seed", "beta", "macro_f1", "accuracy"]


# --------------------------------------------------------------------------
# file helpers

def _read_json(path, what):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{what} file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{what} file {path} is not valid JSON: {e}") from None


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class _AtomicDir:
    """Build a directory under a temp name and rename it into place on success."""

    def __init__(self, out):
        self.out = Path(out)

    def __enter__(self):
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.", dir=self.out.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.out.exists():
            shutil.rmtree(self.out)
        os.replace(self.tmp, self.out)
        return False


def _write_atomic(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def load_config(path):
    """Config file: JSON object with optional "teacher" and "distill" sections."""
    if path is None:
        return TeacherConfig(), DistillConfig()
    raw = _read_json(path, "config")
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    extra = set(raw) - {"teacher", "distill"}
    if extra:
        raise ConfigError(f"unknown config section(s) {sorted(extra)}; expected 'teacher' and/or 'distill'")
    return TeacherConfig.from_dict(raw.get("teacher", {})), DistillConfig.from_dict(raw.get("distill", {}))


def _load_data(data_dir):
    """Dataset directory, normalized with source-only channel statistics, plus its meta."""
    data_dir = Path(data_dir)
    ds = load_dataset(data_dir)
    meta = json.loads((data_dir / "meta.json").read_text())
    return normalize(ds), meta.get("scenario", data_dir.name)


def _parse_list(text, cast, what):
    try:
        values = [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse {what} list {text!r}") from None
    if not values:
        raise ConfigError(f"empty {what} list")
    return values


# --------------------------------------------------------------------------
# commands

def cmd_gen_data(args):
    if args.spec and args.preset:
        raise ConfigError("give either --spec or --preset, not both")
    if args.spec:
        raw = _read_json(args.spec, "spec")
        if not isinstance(raw, dict):
            raise ConfigError("spec must be a JSON object")
        spec = SyntheticShiftSpec.from_dict(raw)
    else:
        spec = moderate_shift_spec() if args.preset == "moderate" else SyntheticShiftSpec()
    if args.seed is not None:
        spec = SyntheticShiftSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    ds = generate_synthetic(spec)
    save_dataset(ds, args.out, {"scenario": "synthetic", "spec": spec.to_dict()})
    print(f"wrote {args.out}: n_src={ds.n_src} n_tgt={ds.n_tgt} classes={ds.n_classes} "
          f"channels={ds.channels} timesteps={ds.timesteps} shift={json.dumps(spec.shift_level, sort_keys=True)}")
    return EXIT_OK


def cmd_import_ucihar(args):
    src, tgt = parse_scenario(args.scenario)
    ds = ucihar_scenario(load_ucihar(args.root), src, tgt)
    save_dataset(ds, args.out, {"scenario": f"{src}->{tgt}", "source": "ucihar"})
    print(f"wrote {args.out}: scenario {src}->{tgt} n_src={ds.n_src} n_tgt={ds.n_tgt}")
    return EXIT_OK


def cmd_train_teacher(args):
    t_cfg, d_cfg = load_config(args.config)
    ds, scenario = _load_data(args.data)
    t0 = time.perf_counter()
    teacher, state = pretrain_teacher_dann(ds, t_cfg)
    elapsed = time.perf_counter() - t0
    student = build_student(_backbone_cfg(ds, d_cfg.student_widths, d_cfg.kernels), teacher.feature_dim,
                            teacher_widths=teacher.cfg.widths)
    comp = complexity_report(teacher, student, (ds.channels, ds.timesteps))
    metrics = evaluate_target(teacher, ds) if ds.has_hidden_labels else None
    if metrics:
        metrics.scenario, metrics.variant, metrics.seed = scenario, "teacher", t_cfg.seed
    with _AtomicDir(args.out) as tmp:
        save_teacher(teacher, tmp, {"config": t_cfg.to_dict()})
        manifest = {
            "command": "train-teacher",
            "config": {"teacher": t_cfg.to_dict()},
            "data": str(args.data),
            "scenario": scenario,
            "traces": state.traces,
            "metrics": metrics.to_dict() if metrics else None,
            "complexity": comp.to_dict(),
            "timing": {"wall_clock_s": elapsed},
        }
        (tmp / "run.json").write_text(_dump(manifest))
    print(f"teacher: params={comp.n_params_teacher} flops={comp.flops_teacher}"
          + (f" target macro_f1={metrics.macro_f1:.4f}" if metrics else ""))
    return EXIT_OK


def _distill_cell(data, teacher_ckpt, d_cfg, out, scenario_override=None):
    """One (variant, seed, beta) run: student checkpoint, run.json and trace figure in ``out``."""
    from .plotting import plot_traces
    ds, scenario = _load_data(data)
    scenario = scenario_override or scenario
    teacher, _ = load_teacher(teacher_ckpt)
    if teacher.cfg.in_channels != ds.channels or teacher.cfg.n_classes != ds.n_classes:
        raise ConfigError(f"teacher expects {teacher.cfg.in_channels} channels / {teacher.cfg.n_classes} "
                          f"classes, dataset has {ds.channels} / {ds.n_classes}")
    t0 = time.perf_counter()
    result = distill_unikd(teacher, ds, d_cfg)
    elapsed = time.perf_counter() - t0
    metrics = evaluate_target(result.student, ds)
    metrics.scenario, metrics.variant, metrics.seed = scenario, d_cfg.variant, d_cfg.seed
    comp = complexity_report(teacher, result.student, (ds.channels, ds.timesteps))
    with _AtomicDir(out) as tmp:
        save_student(result, tmp, {"config": d_cfg.to_dict()})
        manifest = {
            "command": "distill",
            "config": {"distill": d_cfg.to_dict()},
            "data": str(data),
            "teacher": str(teacher_ckpt),
            "scenario": scenario,
            "traces": result.state.traces,
            "metrics": metrics.to_dict(),
            "complexity": comp.to_dict(),
            "timing": {"wall_clock_s": elapsed},
        }
        (tmp / "run.json").write_text(_dump(manifest))
        plot_traces(result.state.traces, tmp / "traces.png")
    return metrics.to_dict()


def cmd_distill(args):
    _, d_cfg = load_config(args.config)
    overrides = {k: v for k, v in (("variant", args.variant), ("seed", args.seed)) if v is not None}
    d_cfg = d_cfg.replace(**overrides)
    m = _distill_cell(args.data, args.teacher, d_cfg, args.out)
    print(f"{m['variant']} seed={m['seed']} target macro_f1={m['macro_f1']:.4f} accuracy={m['accuracy']:.4f}")
    return EXIT_OK


def _cell_worker(job):
    data, teacher, cfg_dict, out = job
    logging.getLogger("unikd").setLevel(logging.WARNING)
    try:
        import torch
        torch.set_num_threads(1)
        return {"ok": True, **_distill_cell(data, teacher, DistillConfig.from_dict(cfg_dict), out)}
    except (ConfigError, DivergenceError, FloatingPointError) as e:
        return {"ok": False, "error": f"{type(e).__name__}: {e}"}


def _run_grid(args, cells):
    """Run every pending cell (skipping those with a run.json) and collect results rows.

    ``cells`` is a list of (DistillConfig, out_dir). A failed cell yields a row
    whose scores are the string 'failed'.
    """
    rows = [None] * len(cells)
    pending = []
    for i, (cfg, out) in enumerate(cells):
        manifest = Path(out) / "run.json"
        if manifest.exists():
            log.info("skipping completed cell %s", out)
            rows[i] = {"ok": True, **json.loads(manifest.read_text())["metrics"]}
        else:
            pending.append((i, (str(args.data), str(args.teacher), cfg.to_dict(), str(out))))
    if args.jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for (i, _), res in zip(pending, pool.map(_cell_worker, [job for _, job in pending])):
                rows[i] = res
    else:
        for i, job in pending:
            rows[i] = _cell_worker(job)
    table = []
    for (cfg, out), res in zip(cells, rows):
        if not res["ok"]:
            print(f"cell {out} failed: {res['error']}", file=sys.stderr)
        table.append({"variant": cfg.variant, "seed": cfg.seed, "beta": cfg.beta,
                      "macro_f1": res.get("macro_f1", "failed") if res["ok"] else "failed",
                      "accuracy": res.get("accuracy", "failed") if res["ok"] else "failed"})
    return table


def results_table(rows, scenario, key):
    """Per-run rows followed by mean rows (seed = 'mean') grouped by ``key``."""
    out = [{"scenario": scenario, **r} for r in rows]
    for group in dict.fromkeys(r[key] for r in rows):
        member = [r for r in rows if r[key] == group and r["macro_f1"] != "failed"]
        if not member:
            continue
        first = member[0]
        out.append({"scenario": scenario, "variant": first["variant"], "seed": "mean", "beta": first["beta"],
                    "macro_f1": float(np.mean([r["macro_f1"] for r in member])),
                    "accuracy": float(np.mean([r["accuracy"] for r in member]))})
    return out


def write_results(table, out_dir):
    out_dir = Path(out_dir)
    lines = []
    with tempfile.TemporaryFile("w+", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in table:
            w.writerow([r[k] if not isinstance(r[k], float) else repr(r[k]) for k in RESULTS_HEADER])
        fh.seek(0)
        text = fh.read()
    _write_atomic(out_dir / "results.csv", text)
    for r in table:
        f1 = r["macro_f1"] if isinstance(r["macro_f1"], str) else f"{r['macro_f1']:.4f}"
        lines.append(f"{r['variant']:<12} {str(r['seed']):<5} {r['beta']:<6g} {f1}")
    print(f"{'variant':<12} {'seed':<5} {'beta':<6} macro_f1")
    print("\n".join(lines))
    return out_dir / "results.csv"


def cmd_ablate(args):
    from .plotting import plot_ablation
    _, base = load_config(args.config)
    seeds = _parse_list(args.seeds, int, "seed")
    variants = _parse_list(args.variants, str, "variant") if args.variants else list(VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}")
    _, scenario = _load_data(args.data)
    out = Path(args.out)
    cells = [(base.replace(variant=v, seed=s), out / v / f"seed{s}") for v in variants for s in seeds]
    rows = _run_grid(args, cells)
    table = results_table(rows, scenario, "variant")
    write_results(table, out)
    ok = [r for r in rows if r["macro_f1"] != "failed"]
    if ok:
        plot_ablation(ok, out / "ablation.png")
    return EXIT_OK if len(ok) == len(rows) else EXIT_NUMERIC


def cmd_sweep_beta(args):
    from .plotting import plot_beta_sweep
    _, base = load_config(args.config)
    values = _parse_list(args.values, float, "beta")
    unique = list(dict.fromkeys(values))
    if len(unique) < len(values):
        warnings.warn(f"duplicate beta values removed: {values} -> {unique}")
        print(f"warning: duplicate beta values removed, running {unique}", file=sys.stderr)
    seeds = _parse_list(args.seeds, int, "seed")
    _, scenario = _load_data(args.data)
    out = Path(args.out)
    cells = [(base.replace(variant="full", beta=b, seed=s), out / f"beta{b:g}" / f"seed{s}")
             for b in unique for s in seeds]
    rows = _run_grid(args, cells)
    table = results_table(rows, scenario, "beta")
    write_results(table, out)
    ok = [r for r in rows if r["macro_f1"] != "failed"]
    if ok:
        plot_beta_sweep(ok, out / "beta_sweep.png")
    return EXIT_OK if len(ok) == len(rows) else EXIT_NUMERIC


# --------------------------------------------------------------------------
# argument parsing

def build_parser():
    p = argparse.ArgumentParser(prog="unikd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic source/target dataset directory")
    g.add_argument("--spec", help="JSON file with SyntheticShiftSpec fields")
    g.add_argument("--preset", choices=["default", "moderate"], help="built-in spec instead of --spec")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    u = sub.add_parser("import-ucihar", help="convert one UCI HAR subject pair to a dataset directory")
    u.add_argument("--root", required=True, help="unpacked 'UCI HAR Dataset' directory")
    u.add_argument("--scenario", required=True, help="source->target subjects, e.g. 2->11")
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_import_ucihar)

    t = sub.add_parser("train-teacher", help="pretrain the domain-adapted teacher")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_teacher)

    def common(q):
        q.add_argument("--data", required=True)
        q.add_argument("--teacher", required=True, help="teacher checkpoint directory")
        q.add_argument("--config")
        q.add_argument("--out", required=True)

    d = sub.add_parser("distill", help="distill one student")
    common(d)
    d.add_argument("--variant", choices=sorted(VARIANTS))
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_distill)

    a = sub.add_parser("ablate", help="all variants x seeds; writes results.csv and ablation.png")
    common(a)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--variants", help="comma list; default all six")
    a.add_argument("--jobs", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("sweep-beta", help="full variant across beta values x seeds")
    common(b)
    b.add_argument("--values", default="0.1,0.5,1.0,2.0")
    b.add_argument("--seeds", default="0,1,2")
    b.add_argument("--jobs", type=int, default=1)
    b.set_defaults(func=cmd_sweep_beta)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
