"""Teacher pretraining (DANN), two-step adversarial distillation, baselines and ablations."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import losses as L
from .data import DomainDataset, batch_iterator, split_source
from .errors import ConfigError, DivergenceError
from .evaluate import MetricsReport, evaluate, evaluate_target
from .nets import (DEFAULT_KERNELS, STUDENT_WIDTHS, TEACHER_WIDTHS, Backbone, BackboneConfig,
                   Discriminator, Student, build_discriminator, build_student, build_teacher,
                   dann_lambda, gradient_reversal, load_prefixed, load_weights, prefixed_state,
                   save_weights)

log = logging.getLogger(__name__)

# variant -> (data-domain discriminator, feature-domain discriminator, logit KD kind)
VARIANTS = {
    "source_only": (False, False, None),
    "dd_only": (True, False, None),
    "dd_df": (True, True, None),
    "dd_jkd": (True, False, "jkd"),
    "dd_df_skd": (True, True, "skd"),
    "full": (True, True, "jkd"),
}


def _from_dict(cls, d, what):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in d:
        if key not in names:
            raise ConfigError(f"unknown {what} field {key!r}")
    cfg = cls(**d)
    cfg.validate()
    return cfg


def _tuples(cfg, *names):
    for n in names:
        setattr(cfg, n, tuple(getattr(cfg, n)))


@dataclass
class TeacherConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 5e-4
    seed: int = 0
    widths: Sequence[int] = TEACHER_WIDTHS
    kernels: Sequence[int] = DEFAULT_KERNELS
    disc_hidden: Sequence[int] = (128,)
    val_fraction: float = 0.2
    adapt: bool = True  # False trains a source-only teacher
    domain_weight: float = 0.3
    # a short first-moment memory keeps the reversal game from oscillating
    adam_betas: Sequence[float] = (0.5, 0.99)
    weight_decay: float = 1e-4

    def validate(self):
        _tuples(self, "widths", "kernels", "disc_hidden", "adam_betas")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d, "teacher config")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


@dataclass
class DistillConfig:
    tau: float = 2.0
    alpha_start: float = 0.1
    alpha_end: float = 0.9
    alpha_fixed: Optional[float] = None
    beta: float = 0.5
    epochs: int = 40
    batch_size: int = 32
    lr_student: float = 1e-3
    lr_df: float = 1e-3
    lr_dd: float = 1e-3
    adam_betas: Sequence[float] = (0.9, 0.999)
    weight_decay: float = 0.0
    seed: int = 0
    dc_gradient_mode: str = "detach"
    variant: str = "full"
    gen_loss_form: str = "saturating"
    kl_direction: str = "student_teacher"
    student_widths: Sequence[int] = STUDENT_WIDTHS
    kernels: Sequence[int] = DEFAULT_KERNELS
    disc_hidden: Sequence[int] = (128,)
    val_fraction: float = 0.2

    def validate(self):
        _tuples(self, "adam_betas", "student_widths", "kernels", "disc_hidden")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.dc_gradient_mode not in ("detach", "reverse"):
            raise ConfigError(f"dc_gradient_mode must be detach or reverse, got {self.dc_gradient_mode!r}")
        if self.gen_loss_form not in ("saturating", "nonsaturating"):
            raise ConfigError(f"unknown gen_loss_form {self.gen_loss_form!r}")
        if self.kl_direction not in ("student_teacher", "teacher_student"):
            raise ConfigError(f"unknown kl_direction {self.kl_direction!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.alpha_fixed is not None:
            if not 0 <= self.alpha_fixed <= 1:
                raise ConfigError("alpha_fixed must lie in [0, 1]")
        else:
            self.schedule()

    def schedule(self):
        return L.AlphaSchedule(self.alpha_start, self.alpha_end, self.epochs)

    def alpha(self, epoch):
        if self.alpha_fixed is not None:
            return float(self.alpha_fixed)
        return L.alpha_at_epoch(epoch, self.schedule())

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d, "distill config")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def replace(self, **kw):
        cfg = dataclasses.replace(self, **kw)
        cfg.validate()
        return cfg


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    traces: dict = field(default_factory=dict)

    def record(self, **values):
        for k, v in values.items():
            self.traces.setdefault(k, []).append(float(v))

    def check_finite(self):
        for k, v in self.traces.items():
            if not np.all(np.isfinite(v)):
                raise DivergenceError(f"non-finite {k} trace", self.summary())

    def summary(self):
        return {"epoch": self.epoch, "step": self.step, "traces": self.traces}


def _tensor(a, dtype=torch.float32):
    return torch.tensor(np.asarray(a), dtype=dtype)


def _adam(params, lr, cfg=None):
    betas = tuple(cfg.adam_betas) if cfg else (0.9, 0.999)
    wd = cfg.weight_decay if cfg else 0.0
    return torch.optim.Adam(params, lr=lr, betas=betas, weight_decay=wd)


def _guard(value, name, state):
    if not torch.isfinite(value):
        raise DivergenceError(f"{name} became {float(value.detach())} at epoch {state.epoch}, step {state.step}",
                              state.summary())


def freeze(model):
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _backbone_cfg(dataset, widths, kernels):
    return BackboneConfig(in_channels=dataset.channels, n_classes=dataset.n_classes,
                          widths=tuple(widths), kernels=tuple(kernels),
                          strides=(1,) * len(widths), timesteps=dataset.timesteps)


# --------------------------------------------------------------------------
# teacher

def pretrain_teacher_dann(dataset: DomainDataset, cfg: TeacherConfig = None):
    """Source cross-entropy plus a domain classifier behind a gradient-reversal layer.

    Returns ``(teacher, state)``; the teacher comes back in eval mode with
    parameters and batch-norm statistics frozen.
    """
    cfg = cfg or TeacherConfig()
    cfg.validate()
    train_ds, x_val, y_val = split_source(dataset, cfg.val_fraction, cfg.seed)
    teacher = build_teacher(_backbone_cfg(dataset, cfg.widths, cfg.kernels), seed=cfg.seed)
    disc = build_discriminator(teacher.feature_dim, cfg.disc_hidden, seed=cfg.seed + 1)
    opt = _adam(list(teacher.parameters()) + list(disc.parameters()), cfg.lr, cfg)
    torch.manual_seed(cfg.seed)

    n_steps = (min(train_ds.n_src, train_ds.n_tgt) // cfg.batch_size) * cfg.epochs
    state = TrainState()
    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        teacher.train()
        disc.train()
        sums = {"l_ce": 0.0, "l_domain": 0.0, "d_acc": 0.0}
        n = 0
        for batch in batch_iterator(train_ds, cfg.batch_size, cfg.seed, epoch):
            lam = dann_lambda(state.step / max(n_steps, 1))
            x = _tensor(batch.x)
            l_d = _tensor(batch.domain_labels)
            f, z = teacher(x)
            l_ce = L.loss_ce(z[:len(batch.y_src)], _tensor(batch.y_src, torch.long))
            loss = l_ce
            if cfg.adapt:
                p = disc(gradient_reversal(f, lam))
                l_dom = L.loss_dc(p, l_d)
                loss = loss + cfg.domain_weight * l_dom
                sums["l_domain"] += float(l_dom.detach())
                sums["d_acc"] += float(((p > 0.5).float() == l_d).float().mean())
            _guard(loss, "teacher loss", state)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["l_ce"] += float(l_ce.detach())
            n += 1
            state.step += 1
        state.record(**{k: v / n for k, v in sums.items()}, reversal_lambda=lam)
        if len(y_val):
            state.record(src_val_f1=evaluate(teacher, x_val, y_val, dataset.n_classes).macro_f1)
    return freeze(teacher), state


# --------------------------------------------------------------------------
# student

@dataclass
class DistillResult:
    student: Student
    state: TrainState
    d_f: Optional[Discriminator] = None
    d_d: Optional[Discriminator] = None


def _make_student(dataset, cfg, teacher_feature_dim, teacher_widths):
    bcfg = _backbone_cfg(dataset, cfg.student_widths, cfg.kernels)
    return build_student(bcfg, teacher_feature_dim, seed=cfg.seed, teacher_widths=teacher_widths)


def train_source_only(dataset: DomainDataset, cfg: DistillConfig = None,
                      teacher_feature_dim=TEACHER_WIDTHS[-1], teacher_widths=TEACHER_WIDTHS):
    """Student trained with source cross-entropy alone; the lower-bound baseline."""
    cfg = (cfg or DistillConfig()).replace(variant="source_only")
    train_ds, x_val, y_val = split_source(dataset, cfg.val_fraction, cfg.seed)
    student = _make_student(dataset, cfg, teacher_feature_dim, teacher_widths)
    opt = _adam(student.deployable_parameters(), cfg.lr_student, cfg)
    torch.manual_seed(cfg.seed)
    state = TrainState()
    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        student.train()
        total, n = 0.0, 0
        for batch in batch_iterator(train_ds, cfg.batch_size, cfg.seed, epoch):
            _, z = student(_tensor(batch.x_src))
            loss = L.loss_ce(z, _tensor(batch.y_src, torch.long))
            _guard(loss, "l_ce", state)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            n += 1
            state.step += 1
        state.record(l_ce=total / n, total=total / n)
        if len(y_val):
            state.record(src_val_f1=evaluate(student, x_val, y_val, dataset.n_classes).macro_f1)
    student.eval()
    return DistillResult(student, state)


def distill_unikd(teacher: Backbone, dataset: DomainDataset, cfg: DistillConfig = None,
                  on_event: Optional[Callable] = None) -> DistillResult:
    """Two-step adversarial distillation of a frozen teacher into a compact student.

    Per mini-batch: step 1 updates only the feature-domain discriminator D_f
    on teacher ('real') vs projected student ('fake') features; step 2 freezes
    D_f and updates the student, its projection and the data-domain
    discriminator D_d on

        L = L_gen + (1 - alpha) L_dc + alpha L_jkd + beta L_ce

    with terms switched off according to ``cfg.variant``. ``on_event(name,
    **info)`` is called at step boundaries for instrumentation.
    """
    cfg = cfg or DistillConfig()
    cfg.validate()
    if cfg.variant == "source_only":
        return train_source_only(dataset, cfg, teacher.feature_dim, teacher.cfg.widths)
    use_dd, use_df, kd = VARIANTS[cfg.variant]
    if teacher.cfg.in_channels != dataset.channels or teacher.cfg.n_classes != dataset.n_classes:
        raise ConfigError("teacher shape does not match dataset (channels / classes)")
    freeze(teacher)
    emit = on_event or (lambda name, **info: None)

    train_ds, x_val, y_val = split_source(dataset, cfg.val_fraction, cfg.seed)
    student = _make_student(dataset, cfg, teacher.feature_dim, teacher.cfg.widths)
    d_f = build_discriminator(teacher.feature_dim, cfg.disc_hidden, seed=cfg.seed + 1)
    d_d = build_discriminator(teacher.feature_dim, cfg.disc_hidden, seed=cfg.seed + 2)
    opt_s = _adam(student.parameters(), cfg.lr_student, cfg)
    opt_df = _adam(d_f.parameters(), cfg.lr_df, cfg)
    opt_dd = _adam(d_d.parameters(), cfg.lr_dd, cfg)
    modules = {"teacher": teacher, "student": student, "d_f": d_f, "d_d": d_d}
    torch.manual_seed(cfg.seed)

    state = TrainState()
    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        alpha = cfg.alpha(epoch)
        student.train()
        d_f.train()
        d_d.train()
        sums = dict.fromkeys(("l_dis", "l_gen", "l_jkd", "l_dc", "l_ce", "total",
                              "df_acc", "dd_acc", "mean_w"), 0.0)
        n = 0
        for batch in batch_iterator(train_ds, cfg.batch_size, cfg.seed, epoch):
            x = _tensor(batch.x)
            l_d = _tensor(batch.domain_labels)
            y = _tensor(batch.y_src, torch.long)
            n_src = len(batch.y_src)
            with torch.no_grad():
                f_t, z_t = teacher(x)
            f_s, z_s = student(x)
            f_proj = student.project(f_s)

            # step 1: D_f only; student features enter as constants
            emit("step1_begin", modules=modules)
            l_dis = torch.zeros(())
            if use_df:
                d_real = d_f(f_t)
                d_fake = d_f(f_proj.detach())
                l_dis = L.loss_dis(d_real, d_fake)
                _guard(l_dis, "l_dis", state)
                opt_df.zero_grad()
                l_dis.backward()
                opt_df.step()
                sums["df_acc"] += float(torch.cat([(d_real > 0.5), (d_fake <= 0.5)]).float().mean())
            emit("step1_end", modules=modules)

            # step 2: D_f fixed; student, projection and D_d move together
            d_f.requires_grad_(False)
            zero = torch.zeros(())
            l_gen = L.loss_gen(d_f(f_proj), cfg.gen_loss_form) if use_df else zero
            l_ce = L.loss_ce(z_s[:n_src], y)
            l_dc, l_jkd = zero, zero
            if use_dd:
                dd_in = f_proj.detach() if cfg.dc_gradient_mode == "detach" else gradient_reversal(f_proj, 1.0)
                p_tgt = d_d(dd_in)
                l_dc = L.loss_dc(p_tgt, l_d)
                w = L.joint_weight(L.domain_probability(p_tgt.detach()))
                sums["dd_acc"] += float(((p_tgt > 0.5).float() == l_d).float().mean())
                sums["mean_w"] += float(w.mean())
                if kd == "jkd":
                    l_jkd = L.loss_jkd(z_s, z_t, w, cfg.tau, cfg.kl_direction)
                elif kd == "skd":
                    l_jkd = L.loss_jkd(z_s, z_t, torch.ones_like(w), cfg.tau, "teacher_student")
            parts = L.total_student_loss(l_gen, l_dc, l_jkd, l_ce, alpha, cfg.beta)
            parts.l_dis = l_dis.detach()
            _guard(parts.total, "total loss", state)
            emit("step2_losses", modules=modules, losses=parts, f_proj=f_proj)
            opt_s.zero_grad()
            opt_dd.zero_grad()
            parts.total.backward()
            opt_s.step()
            opt_dd.step()
            d_f.requires_grad_(True)
            emit("step2_end", modules=modules)

            for k, v in parts.as_floats().items():
                if k in sums:
                    sums[k] += v
            n += 1
            state.step += 1
        state.record(**{k: v / n for k, v in sums.items()}, alpha=alpha, beta=cfg.beta)
        if len(y_val):
            state.record(src_val_f1=evaluate(student, x_val, y_val, dataset.n_classes).macro_f1)
        log.debug("epoch %d alpha=%.4f total=%.4f", epoch, alpha, sums["total"] / n)
    state.check_finite()
    student.eval()
    d_f.eval()
    d_d.eval()
    return DistillResult(student, state, d_f, d_d)


# --------------------------------------------------------------------------
# ablation

def run_ablation(teacher, dataset, base_cfg: DistillConfig, variants, seeds, scenario="synthetic"):
    """Train every (variant, seed) cell and evaluate on the target domain.

    Returns ``(rows, aggregates)``: per-run MetricsReports and per-variant
    mean macro-F1 / accuracy.
    """
    variants, seeds = list(variants), list(seeds)
    if not variants:
        raise ConfigError("no variants requested")
    if not seeds:
        raise ConfigError("no seeds requested")
    rows = []
    for variant in variants:
        for seed in seeds:
            cfg = base_cfg.replace(variant=variant, seed=seed)
            result = distill_unikd(teacher, dataset, cfg)
            report = evaluate_target(result.student, dataset)
            report.seed, report.variant, report.scenario = seed, variant, scenario
            rows.append(report)
    return rows, aggregate(rows)


def aggregate(rows):
    out = {}
    for variant in dict.fromkeys(r.variant for r in rows):
        member = [r for r in rows if r.variant == variant]
        out[variant] = {
            "macro_f1": float(np.mean([r.macro_f1 for r in member])),
            "accuracy": float(np.mean([r.accuracy for r in member])),
            "n_runs": len(member),
        }
    return out


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_teacher(teacher, out_dir, extra=None):
    meta = {"format_version": CHECKPOINT_VERSION, "role": "teacher",
            "backbone": teacher.cfg.to_dict(), **(extra or {})}
    return save_weights(prefixed_state(teacher=teacher), out_dir, meta)


def load_teacher(ckpt_dir):
    state, meta = load_weights(ckpt_dir)
    if meta.get("role") != "teacher":
        raise ConfigError(f"{ckpt_dir} is not a teacher checkpoint")
    teacher = Backbone(BackboneConfig.from_dict(meta["backbone"]))
    load_prefixed(state, "teacher", teacher)
    return freeze(teacher), meta


def save_student(result: DistillResult, out_dir, extra=None):
    mods = {"student": result.student}
    if result.d_f is not None:
        mods["d_f"] = result.d_f
    if result.d_d is not None:
        mods["d_d"] = result.d_d
    meta = {"format_version": CHECKPOINT_VERSION, "role": "student",
            "backbone": result.student.cfg.to_dict(),
            "teacher_feature_dim": result.student.projection.out_features,
            "discriminators": {k: {"input_dim": m.input_dim,
                                   "hidden": [l.out_features for l in m.net if hasattr(l, "out_features")][:-1]}
                               for k, m in mods.items() if k != "student"},
            **(extra or {})}
    return save_weights(prefixed_state(**mods), out_dir, meta)


def load_student(ckpt_dir):
    state, meta = load_weights(ckpt_dir)
    if meta.get("role") != "student":
        raise ConfigError(f"{ckpt_dir} is not a student checkpoint")
    student = Student(BackboneConfig.from_dict(meta["backbone"]), meta["teacher_feature_dim"])
    load_prefixed(state, "student", student)
    discs = {}
    for name, spec in meta.get("discriminators", {}).items():
        discs[name] = load_prefixed(state, name, Discriminator(spec["input_dim"], spec["hidden"]))
    student.eval()
    return DistillResult(student, TrainState(), discs.get("d_f"), discs.get("d_d")), meta
