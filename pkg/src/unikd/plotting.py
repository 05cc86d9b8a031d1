"""Figures written next to the CSV results. Uses the non-interactive Agg backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_KEYS = ("l_dis", "l_gen", "l_jkd", "l_dc", "l_ce", "total")


def plot_traces(traces: dict, out):
    """Per-epoch loss curves (left) and the alpha schedule (right)."""
    out = Path(out)
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(10, 4))
    for key in LOSS_KEYS:
        if key in traces and np.any(np.asarray(traces[key]) != 0):
            ax_l.plot(range(1, len(traces[key]) + 1), traces[key], label=key)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("loss")
    ax_l.legend(fontsize=8)
    if "alpha" in traces:
        ax_a.plot(range(1, len(traces["alpha"]) + 1), traces["alpha"], marker=".")
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("alpha")
    ax_a.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out


def plot_ablation(rows, out):
    """Bar chart of mean target macro-F1 per variant with per-seed points."""
    out = Path(out)
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    scores = [[r["macro_f1"] for r in rows if r["variant"] == v] for v in variants]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(variants)), 4))
    ax.bar(range(len(variants)), [np.mean(s) for s in scores], color="tab:blue", alpha=0.6)
    for i, s in enumerate(scores):
        ax.scatter([i] * len(s), s, color="k", s=10, zorder=3)
    ax.set_xticks(range(len(variants)))
    ax.set_xticklabels(variants, rotation=30, ha="right")
    ax.set_ylabel("target macro-F1")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out


def plot_beta_sweep(rows, out):
    """Mean target macro-F1 against beta, with min/max over seeds as a band."""
    out = Path(out)
    betas = sorted({float(r["beta"]) for r in rows})
    per = [[r["macro_f1"] for r in rows if float(r["beta"]) == b] for b in betas]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(betas, [np.mean(p) for p in per], marker="o")
    ax.fill_between(betas, [min(p) for p in per], [max(p) for p in per], alpha=0.2)
    ax.set_xlabel("beta")
    ax.set_ylabel("target macro-F1")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out
