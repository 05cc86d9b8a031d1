"""Macro-F1, model evaluation on target windows, feature export."""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray


@dataclass
class MetricsReport:
    macro_f1: float
    per_class_f1: list
    accuracy: float
    n_samples: int
    seed: Optional[int] = None
    variant: Optional[str] = None
    scenario: Optional[str] = None

    def to_dict(self):
        return dataclasses.asdict(self)


def confusion_counts(preds, labels, n_classes) -> ConfusionCounts:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError(f"preds/labels length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("empty prediction set")
    for name, a in (("preds", preds), ("labels", labels)):
        if a.min() < 0 or a.max() >= n_classes:
            raise ValueError(f"{name} outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    tp = np.diag(cm)
    return ConfusionCounts(tp=tp, fp=cm.sum(axis=0) - tp, fn=cm.sum(axis=1) - tp)


def macro_f1(preds, labels, n_classes: int) -> MetricsReport:
    """Unweighted mean of per-class 2TP / (2TP + FP + FN) over all classes.

    A class with no support and no predictions scores 0 and still counts.
    """
    c = confusion_counts(preds, labels, n_classes)
    denom = 2 * c.tp + c.fp + c.fn
    f1 = np.divide(2 * c.tp, denom, out=np.zeros(n_classes), where=denom > 0)
    n = int(c.tp.sum() + c.fn.sum())
    return MetricsReport(macro_f1=float(f1.mean()), per_class_f1=f1.tolist(),
                         accuracy=float(c.tp.sum() / n), n_samples=n)


@torch.no_grad()
def predict(model, x, batch_size=512):
    """Eval-mode forward; returns (features, logits) as numpy arrays. Model mode is restored."""
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        feats, logits = [], []
        for i in range(0, len(x), batch_size):
            xb = torch.tensor(np.asarray(x[i:i + batch_size]), dtype=dtype)
            f, z = model(xb)
            feats.append(f.numpy())
            logits.append(z.numpy())
    finally:
        model.train(was_training)
    if not feats:
        return np.zeros((0, model.feature_dim)), np.zeros((0, model.cfg.n_classes))
    return np.concatenate(feats), np.concatenate(logits)


def evaluate(model, x, labels, n_classes=None) -> MetricsReport:
    """Argmax-of-logits macro-F1. Ties go to the lowest class index (numpy argmax)."""
    if labels is None:
        raise ConfigError("evaluation needs labels")
    n_classes = n_classes or model.cfg.n_classes
    _, logits = predict(model, x)
    return macro_f1(logits.argmax(axis=1), labels, n_classes)


def evaluate_target(model, dataset) -> MetricsReport:
    return evaluate(model, dataset.x_tgt, dataset.reveal_hidden_labels(), dataset.n_classes)


def export_features(model, x, labels, domains, out):
    """CSV with columns feature_0..feature_{d-1}, label, domain; one row per input, in order."""
    feats, _ = predict(model, x) if len(x) else (np.zeros((0, model.feature_dim)), None)
    labels = np.asarray(labels)
    domains = np.asarray(domains)
    if not (len(feats) == len(labels) == len(domains)):
        raise ValueError("features, labels and domains must have equal length")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    d = feats.shape[1]
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"feature_{j}" for j in range(d)] + ["label", "domain"])
        for row, y, dom in zip(feats, labels, domains):
            w.writerow([repr(float(v)) for v in row] + [int(y), int(dom)])
    return out
