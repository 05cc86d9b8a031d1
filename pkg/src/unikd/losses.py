"""Distillation and adaptation objectives.

All functions take torch tensors and stay differentiable in every input; the
training loop decides what is detached.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Union

import torch
import torch.nn.functional as F

from .errors import ConfigError
from .nets import CLAMP_EPS

Scalar = Union[float, torch.Tensor]


def _clamp(p):
    return p.clamp(CLAMP_EPS, 1 - CLAMP_EPS)


def _nonempty(*xs):
    for x in xs:
        if x.numel() == 0:
            raise ValueError("empty batch")


def soften(z, tau):
    """Temperature softmax over the last axis."""
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    return torch.softmax(z / tau, dim=-1)


def loss_dis(d_real, d_fake):
    """Feature discriminator loss: teacher features are 'real', student features 'fake'."""
    _nonempty(d_real, d_fake)
    if d_real.shape != d_fake.shape:
        raise ValueError(f"real/fake batch mismatch: {tuple(d_real.shape)} vs {tuple(d_fake.shape)}")
    return -torch.log(_clamp(d_real)).mean() - torch.log(1 - _clamp(d_fake)).mean()


def loss_gen(d_fake, form="saturating"):
    """Student side of the feature game.

    ``saturating`` is mean log(1 - D(f_student)); ``nonsaturating`` swaps in
    -mean log D(f_student), which keeps gradients alive while D_f is confident.
    """
    _nonempty(d_fake)
    if form == "saturating":
        return torch.log(1 - _clamp(d_fake)).mean()
    if form == "nonsaturating":
        return -torch.log(_clamp(d_fake)).mean()
    raise ConfigError(f"unknown gen_loss_form {form!r}")


def domain_probability(p_target):
    """[N] target probabilities -> [N, 2] rows of (p_source, p_target)."""
    return torch.stack([1 - p_target, p_target], dim=-1)


def joint_weight(p):
    """Per-sample weight 1 - |p_source - p_target| from [N, 2] domain probabilities."""
    return 1 - (p[..., 0] - p[..., 1]).abs()


def kl_rows(log_p, log_q):
    """Row-wise KL(p || q) from log-probabilities."""
    return (log_p.exp() * (log_p - log_q)).sum(dim=-1)


def loss_jkd(z_s, z_t, w, tau, direction="student_teacher"):
    """Weighted logit distillation: tau^2 * mean_i w_i * KL_i.

    ``student_teacher`` uses KL(q_student || q_teacher); ``teacher_student`` uses
    KL(q_teacher || q_student) as in standard KD.
    """
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    if z_s.shape != z_t.shape:
        raise ValueError(f"logit shape mismatch: {tuple(z_s.shape)} vs {tuple(z_t.shape)}")
    if w.shape != z_s.shape[:1]:
        raise ValueError(f"need one weight per sample, got {tuple(w.shape)}")
    _nonempty(z_s)
    log_qs = F.log_softmax(z_s / tau, dim=-1)
    log_qt = F.log_softmax(z_t / tau, dim=-1)
    if direction == "student_teacher":
        kl = kl_rows(log_qs, log_qt)
    elif direction == "teacher_student":
        kl = kl_rows(log_qt, log_qs)
    else:
        raise ConfigError(f"unknown kl_direction {direction!r}")
    return tau ** 2 * (w * kl).mean()


def loss_dc(p_target, l_d):
    """Binary cross-entropy of the data-domain discriminator (1 = target)."""
    _nonempty(p_target)
    if p_target.shape != l_d.shape:
        raise ValueError("one domain label per prediction required")
    l_d = l_d.to(p_target.dtype)
    if ((l_d != 0) & (l_d != 1)).any():
        raise ValueError("domain labels must be 0 or 1")
    p = _clamp(p_target)
    return -(l_d * torch.log(p) + (1 - l_d) * torch.log(1 - p)).mean()


def loss_ce(z, y):
    """Source cross-entropy at temperature 1."""
    _nonempty(z)
    if y.numel() and (y.min() < 0 or y.max() >= z.shape[-1]):
        raise ValueError(f"label outside [0, {z.shape[-1]})")
    return F.cross_entropy(z, y)


@dataclass
class LossBreakdown:
    l_dis: Scalar = 0.0
    l_gen: Scalar = 0.0
    l_jkd: Scalar = 0.0
    l_dc: Scalar = 0.0
    l_ce: Scalar = 0.0
    total: Scalar = 0.0
    alpha: float = 0.0
    beta: float = 0.0

    def as_floats(self):
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}


def total_student_loss(l_gen, l_dc, l_jkd, l_ce, alpha, beta) -> LossBreakdown:
    if not 0 <= alpha <= 1:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    total = l_gen + (1 - alpha) * l_dc + alpha * l_jkd + beta * l_ce
    return LossBreakdown(l_gen=l_gen, l_jkd=l_jkd, l_dc=l_dc, l_ce=l_ce, total=total,
                         alpha=alpha, beta=beta)


@dataclass(frozen=True)
class AlphaSchedule:
    a: float = 0.1
    b: float = 0.9
    M: int = 40

    def __post_init__(self):
        if not 0 < self.a <= self.b < 1:
            raise ConfigError(f"alpha schedule needs 0 < a <= b < 1, got a={self.a}, b={self.b}")
        if self.M < 1:
            raise ConfigError("M must be >= 1")


def alpha_at_epoch(m: int, sched: AlphaSchedule) -> float:
    """Exponential ramp a * exp((m / M) * ln(b / a)) from a at m=0 to b at m=M."""
    if not 0 <= m <= sched.M:
        raise ConfigError(f"epoch {m} outside [0, {sched.M}]")
    r = m / sched.M
    # geometric-interpolation form of the same ramp; exact at both endpoints
    return sched.a ** (1 - r) * sched.b ** r

