"""1D-CNN teacher/student, discriminators, gradient reversal and complexity accounting."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError

CLAMP_EPS = 1e-7

TEACHER_WIDTHS = (64, 128, 256)
STUDENT_WIDTHS = (16, 32, 64)
DEFAULT_KERNELS = (8, 5, 3)


@dataclass
class BackboneConfig:
    in_channels: int = 9
    n_classes: int = 6
    widths: Sequence[int] = TEACHER_WIDTHS
    kernels: Sequence[int] = DEFAULT_KERNELS
    strides: Sequence[int] = (1, 1, 1)
    pool: int = 2
    timesteps: Optional[int] = None

    @property
    def feature_dim(self):
        return self.widths[-1]

    def validate(self):
        if len(self.widths) != len(self.kernels) or len(self.widths) != len(self.strides):
            raise ConfigError("widths, kernels and strides must have equal length")
        for name in ("in_channels", "n_classes", "pool"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("widths", "kernels", "strides"):
            if any(v < 1 for v in getattr(self, name)):
                raise ConfigError(f"{name} must be positive")
        if self.timesteps is not None:
            self.output_length(self.timesteps)

    def output_length(self, timesteps):
        """Temporal length after the conv/pool chain; raises if it collapses."""
        t = timesteps
        for k, s in zip(self.kernels, self.strides):
            t = (t + 2 * (k // 2) - k) // s + 1
            t = t // self.pool
            if t < 1:
                raise ConfigError(
                    f"timesteps={timesteps} too short for kernels {list(self.kernels)} "
                    f"with strides {list(self.strides)}")
        return t

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k in ("widths", "kernels", "strides"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        bad = set(d) - names
        if bad:
            raise ConfigError(f"unknown backbone field {sorted(bad)[0]!r}")
        cfg = cls(**d)
        cfg.widths, cfg.kernels, cfg.strides = (tuple(cfg.widths), tuple(cfg.kernels),
                                                tuple(cfg.strides))
        return cfg


class Backbone(nn.Module):
    """conv1d -> batch-norm -> ReLU -> max-pool blocks, global average pool, linear head.

    ``forward`` returns ``(features, logits)``.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        blocks = []
        c_in = cfg.in_channels
        for w, k, s in zip(cfg.widths, cfg.kernels, cfg.strides):
            blocks += [
                nn.Conv1d(c_in, w, kernel_size=k, stride=s, padding=k // 2),
                nn.BatchNorm1d(w),
                nn.ReLU(),
                nn.MaxPool1d(cfg.pool),
            ]
            c_in = w
        self.blocks = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool1d(1)
        self.classifier = nn.Linear(cfg.feature_dim, cfg.n_classes)

    @property
    def feature_dim(self):
        return self.cfg.feature_dim

    def forward(self, x):
        if x.dim() != 3 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected [N, {self.cfg.in_channels}, T] input, got {tuple(x.shape)}")
        self.cfg.output_length(x.shape[-1])
        f = self.pool(self.blocks(x)).squeeze(-1)
        return f, self.classifier(f)

    def deployable_parameters(self):
        return list(self.parameters())


class Student(Backbone):
    """Reduced-width backbone plus a linear projection into the teacher's feature space.

    The classifier reads the unprojected features; the projection only feeds the
    discriminators and is dropped at deployment.
    """

    def __init__(self, cfg: BackboneConfig, teacher_feature_dim: int):
        super().__init__(cfg)
        self.projection = nn.Linear(cfg.feature_dim, teacher_feature_dim)

    def project(self, features):
        return self.projection(features)

    def deployable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("projection.")]


def _seeded(seed, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def build_teacher(cfg: BackboneConfig, seed: int = 0) -> Backbone:
    return _seeded(seed, lambda: Backbone(cfg))


def build_student(cfg: BackboneConfig, teacher_feature_dim: int, seed: int = 0,
                  teacher_widths: Sequence[int] = TEACHER_WIDTHS) -> Student:
    if len(cfg.widths) != len(teacher_widths) or any(
            s >= t for s, t in zip(cfg.widths, teacher_widths)):
        raise ConfigError(
            f"student widths {list(cfg.widths)} must be strictly smaller than "
            f"teacher widths {list(teacher_widths)}")
    return _seeded(seed, lambda: Student(cfg, teacher_feature_dim))


class Discriminator(nn.Module):
    """MLP feature -> probability, clamped to [eps, 1 - eps]."""

    def __init__(self, input_dim: int, hidden: Sequence[int] = (128,), zero_init_last=False):
        super().__init__()
        if input_dim < 1 or any(h < 1 for h in hidden):
            raise ConfigError("discriminator dimensions must be positive")
        self.input_dim = input_dim
        layers = []
        d = input_dim
        for h in hidden:
            layers += [nn.Linear(d, h), nn.ReLU()]
            d = h
        last = nn.Linear(d, 1)
        if zero_init_last:
            nn.init.zeros_(last.weight)
            nn.init.zeros_(last.bias)
        layers.append(last)
        self.net = nn.Sequential(*layers)

    def forward(self, f):
        if f.dim() != 2 or f.shape[1] != self.input_dim:
            raise ValueError(f"expected [N, {self.input_dim}] features, got {tuple(f.shape)}")
        p = torch.sigmoid(self.net(f).squeeze(-1))
        return p.clamp(CLAMP_EPS, 1 - CLAMP_EPS)


def build_discriminator(input_dim: int, hidden: Sequence[int] = (128,), seed: int = 0,
                        zero_init_last=False) -> Discriminator:
    return _seeded(seed, lambda: Discriminator(input_dim, hidden, zero_init_last))


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambda_):
        ctx.lambda_ = lambda_
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lambda_, None


def gradient_reversal(x, lambda_=1.0):
    """Identity forward; backward multiplies the gradient by ``-lambda_``."""
    if lambda_ < 0:
        raise ValueError("lambda_ must be >= 0")
    return _GradientReversal.apply(x, float(lambda_))


def dann_lambda(progress):
    """Reversal strength ramp 2 / (1 + exp(-10 p)) - 1 over training progress p in [0, 1]."""
    return float(2.0 / (1.0 + np.exp(-10.0 * progress)) - 1.0)


# --------------------------------------------------------------------------
# complexity

def count_parameters(model: nn.Module) -> int:
    # frozen teachers still count: their arrays are trainable by construction
    params = model.deployable_parameters() if hasattr(model, "deployable_parameters") else model.parameters()
    return sum(p.numel() for p in params)


def _module_flops(m, inp, out):
    if isinstance(m, nn.Conv1d):
        c_out, t_out = out.shape[1], out.shape[2]
        return 2 * (m.in_channels // m.groups) * c_out * m.kernel_size[0] * t_out
    if isinstance(m, nn.Linear):
        return 2 * m.in_features * m.out_features
    if isinstance(m, (nn.BatchNorm1d, nn.ReLU, nn.MaxPool1d, nn.AdaptiveAvgPool1d)):
        return out[0].numel()
    return 0


def count_flops(model: nn.Module, input_shape) -> int:
    """Per-sample forward FLOPs.

    Convention: 2 FLOPs per multiply-add for conv1d (2 * C_in * C_out * k * T_out)
    and linear (2 * in * out); batch-norm, ReLU and pooling cost 1 op per output
    element; biases are not counted. Modules not reached by ``forward`` (the
    student's projection) contribute nothing.
    """
    total = 0

    def hook(m, inp, out):
        nonlocal total
        out = out[1] if isinstance(out, tuple) else out
        total += _module_flops(m, inp, out)

    handles = [m.register_forward_hook(hook) for m in model.modules()
               if len(list(m.children())) == 0]
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        with torch.no_grad():
            model(torch.zeros((1, *input_shape), dtype=dtype))
    finally:
        model.train(was_training)
        for h in handles:
            h.remove()
    return int(total)


@dataclass
class ComplexityReport:
    n_params_teacher: int
    n_params_student: int
    flops_teacher: int
    flops_student: int
    flop_convention: str = "2 per multiply-add (conv1d, linear); 1 per output element (norm, ReLU, pooling)"

    @property
    def compression_rate_params(self):
        return self.n_params_teacher / self.n_params_student

    @property
    def compression_rate_flops(self):
        return self.flops_teacher / self.flops_student

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["compression_rate_params"] = self.compression_rate_params
        d["compression_rate_flops"] = self.compression_rate_flops
        return d


def complexity_report(teacher, student, input_shape) -> ComplexityReport:
    return ComplexityReport(count_parameters(teacher), count_parameters(student),
                            count_flops(teacher, input_shape), count_flops(student, input_shape))


# --------------------------------------------------------------------------
# portable weights: weights.json index + weights.bin float32 blob

def save_weights(state: dict, out_dir, meta: Optional[dict] = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = [], [], 0
    for name, t in state.items():
        a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        a = np.ascontiguousarray(a, dtype="<f4")
        index.append({"name": name, "shape": list(a.shape), "dtype": "float32", "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    (out_dir / "weights.bin").write_bytes(b"".join(chunks))
    doc = {"format_version": 1, "tensors": index, "meta": meta or {}}
    (out_dir / "weights.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out_dir


def load_weights(ckpt_dir):
    """Returns ``(state, meta)`` with ``state`` mapping names to float32 tensors."""
    ckpt_dir = Path(ckpt_dir)
    try:
        doc = json.loads((ckpt_dir / "weights.json").read_text())
        blob = (ckpt_dir / "weights.bin").read_bytes()
    except FileNotFoundError as e:
        raise ConfigError(f"incomplete checkpoint: {e.filename}") from None
    state = {}
    for entry in doc["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        a = np.frombuffer(blob, dtype="<f4", count=n, offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(a.reshape(entry["shape"]).copy())
    return state, doc.get("meta", {})


def prefixed_state(**modules):
    state = {}
    for prefix, m in modules.items():
        for k, v in m.state_dict().items():
            state[f"{prefix}.{k}"] = v
    return state


def load_prefixed(state, prefix, module):
    sub = {k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")}
    module.load_state_dict(sub)
    return module
