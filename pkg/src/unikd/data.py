"""Source/target datasets: synthetic domain shift, UCI HAR, on-disk format, batching."""
from __future__ import annotations

import dataclasses
import enum
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError

FORMAT_VERSION = 1
STD_FLOOR = 1e-8


class Domain(enum.IntEnum):
    SOURCE = 0
    TARGET = 1


@dataclass(frozen=True)
class TimeSeriesSample:
    values: np.ndarray  # [channels, timesteps]
    domain: Domain
    label: Optional[int] = None
    hidden_label: Optional[int] = None


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class DomainDataset:
    """Labeled source windows plus unlabeled target windows sharing one label space.

    Target ground truth is kept apart from the training view; only evaluation
    code should call :meth:`reveal_hidden_labels`.
    """

    def __init__(self, x_src, y_src, x_tgt, n_classes, hidden_labels=None):
        x_src = np.asarray(x_src, dtype=np.float32)
        x_tgt = np.asarray(x_tgt, dtype=np.float32)
        y_src = np.asarray(y_src, dtype=np.int64)
        if x_src.ndim != 3 or x_tgt.ndim != 3:
            raise ConfigError("samples must be [N, channels, timesteps]")
        if x_src.shape[1:] != x_tgt.shape[1:]:
            raise ConfigError(
                f"source shape {x_src.shape[1:]} != target shape {x_tgt.shape[1:]}")
        if y_src.shape != (len(x_src),):
            raise ConfigError("need exactly one label per source sample")
        if n_classes < 1:
            raise ConfigError("n_classes must be positive")
        if len(y_src) and (y_src.min() < 0 or y_src.max() >= n_classes):
            raise ConfigError(f"source label outside [0, {n_classes})")
        if hidden_labels is not None:
            hidden_labels = np.asarray(hidden_labels, dtype=np.int64)
            if hidden_labels.shape != (len(x_tgt),):
                raise ConfigError("need exactly one hidden label per target sample")
            if len(hidden_labels) and (hidden_labels.min() < 0 or hidden_labels.max() >= n_classes):
                raise ConfigError(f"hidden label outside [0, {n_classes})")
            hidden_labels = _readonly(hidden_labels)
        self.x_src = _readonly(x_src)
        self.y_src = _readonly(y_src)
        self.x_tgt = _readonly(x_tgt)
        self.n_classes = int(n_classes)
        self._hidden = hidden_labels

    @property
    def n_src(self):
        return len(self.x_src)

    @property
    def n_tgt(self):
        return len(self.x_tgt)

    @property
    def channels(self):
        return self.x_src.shape[1]

    @property
    def timesteps(self):
        return self.x_src.shape[2]

    @property
    def has_hidden_labels(self):
        return self._hidden is not None

    def reveal_hidden_labels(self) -> np.ndarray:
        """Target ground truth. Evaluation only."""
        if self._hidden is None:
            raise ConfigError("dataset carries no target labels")
        return self._hidden

    def samples(self, with_hidden=False) -> Iterator[TimeSeriesSample]:
        for x, y in zip(self.x_src, self.y_src):
            yield TimeSeriesSample(x, Domain.SOURCE, label=int(y))
        hidden = self.reveal_hidden_labels() if with_hidden else None
        for i, x in enumerate(self.x_tgt):
            h = int(hidden[i]) if hidden is not None else None
            yield TimeSeriesSample(x, Domain.TARGET, hidden_label=h)

    def __len__(self):
        return self.n_src + self.n_tgt

    def replace(self, **kw):
        args = dict(x_src=self.x_src, y_src=self.y_src, x_tgt=self.x_tgt,
                    n_classes=self.n_classes, hidden_labels=self._hidden)
        args.update(kw)
        return type(self)(**args)

    def __repr__(self):
        return (f"DomainDataset(n_src={self.n_src}, n_tgt={self.n_tgt}, "
                f"n_classes={self.n_classes}, channels={self.channels}, "
                f"timesteps={self.timesteps})")


# --------------------------------------------------------------------------
# synthetic domain shift

@dataclass
class SyntheticShiftSpec:
    n_classes: int = 4
    channels: int = 3
    timesteps: int = 128
    n_src: int = 400
    n_tgt: int = 400
    seed: int = 0
    # [n_classes][n_harmonics] cycles per window / amplitudes; drawn from the seed when omitted
    class_freqs: Optional[list] = None
    class_amps: Optional[list] = None
    n_harmonics: int = 2
    # within-domain variability, applied to both domains
    amp_jitter: float = 0.15
    phase_jitter: float = 0.3
    freq_jitter: float = 0.03
    base_noise_std: float = 0.3
    # target-only shift; identity values give identically distributed domains
    amplitude_scale: float = 1.0
    phase_offset: float = 0.0
    additive_noise_std: float = 0.0
    channel_gain: Optional[list] = None

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in names:
                raise ConfigError(f"unknown synthetic spec field {key!r}")
        spec = cls(**d)
        spec.validate()
        return spec

    def to_dict(self):
        return dataclasses.asdict(self)

    def validate(self):
        for name in ("n_classes", "channels", "timesteps", "n_src", "n_tgt", "n_harmonics"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        for name in ("amp_jitter", "phase_jitter", "freq_jitter", "base_noise_std",
                     "amplitude_scale", "phase_offset", "additive_noise_std"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not np.isfinite(v):
                raise ConfigError(f"{name} must be a finite number, got {v!r}")
        for name in ("amp_jitter", "phase_jitter", "freq_jitter", "base_noise_std",
                     "additive_noise_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.channel_gain is not None:
            g = np.asarray(self.channel_gain, dtype=float)
            if g.shape != (self.channels,) or not np.all(np.isfinite(g)):
                raise ConfigError(f"channel_gain must hold {self.channels} finite values")
        for name in ("class_freqs", "class_amps"):
            v = getattr(self, name)
            if v is None:
                continue
            a = np.asarray(v, dtype=float)
            if a.shape != (self.n_classes, self.n_harmonics) or not np.all(np.isfinite(a)):
                raise ConfigError(
                    f"{name} must be a finite [{self.n_classes}][{self.n_harmonics}] table")

    @property
    def shift_level(self):
        gain_delta = 0.0
        if self.channel_gain is not None:
            gain_delta = float(np.abs(np.asarray(self.channel_gain, dtype=float) - 1).max())
        return {"amplitude_scale": self.amplitude_scale, "phase_offset": self.phase_offset,
                "additive_noise_std": self.additive_noise_std,
                "max_channel_gain_delta": gain_delta}


def _class_templates(spec):
    rng = np.random.default_rng([spec.seed, 0xC1A55])
    C, H, K = spec.n_classes, spec.n_harmonics, spec.channels
    if spec.class_freqs is None:
        base = 3.0 + 0.5 * np.arange(C)
        freqs = base[:, None] * np.arange(1, H + 1)[None, :]
    else:
        freqs = np.asarray(spec.class_freqs, dtype=float)
    if spec.class_amps is None:
        amps = rng.uniform(0.5, 1.5, size=(C, H))
    else:
        amps = np.asarray(spec.class_amps, dtype=float)
    # class-specific phase per harmonic sets the waveform shape; channel mixing
    # and lags belong to the sensor and are shared by all classes
    phase = rng.uniform(0, 2 * np.pi, size=(C, H))
    mix = rng.uniform(0.5, 1.0, size=(H, K))
    lag = rng.uniform(0, np.pi / 2, size=K)
    return freqs, amps, phase, mix, lag


def _render(spec, templates, labels, rng, *, scale, offset, gain, noise_std):
    freqs, amps, phase, mix, lag = templates
    n = len(labels)
    t = np.arange(spec.timesteps) / spec.timesteps
    a_j = 1.0 + spec.amp_jitter * rng.standard_normal((n, 1, 1))
    p_j = spec.phase_jitter * rng.standard_normal((n, 1, 1))
    f_j = 1.0 + spec.freq_jitter * rng.standard_normal((n, 1, 1))
    out = np.zeros((n, spec.channels, spec.timesteps))
    for h in range(spec.n_harmonics):
        f = freqs[labels, h][:, None, None] * f_j
        amp = amps[labels, h][:, None, None] * mix[h][None, :, None]
        ph = phase[labels, h][:, None, None] + lag[None, :, None] + (h + 1) * p_j + offset
        out += amp * np.sin(2 * np.pi * f * t[None, None, :] + ph)
    out *= a_j * scale * gain[None, :, None]
    out += noise_std * rng.standard_normal(out.shape)
    return out


MODERATE_SHIFT = dict(
    amplitude_scale=1.5, phase_offset=0.8, additive_noise_std=0.1,
    # classes share harmonic ratios and differ by a small frequency and amplitude step,
    # so the amplitude shift moves target windows across source class boundaries
    class_freqs=[[3.0, 6.0], [3.3, 6.6], [3.6, 7.2], [3.9, 7.8]],
    class_amps=[[1.0, 0.5], [1.1, 0.55], [1.2, 0.6], [1.3, 0.65]],
    n_src=600, n_tgt=600,
)


def moderate_shift_spec(**overrides) -> SyntheticShiftSpec:
    """Four-class, three-channel benchmark with amplitude, phase and noise shift on the target."""
    spec = SyntheticShiftSpec(**{**MODERATE_SHIFT, **overrides})
    spec.validate()
    return spec


def generate_synthetic(spec: SyntheticShiftSpec) -> DomainDataset:
    """Class-conditional sinusoid mixtures; the shift is applied to the target domain only."""
    spec.validate()
    templates = _class_templates(spec)
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    y_src = rng.integers(0, spec.n_classes, size=spec.n_src)
    y_tgt = rng.integers(0, spec.n_classes, size=spec.n_tgt)
    ones = np.ones(spec.channels)
    x_src = _render(spec, templates, y_src, rng, scale=1.0, offset=0.0, gain=ones,
                    noise_std=spec.base_noise_std)
    gain = ones if spec.channel_gain is None else np.asarray(spec.channel_gain, dtype=float)
    tgt_noise = float(np.hypot(spec.base_noise_std, spec.additive_noise_std))
    x_tgt = _render(spec, templates, y_tgt, rng, scale=spec.amplitude_scale,
                    offset=spec.phase_offset, gain=gain, noise_std=tgt_noise)
    return DomainDataset(x_src, y_src, x_tgt, spec.n_classes, hidden_labels=y_tgt)


# --------------------------------------------------------------------------
# UCI HAR

UCIHAR_SIGNALS = (
    "body_acc_x", "body_acc_y", "body_acc_z",
    "body_gyro_x", "body_gyro_y", "body_gyro_z",
    "total_acc_x", "total_acc_y", "total_acc_z",
)
UCIHAR_CLASSES = 6


def _read_matrix(path):
    if not path.exists():
        raise ConfigError(f"missing UCI HAR file: {path}")
    return np.loadtxt(path, dtype=np.float64, ndmin=2)


def _read_vector(path):
    if not path.exists():
        raise ConfigError(f"missing UCI HAR file: {path}")
    return np.loadtxt(path, dtype=np.int64, ndmin=1)


def load_ucihar(root) -> dict:
    """Read the archive's Inertial Signals into ``{subject: (x [n, 9, 128], y [n])}``.

    Labels are remapped from 1..6 to 0..5. Train and test splits are pooled
    since each subject is its own domain.
    """
    root = Path(root)
    if (root / "UCI HAR Dataset").is_dir():
        root = root / "UCI HAR Dataset"
    xs, ys, subs = [], [], []
    for split in ("train", "test"):
        d = root / split
        channels = [_read_matrix(d / "Inertial Signals" / f"{s}_{split}.txt")
                    for s in UCIHAR_SIGNALS]
        rows = {c.shape[0] for c in channels}
        if len(rows) != 1:
            raise ConfigError(f"{split}: row counts differ across the 9 signal files: {sorted(rows)}")
        y = _read_vector(d / f"y_{split}.txt")
        subject = _read_vector(d / f"subject_{split}.txt")
        n = channels[0].shape[0]
        if len(y) != n or len(subject) != n:
            raise ConfigError(f"{split}: label/subject count does not match {n} signal rows")
        if y.min() < 1 or y.max() > UCIHAR_CLASSES:
            raise ConfigError(f"{split}: activity label outside 1..6")
        xs.append(np.stack(channels, axis=1))
        ys.append(y - 1)
        subs.append(subject)
    x = np.concatenate(xs).astype(np.float32)
    y = np.concatenate(ys)
    subject = np.concatenate(subs)
    return {int(s): (x[subject == s], y[subject == s]) for s in np.unique(subject)}


def ucihar_scenario(subjects: dict, src: int, tgt: int) -> DomainDataset:
    for s in (src, tgt):
        if s not in subjects:
            raise ConfigError(f"subject {s} not present in archive")
    x_s, y_s = subjects[src]
    x_t, y_t = subjects[tgt]
    return DomainDataset(x_s, y_s, x_t, UCIHAR_CLASSES, hidden_labels=y_t)


def parse_scenario(text):
    """'2->11', '2→11' or '2-11' -> (2, 11)."""
    for sep in ("->", "→", "-", ":"):
        if sep in text:
            a, b = text.split(sep, 1)
            try:
                return int(a), int(b)
            except ValueError:
                break
    raise ConfigError(f"bad scenario {text!r}; expected e.g. 2->11")


# --------------------------------------------------------------------------
# preprocessing and batching

def channel_stats(dataset):
    mean = dataset.x_src.mean(axis=(0, 2), dtype=np.float64)
    std = dataset.x_src.std(axis=(0, 2), dtype=np.float64)
    return mean, np.maximum(std, STD_FLOOR)


def normalize(dataset: DomainDataset) -> DomainDataset:
    """Per-channel z-score with statistics from the source split only."""
    if dataset.n_src == 0:
        raise ConfigError("cannot normalize without source samples")
    mean, std = channel_stats(dataset)
    m, s = mean[None, :, None], std[None, :, None]
    return dataset.replace(
        x_src=((dataset.x_src - m) / s).astype(np.float32),
        x_tgt=((dataset.x_tgt - m) / s).astype(np.float32),
    )


def split_source(dataset, val_fraction=0.2, seed=0):
    """Hold out part of the source split for diagnostics. Returns (train_ds, x_val, y_val)."""
    if not 0 <= val_fraction < 1:
        raise ConfigError("val_fraction must be in [0, 1)")
    rng = np.random.default_rng([seed, 0x5A11])
    order = rng.permutation(dataset.n_src)
    n_val = int(round(val_fraction * dataset.n_src))
    val, train = order[:n_val], np.sort(order[n_val:])
    val = np.sort(val)
    return (dataset.replace(x_src=dataset.x_src[train], y_src=dataset.y_src[train]),
            dataset.x_src[val], dataset.y_src[val])


@dataclass
class BatchPair:
    x_src: np.ndarray
    y_src: np.ndarray
    x_tgt: np.ndarray

    @property
    def x(self):
        """Combined view: source block, then target block."""
        return np.concatenate([self.x_src, self.x_tgt])

    @property
    def domain_labels(self):
        return np.concatenate([np.zeros(len(self.x_src), dtype=np.int64),
                               np.ones(len(self.x_tgt), dtype=np.int64)])


def steps_per_epoch(dataset, batch_size):
    return min(dataset.n_src, dataset.n_tgt) // batch_size


def batch_iterator(dataset: DomainDataset, batch_size: int, seed: int, epoch: int) -> Iterator[BatchPair]:
    """Balanced source/target batches; both domains reshuffled per (seed, epoch).

    The longer domain is subsampled and the trailing partial batch dropped.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if batch_size > min(dataset.n_src, dataset.n_tgt):
        raise ConfigError(
            f"batch_size {batch_size} exceeds min(n_src, n_tgt) = {min(dataset.n_src, dataset.n_tgt)}")
    rng = np.random.default_rng([seed, epoch])
    src = rng.permutation(dataset.n_src)
    tgt = rng.permutation(dataset.n_tgt)
    for k in range(steps_per_epoch(dataset, batch_size)):
        sl = slice(k * batch_size, (k + 1) * batch_size)
        yield BatchPair(dataset.x_src[src[sl]], dataset.y_src[src[sl]], dataset.x_tgt[tgt[sl]])


# --------------------------------------------------------------------------
# portable directory format

def save_dataset(dataset: DomainDataset, out_dir, extra_meta=None):
    """Write meta.json / samples.f32 / labels.u8 / hidden_labels.u8 atomically."""
    out_dir = Path(out_dir)
    if dataset.n_classes > 256:
        raise ConfigError("labels are stored as u8; n_classes must be <= 256")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        meta = {
            "version": FORMAT_VERSION,
            "n_classes": dataset.n_classes,
            "channels": dataset.channels,
            "timesteps": dataset.timesteps,
            "n_src": dataset.n_src,
            "n_tgt": dataset.n_tgt,
        }
        if extra_meta:
            meta.update(extra_meta)
        (tmp / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        samples = np.concatenate([dataset.x_src, dataset.x_tgt]).astype("<f4")
        (tmp / "samples.f32").write_bytes(samples.tobytes(order="C"))
        (tmp / "labels.u8").write_bytes(dataset.y_src.astype(np.uint8).tobytes())
        if dataset.has_hidden_labels:
            (tmp / "hidden_labels.u8").write_bytes(
                dataset.reveal_hidden_labels().astype(np.uint8).tobytes())
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir


def load_dataset(data_dir) -> DomainDataset:
    data_dir = Path(data_dir)
    meta_path = data_dir / "meta.json"
    if not meta_path.exists():
        raise ConfigError(f"not a dataset directory (no meta.json): {data_dir}")
    meta = json.loads(meta_path.read_text())
    if meta.get("version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported dataset format version {meta.get('version')!r}")
    try:
        C, K, T = meta["n_classes"], meta["channels"], meta["timesteps"]
        n_src, n_tgt = meta["n_src"], meta["n_tgt"]
    except KeyError as e:
        raise ConfigError(f"meta.json lacks field {e.args[0]!r}") from None
    raw = np.frombuffer((data_dir / "samples.f32").read_bytes(), dtype="<f4")
    if raw.size != (n_src + n_tgt) * K * T:
        raise ConfigError("samples.f32 size does not match meta.json")
    x = raw.reshape(n_src + n_tgt, K, T).astype(np.float32)
    y = np.frombuffer((data_dir / "labels.u8").read_bytes(), dtype=np.uint8).astype(np.int64)
    hidden = None
    hidden_path = data_dir / "hidden_labels.u8"
    if hidden_path.exists():
        hidden = np.frombuffer(hidden_path.read_bytes(), dtype=np.uint8).astype(np.int64)
    return DomainDataset(x[:n_src], y, x[n_src:], C, hidden_labels=hidden)
