"""Synthetic bearing signals, recording ingestion, long-tailed splits and augmentation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, IngestionError

CROP_LENGTH = 30
NOISE_VAR = 0.01
SCALE_VAR = 0.01
AUGMENTATIONS = ("noise", "scale", "stretch", "crop")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class SyntheticFaultModel:
    """Impulse train with a decaying resonance ring, plus white noise.

    A healthy class is the same model with ``amplitude = 0``.
    """

    fault_period: int = 100
    resonance_freq: float = 0.2
    decay: float = 0.9
    amplitude: float = 1.0
    noise_std: float = 0.5

    def validate(self) -> None:
        if self.fault_period < 2:
            raise ConfigurationError(f"fault_period must be >= 2, got {self.fault_period}")
        if not 0 < self.resonance_freq < 0.5:
            raise ConfigurationError(f"resonance_freq must lie in (0, 0.5), got {self.resonance_freq}")
        if not 0 < self.decay < 1:
            raise ConfigurationError(f"decay must lie in (0, 1), got {self.decay}")
        if self.noise_std < 0:
            raise ConfigurationError(f"noise_std must be non-negative, got {self.noise_std}")


def generate_signal(model: SyntheticFaultModel, length: int, seed) -> np.ndarray:
    model.validate()
    if length < model.fault_period:
        raise ConfigurationError(f"length {length} shorter than fault_period {model.fault_period}")
    rng = _rng(seed)
    train = np.zeros(length)
    train[:: model.fault_period] = model.amplitude
    # ring until it falls below 1e-12 of the impulse
    ring_len = min(length, int(math.ceil(math.log(1e-12) / math.log(model.decay))) + 1)
    t = np.arange(ring_len)
    ring = model.decay**t * np.cos(2 * np.pi * model.resonance_freq * t)
    signal = np.convolve(train, ring)[:length]
    if model.noise_std > 0:
        signal = signal + rng.normal(0.0, model.noise_std, length)
    return signal


def default_fault_models(n_classes: int, noise_std: float = 0.5) -> list[SyntheticFaultModel]:
    """Healthy class plus a ladder of fault types x severities.

    Three fault types (distinct impulse periods and resonances) cycle first;
    severity (amplitude) rises every three classes.
    """
    if n_classes < 2:
        raise ConfigurationError("need at least two classes")
    types = [(97, 0.12), (61, 0.21), (43, 0.31)]
    models = [SyntheticFaultModel(fault_period=97, resonance_freq=0.12, amplitude=0.0, noise_std=noise_std)]
    for i in range(n_classes - 1):
        period, freq = types[i % 3]
        severity = i // 3
        models.append(
            SyntheticFaultModel(
                fault_period=period + 7 * severity,
                resonance_freq=freq,
                decay=0.9,
                amplitude=1.0 + 0.5 * severity,
                noise_std=noise_std,
            )
        )
    return models


@dataclass
class LongTailSpec:
    n_normal: int = 500
    ib_rate: float = 50
    n_eval_per_class: int = 250

    @property
    def n_fault_per_class(self) -> int:
        if self.ib_rate <= 0:
            raise ConfigurationError(f"ib_rate must be positive, got {self.ib_rate}")
        per_class = self.n_normal / self.ib_rate
        if per_class != int(per_class) or per_class < 1:
            raise ConfigurationError(f"ib_rate {self.ib_rate} does not divide n_normal {self.n_normal}")
        return int(per_class)


@dataclass
class Split:
    """Windows stacked as an [N, n] array with integer labels."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def counts(self, n_classes: int) -> np.ndarray:
        return np.bincount(self.y, minlength=n_classes)


@dataclass
class Splits:
    train: Split
    val: Split
    test: Split
    n_classes: int
    stats: dict = field(default_factory=dict)


def _extract(recording: np.ndarray, count: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(recording) < n:
        raise ConfigurationError(f"recording of length {len(recording)} cannot supply windows of {n}")
    starts = rng.integers(0, len(recording) - n + 1, size=count)
    return np.stack([recording[s : s + n] for s in starts]) if count else np.zeros((0, n))


def build_long_tail_split(recordings: list[np.ndarray], spec: LongTailSpec, n: int, seed) -> Splits:
    """Class 0 is the healthy (head) class; every other class is a fault class."""
    rng = _rng(seed)
    n_fault = spec.n_fault_per_class
    parts = {"train": ([], []), "val": ([], []), "test": ([], [])}
    for label, rec in enumerate(recordings):
        rec = np.asarray(rec, dtype=np.float64)
        counts = {
            "train": spec.n_normal if label == 0 else n_fault,
            "val": spec.n_eval_per_class,
            "test": spec.n_eval_per_class,
        }
        for name in ("train", "val", "test"):
            parts[name][0].append(_extract(rec, counts[name], n, rng))
            parts[name][1].append(np.full(counts[name], label, dtype=int))
    made = {k: Split(np.concatenate(xs), np.concatenate(ys)) for k, (xs, ys) in parts.items()}
    return Splits(made["train"], made["val"], made["test"], len(recordings))


def standardize(splits: Splits) -> Splits:
    """Scale every split with the global mean/std of the training values."""
    if len(splits.train) == 0:
        raise ConfigurationError("training split is empty")
    mean = float(splits.train.x.mean())
    std = float(splits.train.x.std())
    if std == 0.0:
        raise DegenerateInputError("training data has zero standard deviation")
    out = Splits(
        *(Split((s.x - mean) / std, s.y) for s in (splits.train, splits.val, splits.test)),
        n_classes=splits.n_classes,
        stats={"mean": mean, "std": std},
    )
    return out


def apply_standardization(x: np.ndarray, stats: dict) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - stats["mean"]) / stats["std"]


# ---------------------------------------------------------------- ingestion


def read_csv_signal(path) -> np.ndarray:
    values = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                values.append(float(text))
            except ValueError as exc:
                raise IngestionError(f"{path}: line {lineno}: cannot parse {text!r} as a number") from exc
    return np.array(values, dtype=np.float64)


def read_raw_f32le(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) % 4:
        whole = len(buf) - len(buf) % 4
        raise IngestionError(f"{path}: byte offset {whole}: trailing {len(buf) % 4} bytes, not a whole float32")
    return np.frombuffer(buf, dtype="<f4").astype(np.float64)


def write_raw_f32le(path, values) -> None:
    Path(path).write_bytes(np.asarray(values, dtype="<f4").tobytes())


def read_signal(path, fmt: str) -> np.ndarray:
    if fmt == "csv":
        return read_csv_signal(path)
    if fmt == "raw_f32le":
        return read_raw_f32le(path)
    raise IngestionError(f"unknown recording format {fmt!r}")


def ingest(manifest_path) -> tuple[list[np.ndarray], dict]:
    """Read every recording listed in a JSON manifest.

    Manifest keys: ``files`` (list of ``{"path", "label"}`` plus optional
    ``"format"``), optional ``format`` default and ``sample_rate``. Files with
    the same label are concatenated in manifest order.
    """
    manifest_path = Path(manifest_path)
    try:
        meta = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{manifest_path}: line {exc.lineno}: {exc.msg}") from exc
    default_fmt = meta.get("format", "raw_f32le")
    by_label: dict[int, list[np.ndarray]] = {}
    for entry in meta.get("files", []):
        path = manifest_path.parent / entry["path"]
        if not path.exists():
            raise IngestionError(f"{path}: file listed in manifest does not exist")
        by_label.setdefault(int(entry["label"]), []).append(read_signal(path, entry.get("format", default_fmt)))
    if not by_label:
        raise IngestionError(f"{manifest_path}: manifest lists no files")
    labels = sorted(by_label)
    if labels != list(range(len(labels))):
        raise IngestionError(f"{manifest_path}: labels must be 0..C-1, got {labels}")
    return [np.concatenate(by_label[c]) for c in labels], meta


# ---------------------------------------------------------------- augmentation


def add_gaussian_noise(x, seed, var: float = NOISE_VAR) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if var == 0:
        return x.copy()
    return x + _rng(seed).normal(0.0, math.sqrt(var), x.shape)


def random_scale(x, seed, var: float = SCALE_VAR) -> np.ndarray:
    """Multiply by one scalar drawn from N(1, var)."""
    x = np.asarray(x, dtype=np.float64)
    if var == 0:
        return x.copy()
    return x * _rng(seed).normal(1.0, math.sqrt(var))


def random_stretch(x, seed, r: float | None = None) -> np.ndarray:
    """Linear interpolation of ``x`` at positions ``r*j``, kept at length n."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise ConfigurationError("stretching needs at least two samples")
    if r is None:
        r = _rng(seed).uniform(0.0, 1.0)
    return np.interp(r * np.arange(n), np.arange(n), x)


def random_crop(x, seed, length: int = CROP_LENGTH, start: int | None = None) -> np.ndarray:
    """Zero a random interval of ``length`` samples."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n <= length:
        raise ConfigurationError(f"window of {n} samples too short to crop {length}")
    if start is None:
        start = int(_rng(seed).integers(0, n - length + 1))
    out = x.copy()
    out[start : start + length] = 0.0
    return out


def augment_once(x, rng: np.random.Generator, p: float = 0.5, require_change: bool = True):
    """One augmented view: each augmentation fires independently with probability ``p``.

    Order is noise, scale, stretch, crop. With ``require_change`` the draws
    repeat until at least one fires. Returns the view and the fired names.
    """
    while True:
        fired = [name for name in AUGMENTATIONS if rng.random() < p]
        if fired or not require_change or p <= 0:
            break
    out = np.asarray(x, dtype=np.float64)
    for name in fired:
        if name == "noise":
            out = add_gaussian_noise(out, rng)
        elif name == "scale":
            out = random_scale(out, rng)
        elif name == "stretch":
            out = random_stretch(out, rng)
        else:
            out = random_crop(out, rng)
    return out.copy(), fired


def make_view_pair(x, seed, p: float = 0.5, require_change: bool = True):
    rng = _rng(seed)
    v1, _ = augment_once(x, rng, p, require_change)
    v2, _ = augment_once(x, rng, p, require_change)
    return v1, v2


def make_views(batch: np.ndarray, rng: np.random.Generator, p: float = 0.5, require_change: bool = True) -> np.ndarray:
    """Views for a [B, n] batch stacked as [first views; second views]."""
    first, second = [], []
    for x in batch:
        v1, v2 = make_view_pair(x, rng, p, require_change)
        first.append(v1)
        second.append(v2)
    return np.stack(first + second)
