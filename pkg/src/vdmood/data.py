"""Feature-vector datasets: file formats, normalization and synthetic latents.

Binary layout (little-endian)::

    b"FVEC" | u32 version | u32 n | u32 d | u32 flags | f64[n*d] row-major | u32[n] labels?

Bit 0 of ``flags`` marks the presence of the label block. The CSV form has a
header ``label,f0,...,f{d-1}`` where the ``label`` column is optional.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .numcore import Rng

log = logging.getLogger(__name__)

FVEC_MAGIC = b"FVEC"
FVEC_VERSION = 1
SYNTH_KINDS = ("gaussian", "gmm2", "two-moons", "uniform-box")


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    clamped: np.ndarray  # bool per dimension: std was zero and replaced by 1

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "clamped": self.clamped.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float), np.asarray(d["clamped"], bool))


@dataclass
class FeatureDataset:
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    norm_stats: Optional[NormStats] = None
    name: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-d, got shape {self.features.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise DataError(f"expected {self.n} labels, got {self.labels.shape}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "FeatureDataset":
        lab = None if self.labels is None else self.labels[idx]
        return replace(self, features=self.features[idx], labels=lab)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureDataset):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None and np.array_equal(self.labels, other.labels)
        )
        return self.features.shape == other.features.shape and np.array_equal(self.features, other.features) and same_labels


# ---------------------------------------------------------------------------
# file formats


def write_fvec(path, ds: FeatureDataset) -> None:
    flags = 1 if ds.labels is not None else 0
    buf = io.BytesIO()
    buf.write(FVEC_MAGIC)
    buf.write(struct.pack("<IIII", FVEC_VERSION, ds.n, ds.d, flags))
    buf.write(np.ascontiguousarray(ds.features, dtype="<f8").tobytes())
    if ds.labels is not None:
        if np.any(ds.labels < 0):
            raise DataError("labels must be nonnegative to be stored as u32")
        buf.write(ds.labels.astype("<u4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_fvec(path) -> FeatureDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != FVEC_MAGIC:
        raise DataError(f"{path}: bad magic, expected FVEC")
    if len(raw) < 20:
        raise DataError(f"{path}: truncated header")
    version, n, d, flags = struct.unpack_from("<IIII", raw, 4)
    if version != FVEC_VERSION:
        raise DataError(f"{path}: unsupported FVEC version {version}")
    expected = 20 + 8 * n * d + (4 * n if flags & 1 else 0)
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
    feats = np.frombuffer(raw, dtype="<f8", count=n * d, offset=20).reshape(n, d).astype(np.float64)
    labels = None
    if flags & 1:
        labels = np.frombuffer(raw, dtype="<u4", count=n, offset=20 + 8 * n * d).astype(np.int64)
    _check_finite(feats, path)
    return FeatureDataset(feats, labels, name=Path(path).stem)


def write_csv(path, ds: FeatureDataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = [f"f{j}" for j in range(ds.d)]
        w.writerow((["label"] if ds.labels is not None else []) + cols)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.features[i]]
            w.writerow(([str(int(ds.labels[i]))] if ds.labels is not None else []) + row)


def read_csv(path) -> FeatureDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    has_label = bool(header) and header[0] == "label"
    width = len(header)
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        try:
            if has_label:
                labels.append(int(row[0]) if row[0].strip() != "" else -1)
                feats.append([float(v) for v in row[1:]])
            else:
                feats.append([float(v) for v in row])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    d = width - (1 if has_label else 0)
    arr = np.asarray(feats, dtype=np.float64).reshape(len(feats), d)
    _check_finite(arr, path)
    lab = None
    if has_label:
        lab = np.asarray(labels, dtype=np.int64)
        if np.any(lab < 0):
            lab = None
    return FeatureDataset(arr, lab, name=Path(path).stem)


def ingest(path) -> FeatureDataset:
    """Load a feature file, sniffing the binary magic before falling back to CSV."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"{path}: no such file")
    with open(p, "rb") as fh:
        head = fh.read(4)
    if head == FVEC_MAGIC:
        return read_fvec(p)
    return read_csv(p)


def save(path, ds: FeatureDataset) -> None:
    if str(path).endswith(".csv"):
        write_csv(path, ds)
    else:
        write_fvec(path, ds)


def _check_finite(x: np.ndarray, path) -> None:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise DataError(f"{path}: non-finite value at row {bad[0]}, column {bad[1]}")


# ---------------------------------------------------------------------------
# normalization


def fit_norm_stats(x: np.ndarray) -> NormStats:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise DataError("cannot compute normalization statistics of an empty split")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    clamped = ~(std > 0)
    if np.any(clamped):
        log.warning("constant feature dimensions %s; std clamped to 1", np.flatnonzero(clamped).tolist())
        std = np.where(clamped, 1.0, std)
    return NormStats(mean, std, clamped)


def normalize(train: FeatureDataset, *others: FeatureDataset, stats: Optional[NormStats] = None):
    """Standardize every split with statistics taken from ``train`` only.

    Returns ``(normalized_train, [normalized_others...], stats)``.
    """
    stats = stats if stats is not None else fit_norm_stats(train.features)

    def norm(ds):
        if ds.d != stats.mean.shape[0]:
            raise DataError(f"dataset {ds.name!r} has d={ds.d}, expected {stats.mean.shape[0]}")
        return replace(ds, features=stats.apply(ds.features), norm_stats=stats)

    return norm(train), [norm(o) for o in others], stats


def denormalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return stats.invert(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# synthetic latents


@dataclass
class SynthParams:
    separation: float = 8.0  # gmm2: distance between the two means, in component std units
    component_std: float = 1.0
    noise: float = 0.1  # two-moons
    low: float = -12.0  # uniform-box
    high: float = 12.0
    extra: dict = field(default_factory=dict)


def _gmm2_means(d: int, p: SynthParams) -> np.ndarray:
    means = np.zeros((2, d))
    means[0, 0] = -0.5 * p.separation * p.component_std
    means[1, 0] = 0.5 * p.separation * p.component_std
    return means


def synth(kind: str, n: int, d: int, seed: int = 0, params: Optional[SynthParams] = None) -> FeatureDataset:
    """Draw a labelled synthetic dataset.

    ``gaussian`` is N(0, I) (all labels 0); ``gmm2`` is an equal mixture of two
    isotropic Gaussians split along the first axis (label = component);
    ``two-moons`` is the usual interleaved half circles in d=2; ``uniform-box``
    is uniform on ``[low, high]^d`` (all labels 0).
    """
    if n <= 0 or d <= 0:
        raise DataError("n and d must be positive")
    p = params or SynthParams()
    rng = Rng(seed, (0x5A,))
    if kind == "gaussian":
        return FeatureDataset(rng.normal((n, d)), np.zeros(n, dtype=np.int64), name=kind)
    if kind == "gmm2":
        labels = rng.integers(0, 2, size=n)
        x = _gmm2_means(d, p)[labels] + p.component_std * rng.normal((n, d))
        return FeatureDataset(x, labels, name=kind)
    if kind == "two-moons":
        if d != 2:
            raise DataError("two-moons is only defined for d=2")
        labels = rng.integers(0, 2, size=n)
        theta = math.pi * rng.uniform(n)
        x = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        x[labels == 1] = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)[labels == 1]
        x += p.noise * rng.normal((n, 2))
        return FeatureDataset(x, labels, name=kind)
    if kind == "uniform-box":
        return FeatureDataset(rng.uniform((n, d), p.low, p.high), np.zeros(n, dtype=np.int64), name=kind)
    raise DataError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")


def synth_logpdf(kind: str, x: np.ndarray, params: Optional[SynthParams] = None) -> np.ndarray:
    """Analytic log-density of the raw (unnormalized) synthetic distributions."""
    p = params or SynthParams()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = x.shape[1]
    if kind == "gaussian":
        return np.sum(-0.5 * math.log(2 * math.pi) - 0.5 * x * x, axis=1)
    if kind == "gmm2":
        s2 = p.component_std**2
        comp = [
            np.sum(-0.5 * math.log(2 * math.pi * s2) - (x - mu) ** 2 / (2 * s2), axis=1) for mu in _gmm2_means(d, p)
        ]
        return logsumexp(np.stack(comp, axis=1), axis=1) - math.log(2.0)
    if kind == "uniform-box":
        inside = np.all((x >= p.low) & (x <= p.high), axis=1)
        return np.where(inside, -d * math.log(p.high - p.low), -np.inf)
    raise DataError(f"no analytic density for {kind!r}")


def gmm2_class_logits(x: np.ndarray, params: Optional[SynthParams] = None) -> np.ndarray:
    """Bayes-optimal class logits for raw ``gmm2`` features (a stand-in encoder head)."""
    p = params or SynthParams()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    s2 = p.component_std**2
    return np.stack([-np.sum((x - mu) ** 2, axis=1) / (2 * s2) for mu in _gmm2_means(x.shape[1], p)], axis=1)
