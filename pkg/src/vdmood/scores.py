"""OOD scores from a trained VDM: exact likelihood, prior likelihood and Top-K diffusion loss.

Every score is oriented so that higher means more OOD: EL and PL are stored
as negated log-likelihoods, TKDL as one minus the max softmax.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, softmax

from . import numcore as nc
from .flow import FlowConfig, FlowResult, integrate
from .schedule import NoiseSchedule

ORIENTATION = "higher = more OOD"


@dataclass
class ScoreVector:
    method: str
    values: np.ndarray
    orientation: str = ORIENTATION

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{self.method}: non-finite scores")

    def __len__(self) -> int:
        return self.values.shape[0]


def _features(data) -> np.ndarray:
    return np.atleast_2d(np.asarray(getattr(data, "features", data), dtype=float))


def flow_scores(model, data, cfg: FlowConfig, s: NoiseSchedule) -> tuple[ScoreVector, ScoreVector, FlowResult]:
    """EL and PL from one integration pass."""
    res = integrate(model, _features(data), cfg, s)
    suffix = "" if cfg.conditioning is None or cfg.conditioning.is_null else "-cond"
    return ScoreVector("EL" + suffix, -res.log_p0), ScoreVector("PL" + suffix, -res.log_pT), res


def score_el(model, data, cfg: FlowConfig, s: NoiseSchedule) -> ScoreVector:
    return flow_scores(model, data, cfg, s)[0]


def score_pl(model, data, cfg: FlowConfig, s: NoiseSchedule) -> ScoreVector:
    return flow_scores(model, data, cfg, s)[1]


# ---------------------------------------------------------------------------
# TKDL


@dataclass
class TkdlResult:
    scores: ScoreVector
    raw: np.ndarray  # max softmax(-L), in [1/k, 1]
    losses: np.ndarray  # (n, k) mean squared noise error per candidate class
    classes: np.ndarray  # (n, k) candidate classes, best logit first
    argmax_class: np.ndarray  # candidate with the lowest loss


def top_k_classes(logits, k: int) -> np.ndarray:
    """Indices of the k largest logits per row; ties go to the lower class index."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    if k > logits.shape[1]:
        raise ValueError(f"k={k} exceeds the number of classes {logits.shape[1]}")
    return np.argsort(-logits, axis=1, kind="stable")[:, :k]


def tkdl_from_losses(losses) -> np.ndarray:
    """max(softmax(-L)) per row."""
    losses = np.atleast_2d(np.asarray(losses, dtype=float))
    return softmax(-losses, axis=1).max(axis=1)


def class_losses(model, z, classes, s: NoiseSchedule, repeats: int = 20, seed: int = 0, t: float = 1.0,
                 sample_ids=None, chunk: int = 8192) -> np.ndarray:
    """Mean over ``repeats`` draws of ||eps - eps_hat(z_t, t, c)||^2 for each candidate class.

    The noise draws of a sample are shared by all its candidate classes.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    classes = np.atleast_2d(np.asarray(classes, dtype=np.int64))
    n, d = z.shape
    k = classes.shape[1]
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    root = nc.Rng(seed, (0x7D1,))
    eps = np.stack([root.child(int(i)).normal((repeats, d)) for i in ids])  # (n, R, d)
    g = float(s.gamma(t))
    z_t = np.sqrt(expit(-g)) * z[:, None, :] + np.sqrt(expit(g)) * eps
    flat_z = z_t.reshape(n * repeats, d)
    flat_eps = eps.reshape(n * repeats, d)
    out = np.empty((n, k))
    for j in range(k):
        cls = np.repeat(classes[:, j], repeats)
        sq = np.empty(n * repeats)
        for lo in range(0, n * repeats, chunk):
            hi = lo + chunk
            pred = model.forward(nc.Tensor(flat_z[lo:hi]), t, model.class_index(cls[lo:hi], len(cls[lo:hi]))).value
            sq[lo:hi] = np.sum((flat_eps[lo:hi] - pred) ** 2, axis=1)
        out[:, j] = sq.reshape(n, repeats).mean(axis=1)
    return out


def score_tkdl(model, data, logits, s: NoiseSchedule, k: int = 5, repeats: int = 20, seed: int = 0,
               t: float = 1.0) -> TkdlResult:
    """Top-K diffusion loss at a fixed time (t = 1 by default)."""
    if logits is None:
        raise ValueError("TKDL needs classifier logits")
    z = _features(data)
    logits = np.atleast_2d(np.asarray(getattr(logits, "features", logits), dtype=float))
    if logits.shape[0] != z.shape[0]:
        raise ValueError(f"{logits.shape[0]} logit rows for {z.shape[0]} samples")
    if logits.shape[1] != model.config.num_classes:
        raise ValueError(f"logits have {logits.shape[1]} classes, model has {model.config.num_classes}")
    classes = top_k_classes(logits, k)
    losses = class_losses(model, z, classes, s, repeats=repeats, seed=seed, t=t)
    raw = tkdl_from_losses(losses)
    best = classes[np.arange(z.shape[0]), np.argmin(losses, axis=1)]
    return TkdlResult(ScoreVector("TKDL", 1.0 - raw), raw, losses, classes, best)


def baseline_scores(model, data, name: Optional[str] = None) -> ScoreVector:
    from .baselines import baseline_logpdf

    label = name or f"baseline-{type(model).__name__}"
    return ScoreVector(label, -baseline_logpdf(model, _features(data)))
