"""Classical density baselines: diagonal Gaussian, diagonal GMM (EM) and Gaussian KDE."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .numcore import Rng

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DiagGaussian:
    mean: np.ndarray
    var: np.ndarray


@dataclass
class DiagGmm:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    vars: np.ndarray  # (K, d)
    log_likelihood_trace: list[float] = field(default_factory=list)
    n_iter: int = 0


@dataclass
class Kde:
    bandwidth: float
    reference: np.ndarray

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        self.reference = np.atleast_2d(np.asarray(self.reference, dtype=float))
        if self.reference.shape[0] == 0:
            raise ValueError("KDE needs at least one reference point")


# ---------------------------------------------------------------------------
# diagonal Gaussian


def fit_gaussian(data, var_floor: float = VAR_FLOOR) -> DiagGaussian:
    """Maximum-likelihood fit (variance divides by N)."""
    x = np.atleast_2d(np.asarray(data, dtype=float))
    if x.shape[0] < 2:
        raise ValueError("fit_gaussian needs at least 2 samples")
    mean = x.mean(axis=0)
    var = ((x - mean) ** 2).mean(axis=0)
    if np.any(var < var_floor):
        log.info("clamping %d variances to floor %g", int(np.sum(var < var_floor)), var_floor)
        var = np.maximum(var, var_floor)
    return DiagGaussian(mean, var)


def _diag_logpdf(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    return -0.5 * np.sum(_LOG_2PI + np.log(var) + (x - mean) ** 2 / var, axis=-1)


def gaussian_logpdf(g: DiagGaussian, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return _diag_logpdf(z, g.mean, g.var)


# ---------------------------------------------------------------------------
# diagonal GMM


def _component_logpdf(x: np.ndarray, means: np.ndarray, vars_: np.ndarray) -> np.ndarray:
    """(n, K) matrix of log N(x_i; mu_k, diag var_k)."""
    inv = 1.0 / vars_
    quad = (x * x) @ inv.T - 2.0 * x @ (means * inv).T + np.sum(means * means * inv, axis=1)
    return -0.5 * (x.shape[1] * _LOG_2PI + np.sum(np.log(vars_), axis=1) + quad)


def _kmeanspp(x: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = x.shape[0]
    centers = [x[int(rng.integers(0, n))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = int(rng.integers(0, n)) if total <= 0 else int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.stack(centers)


def fit_gmm_em(
    data,
    n_components: int,
    seed: int = 0,
    max_iter: int = 500,
    tol: float = 1e-6,
    var_floor: float = VAR_FLOOR,
) -> DiagGmm:
    """EM for a diagonal-covariance mixture, seeded k-means++ style.

    Stops when the mean training log-likelihood improves by less than ``tol``
    or after ``max_iter`` iterations. The per-iteration mean log-likelihood is
    kept in ``log_likelihood_trace``.
    """
    x = np.atleast_2d(np.asarray(data, dtype=float))
    n, d = x.shape
    if n_components < 1 or n < n_components:
        raise ValueError(f"need 1 <= n_components <= n, got {n_components} for n={n}")
    rng = Rng(seed, (0x6A,))
    means = _kmeanspp(x, n_components, rng)
    global_var = np.maximum(x.var(axis=0), var_floor)
    vars_ = np.tile(global_var, (n_components, 1))
    weights = np.full(n_components, 1.0 / n_components)

    trace: list[float] = []
    prev = -math.inf
    it = 0
    for it in range(1, max_iter + 1):
        # E step
        joint = _component_logpdf(x, means, vars_) + np.log(weights)
        norm = logsumexp(joint, axis=1, keepdims=True)
        ll = float(norm.mean())
        trace.append(ll)
        resp = np.exp(joint - norm)
        # M step
        nk = resp.sum(axis=0)
        empty = nk < 1e-10 * n
        if np.any(empty):
            for k in np.flatnonzero(empty):
                log.info("GMM component %d collapsed; reinitializing", k)
                resp[:, k] = 0.0
                resp[int(rng.integers(0, n)), k] = 1.0
            nk = resp.sum(axis=0)
        weights = nk / nk.sum()
        means = (resp.T @ x) / nk[:, None]
        vars_ = (resp.T @ (x * x)) / nk[:, None] - means * means
        vars_ = np.maximum(vars_, var_floor)
        if abs(ll - prev) < tol:
            break
        prev = ll
    return DiagGmm(weights, means, vars_, trace, it)


def gmm_logpdf(g: DiagGmm, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    z2 = np.atleast_2d(z)
    out = logsumexp(_component_logpdf(z2, g.means, g.vars) + np.log(g.weights), axis=1)
    return out if z.ndim == 2 else out[0]


# ---------------------------------------------------------------------------
# KDE


def kde_logpdf(k: Kde, z, chunk: int = 2048) -> np.ndarray:
    """log[(1/N) sum_j N(z; x_j, h^2 I)] via log-sum-exp."""
    z = np.asarray(z, dtype=float)
    z2 = np.atleast_2d(z)
    ref = k.reference
    n_ref, d = ref.shape
    h2 = k.bandwidth**2
    const = -math.log(n_ref) - 0.5 * d * math.log(2.0 * math.pi * h2)
    ref_sq = np.sum(ref * ref, axis=1)
    out = np.empty(z2.shape[0])
    for lo in range(0, z2.shape[0], chunk):
        q = z2[lo : lo + chunk]
        d2 = np.sum(q * q, axis=1)[:, None] - 2.0 * q @ ref.T + ref_sq[None, :]
        d2 = np.maximum(d2, 0.0)
        out[lo : lo + chunk] = logsumexp(-d2 / (2.0 * h2), axis=1) + const
    return out if z.ndim == 2 else out[0]


# ---------------------------------------------------------------------------
# fitting by name and hyperparameter search


def fit_baseline(method: str, data, param=None, seed: int = 0):
    """Fit ``gaussian`` | ``gmm`` (param = components) | ``kde`` (param = bandwidth)."""
    if method == "gaussian":
        return fit_gaussian(data)
    if method == "gmm":
        return fit_gmm_em(data, int(param), seed=seed)
    if method == "kde":
        return Kde(float(param), np.asarray(data, dtype=float))
    raise ValueError(f"unknown baseline {method!r}")


def baseline_logpdf(model, z) -> np.ndarray:
    if isinstance(model, DiagGaussian):
        return gaussian_logpdf(model, z)
    if isinstance(model, DiagGmm):
        return gmm_logpdf(model, z)
    if isinstance(model, Kde):
        return kde_logpdf(model, z)
    raise TypeError(f"not a baseline model: {type(model).__name__}")


@dataclass
class TuneResult:
    best: float
    scores: dict


def tune_hyperparams(method: str, data, grid: Sequence, fit_size: int = 10000, seed: int = 0) -> TuneResult:
    """Fit on the first ``fit_size`` rows, keep the grid value with best held-out mean log-likelihood."""
    x = np.atleast_2d(np.asarray(data, dtype=float))
    grid = list(grid)
    if not grid:
        raise ValueError("hyperparameter grid is empty")
    if x.shape[0] <= fit_size:
        raise ValueError(f"need more than fit_size={fit_size} rows to hold out a validation split")
    fit, val = x[:fit_size], x[fit_size:]
    scores = {}
    for value in grid:
        scores[value] = float(np.mean(baseline_logpdf(fit_baseline(method, fit, value, seed), val)))
    best = max(grid, key=lambda v: scores[v])
    return TuneResult(best=best, scores=scores)
