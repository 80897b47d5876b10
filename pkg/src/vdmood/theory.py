"""Low-dimensional demonstrations of when InD density is an optimal OOD score.

* change of variables under a monotone map can reverse which of two points
  has the higher density;
* with OOD data uniform on a box covering the InD support, ranking by
  -P_I(x) gives exactly the ordering of the likelihood ratio P_O / P_I and so
  the same (optimal) AUC; a non-uniform OOD density breaks the tie.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .metrics import auroc
from .numcore import Rng


class GaussianMixtureDensity:
    """Isotropic Gaussian mixture with analytic pdf and sampler."""

    def __init__(self, means, std=1.0, weights=None):
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        k, self.d = self.means.shape
        self.std = np.broadcast_to(np.asarray(std, dtype=float), (k,)).copy()
        self.weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=float)

    def logpdf(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        comp = []
        for mu, s, w in zip(self.means, self.std, self.weights):
            comp.append(math.log(w) + np.sum(norm.logpdf(x, loc=mu, scale=s), axis=1))
        return logsumexp(np.stack(comp, axis=1), axis=1)

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def sample(self, rng: Rng, n: int) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[comp] + self.std[comp][:, None] * rng.normal((n, self.d))


class UniformBox:
    def __init__(self, low: Sequence[float], high: Sequence[float]):
        self.low = np.asarray(low, dtype=float)
        self.high = np.asarray(high, dtype=float)
        if np.any(self.high <= self.low):
            raise ValueError("box must have positive extent")
        self.d = self.low.size
        self.density = 1.0 / float(np.prod(self.high - self.low))

    def pdf(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        inside = np.all((x >= self.low) & (x <= self.high), axis=1)
        return np.where(inside, self.density, 0.0)

    def logpdf(self, x) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(x))

    def sample(self, rng: Rng, n: int) -> np.ndarray:
        return self.low + (self.high - self.low) * rng.uniform((n, self.d))


@dataclass
class MixtureSetup:
    ind: object
    ood: object
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("mixture prior alpha must lie strictly inside (0, 1)")


# ---------------------------------------------------------------------------
# monotone transforms


class PiecewiseLinearTransform:
    """Continuous increasing map with slope ``slopes[i]`` on ``[knots[i], knots[i+1]]``.

    Outer knots may be infinite. ``origin`` is the image of the first finite
    knot (of 0 when no knot is finite). Outside the knot range the first/last
    slope is extended.
    """

    def __init__(self, knots: Sequence[float], slopes: Sequence[float], origin: float = 0.0):
        self.knots = np.asarray(knots, dtype=float)
        self.slopes = np.asarray(slopes, dtype=float)
        if self.slopes.size != self.knots.size - 1 or np.any(np.diff(self.knots) <= 0):
            raise ValueError("need increasing knots and one slope per interval")
        if np.any(self.slopes < 0):
            raise ValueError("slopes must be nonnegative")
        finite = np.flatnonzero(np.isfinite(self.knots))
        if finite.size and np.any(np.isinf(self.knots[finite[0] : finite[-1] + 1])):
            raise ValueError("only the outermost knots may be infinite")
        # T at every knot, pinned to origin at the first finite knot
        self.values = np.full(self.knots.size, float(origin))
        if finite.size:
            f = finite[0]
            with np.errstate(invalid="ignore"):
                for k in range(f, self.knots.size - 1):
                    self.values[k + 1] = self.values[k] + self.slopes[k] * (self.knots[k + 1] - self.knots[k])
                for k in range(f - 1, -1, -1):
                    self.values[k] = self.values[k + 1] - self.slopes[k] * (self.knots[k + 1] - self.knots[k])
        # a finite anchor point per piece
        left_ok = np.isfinite(self.knots[:-1])
        right_ok = np.isfinite(self.knots[1:])
        self.anchor_x = np.where(left_ok, self.knots[:-1], np.where(right_ok, self.knots[1:], 0.0))
        self.anchor_y = np.where(left_ok, self.values[:-1], np.where(right_ok, self.values[1:], float(origin)))

    def _eval(self, i, x):
        return self.anchor_y[i] + self.slopes[i] * (x - self.anchor_x[i])

    def _piece(self, x):
        return np.clip(np.searchsorted(self.knots, x, side="right") - 1, 0, self.slopes.size - 1)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self._eval(self._piece(x), x)

    def derivative(self, x):
        return self.slopes[self._piece(np.asarray(x, dtype=float))]

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        i = np.clip(np.searchsorted(self.values, y, side="right") - 1, 0, self.slopes.size - 1)
        return self.anchor_x[i] + (y - self.anchor_y[i]) / self.slopes[i]


def transformed_density(p, transform, x):
    """Density of Y = T(X) at T(x): p(x) / T'(x)."""
    deriv = np.asarray(transform.derivative(x), dtype=float)
    if np.any(deriv <= 0):
        raise ZeroDivisionError("transform derivative must be positive at x")
    return np.asarray(p(x), dtype=float) / deriv


def figure1_example():
    """Standard normal pushed through slopes 100 on [0, 1] and 0.01 on [1, 3] (slope 1 elsewhere)."""
    transform = PiecewiseLinearTransform([-np.inf, 0.0, 1.0, 3.0, np.inf], [1.0, 100.0, 0.01, 1.0])
    return norm.pdf, transform




def image_mass(p, transform: PiecewiseLinearTransform, lo: float, hi: float, points_per_piece: int = 20001) -> float:
    """Riemann (midpoint) integral of the pushed-forward density over T([lo, hi])."""
    knots = np.clip(transform.knots, lo, hi)
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        if b <= a:
            continue
        ya, yb = float(transform(a)), float(transform(b))
        edges = np.linspace(ya, yb, points_per_piece + 1)
        mids = 0.5 * (edges[:-1] + edges[1:])
        xs = transform.inverse(mids)
        total += float(np.sum(transformed_density(p, transform, xs)) * (edges[1] - edges[0]))
    return total


# ---------------------------------------------------------------------------
# Bayes posterior and likelihood ratio


def posterior_ood(setup: MixtureSetup, x) -> np.ndarray:
    a = setup.alpha
    po = np.asarray(setup.ood.pdf(x), dtype=float)
    pi = np.asarray(setup.ind.pdf(x), dtype=float)
    return a * po / (a * po + (1.0 - a) * pi)


def posterior_from_ratio(r, alpha: float):
    r = np.asarray(r, dtype=float)
    return 1.0 / (1.0 + (1.0 - alpha) / alpha / r)


def likelihood_ratio(setup: MixtureSetup, x) -> np.ndarray:
    pi = np.asarray(setup.ind.pdf(x), dtype=float)
    if np.any(pi <= 0):
        raise ZeroDivisionError("likelihood ratio undefined where the InD density is zero")
    return np.asarray(setup.ood.pdf(x), dtype=float) / pi


@dataclass
class OptimalityResult:
    auc_density: float
    auc_ratio: float
    n: int
    seed: int
    same_order: bool

    def to_dict(self) -> dict:
        return {"auc_density": self.auc_density, "auc_ratio": self.auc_ratio, "n": self.n, "seed": self.seed,
                "same_order": self.same_order}


def optimality_experiment(setup: MixtureSetup, n: int, seed: int = 0) -> OptimalityResult:
    """Score n InD and n OOD draws by -P_I(x) and by P_O(x)/P_I(x); return both AUCs."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = Rng(seed, (0x0B7,))
    x_ind = setup.ind.sample(rng.child(1), n)
    x_ood = setup.ood.sample(rng.child(2), n)
    x = np.concatenate([x_ind, x_ood])
    p_ind = setup.ind.pdf(x)
    if np.any(p_ind <= 0):
        raise ValueError("degenerate sample: InD density underflowed to zero")
    s_density = -p_ind
    s_ratio = likelihood_ratio(setup, x)
    same = bool(np.array_equal(np.argsort(s_density, kind="stable"), np.argsort(s_ratio, kind="stable")))
    return OptimalityResult(
        auc_density=auroc(s_density[:n], s_density[n:]),
        auc_ratio=auroc(s_ratio[:n], s_ratio[n:]),
        n=n,
        seed=seed,
        same_order=same,
    )


def default_uniform_setup(alpha: float = 0.5) -> MixtureSetup:
    """Two-component InD mixture in d=2 with OOD uniform on a covering box."""
    ind = GaussianMixtureDensity([[-2.0, 0.0], [2.0, 0.0]], std=1.0)
    return MixtureSetup(ind=ind, ood=UniformBox([-8.0, -6.0], [8.0, 6.0]), alpha=alpha)


def default_ridge_setup(alpha: float = 0.5) -> MixtureSetup:
    """Same InD mixture, OOD concentrated on the ridge between the modes."""
    ind = GaussianMixtureDensity([[-2.0, 0.0], [2.0, 0.0]], std=1.0)
    return MixtureSetup(ind=ind, ood=GaussianMixtureDensity([[0.0, 0.0]], std=0.5), alpha=alpha)


def ratio_identity_residual(setup: MixtureSetup, x) -> float:
    """max |P_I(x) g(P_I(x)) - P_O(x)| with g(s) = c / s and c the uniform OOD density."""
    if not isinstance(setup.ood, UniformBox):
        raise ValueError("the identity holds for a uniform OOD density")
    c = setup.ood.density
    pi = np.asarray(setup.ind.pdf(x), dtype=float)
    return float(np.max(np.abs(pi * (c / pi) - setup.ood.pdf(x))))
