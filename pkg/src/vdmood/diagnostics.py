"""Loss-versus-noise-level curves and score histograms."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit

from . import numcore as nc
from .metrics import HIST_BINS, histogram
from .schedule import NoiseSchedule

DEFAULT_T_GRID = tuple(sorted({round(0.1 * i, 10) for i in range(1, 11)} | {0.9, 0.95, 1.0}))


@dataclass
class NoiseCurve:
    t_grid: np.ndarray
    mean: dict = field(default_factory=dict)  # dataset -> (len(t_grid),)
    var: dict = field(default_factory=dict)
    count: dict = field(default_factory=dict)  # draws per dataset
    se: dict = field(default_factory=dict)  # standard error of the mean, clustered by sample

    def stderr(self, name: str) -> np.ndarray:
        return self.se[name]

    def rows(self):
        for name in self.mean:
            for i, t in enumerate(self.t_grid):
                yield float(t), name, float(self.mean[name][i]), float(self.var[name][i])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "dataset", "mean", "var"])
            for t, name, m, v in self.rows():
                w.writerow([repr(t), name, repr(m), repr(v)])


def per_draw_losses(model, z, t: float, s: NoiseSchedule, repeats: int, rng: nc.Rng, ctx=None,
                   chunk: int = 16384) -> np.ndarray:
    """||eps - eps_hat(z_t, t)||^2 for every (sample, draw), flattened."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n, d = z.shape
    eps = rng.normal((repeats, n, d))
    g = float(s.gamma(t))
    z_t = (np.sqrt(expit(-g)) * z[None] + np.sqrt(expit(g)) * eps).reshape(repeats * n, d)
    cls = model.class_index(ctx, repeats * n)
    eps = eps.reshape(repeats * n, d)
    out = np.empty(repeats * n)
    for lo in range(0, repeats * n, chunk):
        pred = model.forward(nc.Tensor(z_t[lo : lo + chunk]), t, cls[lo : lo + chunk]).value
        out[lo : lo + chunk] = np.sum((eps[lo : lo + chunk] - pred) ** 2, axis=1)
    return out


def loss_vs_noise(model, datasets: Mapping[str, np.ndarray], s: NoiseSchedule,
                  t_grid: Optional[Sequence[float]] = None, repeats: int = 4, seed: int = 0) -> NoiseCurve:
    """Mean and unbiased variance of the per-draw diffusion loss at each grid time."""
    grid = np.asarray(DEFAULT_T_GRID if t_grid is None else t_grid, dtype=float)
    if grid.size == 0:
        raise ValueError("t_grid is empty")
    if np.any((grid < 0) | (grid > 1)):
        raise ValueError("t_grid must lie in [0, 1]")
    grid = np.sort(grid)
    curve = NoiseCurve(grid)
    root = nc.Rng(seed, (0xC0E,))
    for di, (name, data) in enumerate(datasets.items()):
        z = np.atleast_2d(np.asarray(getattr(data, "features", data), dtype=float))
        n = z.shape[0]
        means, vars_, ses = np.empty(grid.size), np.empty(grid.size), np.empty(grid.size)
        for i, t in enumerate(grid):
            losses = per_draw_losses(model, z, float(t), s, repeats, root.child(di, i))
            means[i] = losses.mean()
            vars_[i] = losses.var(ddof=1) if losses.size > 1 else 0.0
            # draws sharing a sample are correlated, so the s.e. uses per-sample means
            per_sample = losses.reshape(repeats, n).mean(axis=0)
            ses[i] = per_sample.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
        curve.mean[name], curve.var[name], curve.count[name] = means, vars_, n * repeats
        curve.se[name] = ses
    return curve


def score_histograms(vectors: Mapping[str, np.ndarray], bins: int = HIST_BINS):
    """Shared-edge histograms, same binning as the evaluation report."""
    return histogram(vectors, bins)
