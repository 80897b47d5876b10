"""Probability-flow ODE likelihoods for a noise-predicting VDM.

For sigma_t^2 = sigmoid(gamma(t)) the variance-preserving SDE has
g(t)^2 = gamma'(t) sigma_t^2, and with score -eps_hat / sigma_t the flow is

    dz/dt = -1/2 gamma'(t) (sigma_t^2 z - sigma_t eps_hat(z, t)).

Integrating t: 0 -> 1 together with the divergence of that drift gives
log p_0(z(0)) = log p_T(z(T)) + int_0^1 div f dt.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from . import numcore as nc
from .denoiser import ConditioningContext
from .schedule import NoiseSchedule

PROBE_KINDS = ("rademacher", "gaussian")


class FlowError(ArithmeticError):
    def __init__(self, step: int, msg: str = "non-finite state"):
        super().__init__(f"{msg} at integration step {step}")
        self.step = step


@dataclass(frozen=True)
class FlowConfig:
    steps: int = 50
    probe_count: int = 1
    probe_kind: str = "rademacher"
    conditioning: Optional[ConditioningContext] = None
    seed: int = 0
    chunk_size: int = 1024

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("steps must be >= 2")
        if self.probe_count < 1:
            raise ValueError("probe_count must be >= 1")
        if self.probe_kind not in PROBE_KINDS:
            raise ValueError(f"probe_kind must be one of {PROBE_KINDS}")


@dataclass
class FlowResult:
    """Per-sample outputs; arrays have one row/entry per input sample."""

    z_terminal: np.ndarray
    div_integral: np.ndarray
    log_p0: np.ndarray
    log_pT: np.ndarray


def score(m, z_t, t: float, ctx, s: NoiseSchedule) -> np.ndarray:
    """s_theta(z_t, t) = -eps_hat(z_t, t) / sigma_t."""
    z = np.atleast_2d(np.asarray(z_t, dtype=float))
    sigma = math.sqrt(expit(float(s.gamma(t))))
    eps_hat = m.forward(nc.Tensor(z), t, m.class_index(ctx, z.shape[0])).value
    out = -eps_hat / sigma
    return out.reshape(np.shape(z_t))


def _drift_fn(m, t: float, cls: np.ndarray, s: NoiseSchedule) -> Callable[[nc.Tensor], nc.Tensor]:
    point = s.point(t)
    sigma2 = float(point.sigma2)
    sigma = float(point.sigma)
    coef = -0.5 * float(point.gamma_prime)

    def fn(z: nc.Tensor) -> nc.Tensor:
        eps_hat = m.forward(z, t, cls)
        return nc.mul(nc.sub(nc.mul(z, sigma2), nc.mul(eps_hat, sigma)), coef)

    return fn


def pf_drift(m, z, t: float, ctx, s: NoiseSchedule) -> np.ndarray:
    """Probability-flow drift -1/2 gamma' sigma^2 (z + score)."""
    z2 = np.atleast_2d(np.asarray(z, dtype=float))
    out = _drift_fn(m, t, m.class_index(ctx, z2.shape[0]), s)(nc.Tensor(z2)).value
    return out.reshape(np.shape(z))


def draw_probes(rng: nc.Rng, count: int, dim: int, kind: str = "rademacher") -> np.ndarray:
    if kind == "rademacher":
        return rng.rademacher((count, dim))
    if kind == "gaussian":
        return rng.normal((count, dim))
    raise ValueError(f"unknown probe kind {kind!r}")


def _divergence_and_value(fn, z: np.ndarray, probes: np.ndarray):
    """One forward pass, one reverse pass per probe; returns (fn(z), estimate)."""
    leaf = nc.Tensor(z, requires_grad=True)
    out = fn(leaf)
    est = np.zeros(z.shape[0])
    for v in probes:
        nc.backward(nc.sum(nc.mul(out, v)), [leaf])
        est += np.sum(leaf.grad * v, axis=-1)
    return out.value, est / len(probes)


def divergence(fn, z, probes) -> np.ndarray:
    """Skilling-Hutchinson estimate of tr(d fn / d z) per row.

    ``probes`` has shape ``(P, d)`` (shared by all rows) or ``(P, n, d)``.
    Each term is ``v^T J v`` with ``v^T J`` taken by reverse mode.
    """
    z2 = np.atleast_2d(np.asarray(z, dtype=float))
    probes = np.asarray(probes, dtype=float)
    if probes.ndim == 1:
        probes = probes[None]
    if probes.shape[0] < 1:
        raise ValueError("need at least one probe")
    _, est = _divergence_and_value(fn, z2, probes)
    return est if np.ndim(z) == 2 else est[0]


def exact_divergence(fn, z) -> np.ndarray:
    """Trace of the Jacobian from d reverse passes over the basis vectors."""
    z2 = np.atleast_2d(np.asarray(z, dtype=float))
    d = z2.shape[1]
    leaf = nc.Tensor(z2, requires_grad=True)
    out = fn(leaf)
    tr = np.zeros(z2.shape[0])
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        nc.backward(nc.sum(nc.mul(out, e)), [leaf])
        tr += leaf.grad[:, i]
    return tr if np.ndim(z) == 2 else tr[0]


def prior_logpdf(z: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """log N(z; 0, sigma_T^2 I) with sigma_T^2 = sigmoid(gamma(1))."""
    var = float(expit(float(s.gamma(1.0))))
    return np.sum(-0.5 * math.log(2.0 * math.pi * var) - z * z / (2.0 * var), axis=-1)


def _sample_probes(cfg: FlowConfig, ids: np.ndarray, d: int) -> np.ndarray:
    root = nc.Rng(cfg.seed, (0xF10,))
    per = [draw_probes(root.child(int(i)), cfg.probe_count, d, cfg.probe_kind) for i in ids]
    return np.stack(per, axis=1)  # (P, n, d)


def integrate(m, z0, cfg: FlowConfig, s: NoiseSchedule, sample_ids=None) -> FlowResult:
    """Classical RK4 over t in [0, 1] on the state and the divergence accumulator.

    Probe vectors are drawn once per sample from the stream keyed by its id
    (row index by default) and reused at every stage.
    """
    z0 = np.atleast_2d(np.asarray(z0, dtype=float))
    n, d = z0.shape
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    cls = m.class_index(cfg.conditioning, n)
    zs, divs = [], []
    for lo in range(0, n, cfg.chunk_size):
        hi = min(n, lo + cfg.chunk_size)
        probes = _sample_probes(cfg, ids[lo:hi], d)
        z_t, acc = _rk4(m, z0[lo:hi], cls[lo:hi], probes, cfg.steps, s)
        zs.append(z_t)
        divs.append(acc)
    z_T = np.concatenate(zs)
    div = np.concatenate(divs)
    log_pT = prior_logpdf(z_T, s)
    return FlowResult(z_terminal=z_T, div_integral=div, log_p0=log_pT + div, log_pT=log_pT)


def _rk4(m, z, cls, probes, steps: int, s: NoiseSchedule):
    h = 1.0 / steps
    acc = np.zeros(z.shape[0])

    def f(t, y):
        return _divergence_and_value(_drift_fn(m, t, cls, s), y, probes)

    for k in range(steps):
        t = k * h
        k1, d1 = f(t, z)
        k2, d2 = f(t + 0.5 * h, z + 0.5 * h * k1)
        k3, d3 = f(t + 0.5 * h, z + 0.5 * h * k2)
        k4, d4 = f(min(t + h, 1.0), z + h * k3)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        acc = acc + (h / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(acc))):
            raise FlowError(k)
    return z, acc


def exact_log_likelihood(m, z, cfg: FlowConfig, s: NoiseSchedule, sample_ids=None) -> np.ndarray:
    return integrate(m, z, cfg, s, sample_ids).log_p0


def prior_log_likelihood(m, z, cfg: FlowConfig, s: NoiseSchedule, sample_ids=None) -> np.ndarray:
    return integrate(m, z, cfg, s, sample_ids).log_pT
