"""Noise schedules: sigma_t^2 = sigmoid(gamma(t)) on t in [0, 1]."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import numcore as nc

DEFAULT_GAMMA_MIN = -13.3
DEFAULT_GAMMA_MAX = 5.0


@dataclass(frozen=True)
class SchedulePoint:
    """Schedule quantities at one or more times (arrays broadcast with ``t``)."""

    t: np.ndarray
    gamma: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    gamma_prime: np.ndarray

    @property
    def alpha2(self) -> np.ndarray:
        return expit(-self.gamma)

    @property
    def sigma2(self) -> np.ndarray:
        return expit(self.gamma)

    @property
    def g(self) -> np.ndarray:
        """Diffusion coefficient of the equivalent variance-preserving SDE."""
        return self.sigma * np.sqrt(self.gamma_prime)


class NoiseSchedule:
    kind = "abstract"

    def __init__(self, gamma_min: float = DEFAULT_GAMMA_MIN, gamma_max: float = DEFAULT_GAMMA_MAX):
        if not gamma_min < gamma_max:
            raise ValueError(f"gamma_min ({gamma_min}) must be below gamma_max ({gamma_max})")
        self.gamma_min = float(gamma_min)
        self.gamma_max = float(gamma_max)

    def params(self) -> list[nc.Tensor]:
        return []

    def gamma_tensor(self, t: nc.Tensor) -> nc.Tensor:
        raise NotImplementedError

    def gamma(self, t) -> np.ndarray:
        return self.gamma_tensor(nc.Tensor(np.asarray(t, dtype=float))).value

    def gamma_prime(self, t) -> np.ndarray:
        raise NotImplementedError

    def point(self, t) -> SchedulePoint:
        t = np.asarray(t, dtype=float)
        gamma = self.gamma(t)
        return SchedulePoint(
            t=t,
            gamma=gamma,
            alpha=np.sqrt(expit(-gamma)),
            sigma=np.sqrt(expit(gamma)),
            gamma_prime=np.broadcast_to(self.gamma_prime(t), t.shape).copy(),
        )

    def config(self) -> dict:
        return {"kind": self.kind, "gamma_min": self.gamma_min, "gamma_max": self.gamma_max}


class LinearSchedule(NoiseSchedule):
    kind = "linear"

    def gamma_tensor(self, t):
        return nc.add(nc.mul(t, self.gamma_max - self.gamma_min), self.gamma_min)

    def gamma(self, t):
        t = np.asarray(t, dtype=float)
        return self.gamma_min + (self.gamma_max - self.gamma_min) * t

    def gamma_prime(self, t):
        return np.full(np.shape(t), self.gamma_max - self.gamma_min)


class MonotoneSchedule(NoiseSchedule):
    """Learnable schedule from a 1 -> hidden -> 1 network with positive weights.

    ``m(t) = softplus(a) t + sum_k softplus(w2_k) sigmoid(softplus(w1_k) t + b_k)``
    is strictly increasing for any parameter values; gamma is ``m`` affinely
    rescaled so that gamma(0) = gamma_min and gamma(1) = gamma_max.
    """

    kind = "learned"

    def __init__(self, gamma_min=DEFAULT_GAMMA_MIN, gamma_max=DEFAULT_GAMMA_MAX, hidden: int = 64, seed: int = 0):
        super().__init__(gamma_min, gamma_max)
        rng = nc.Rng(seed, (0x5C4D,))
        slope = 1.0 + 9.0 * rng.uniform(hidden)
        centers = rng.uniform(hidden)
        self.hidden = hidden
        self.a = nc.Tensor(np.zeros((1, 1)), requires_grad=True)
        self.w1 = nc.Tensor(np.log(np.expm1(slope)).reshape(1, hidden), requires_grad=True)
        self.b1 = nc.Tensor((-slope * centers).reshape(1, hidden), requires_grad=True)
        self.w2 = nc.Tensor(np.full((hidden, 1), -2.0) + 0.1 * rng.normal((hidden, 1)), requires_grad=True)

    def params(self):
        return [self.a, self.w1, self.b1, self.w2]

    def _raw(self, t: nc.Tensor, p) -> nc.Tensor:
        a, w1, b1, w2 = p
        h = nc.sigmoid(nc.add(nc.matmul(t, nc.softplus(w1)), b1))
        return nc.add(nc.matmul(h, nc.softplus(w2)), nc.mul(t, nc.softplus(a)))

    def _gamma(self, t: nc.Tensor, p) -> nc.Tensor:
        shape = t.shape
        col = nc.reshape(t, (t.value.size, 1))
        ends = self._raw(nc.Tensor(np.array([[0.0], [1.0]])), p)
        m0 = nc.take_rows(ends, np.array([0]))
        m1 = nc.take_rows(ends, np.array([1]))
        frac = nc.div(nc.sub(self._raw(col, p), m0), nc.sub(m1, m0))
        out = nc.add(nc.mul(frac, self.gamma_max - self.gamma_min), self.gamma_min)
        return nc.reshape(out, shape)

    def gamma_tensor(self, t):
        return self._gamma(t, self.params())

    def gamma_prime(self, t):
        """d gamma / dt, taken through the tape with detached parameter copies."""
        t = np.asarray(t, dtype=float)
        leaf = nc.Tensor(t.reshape(-1, 1), requires_grad=True)
        frozen = [nc.Tensor(p.value) for p in self.params()]
        out = self._gamma(leaf, frozen)
        nc.backward(nc.sum(out), [leaf])
        return leaf.grad.reshape(t.shape)

    def state(self) -> dict[str, np.ndarray]:
        return {"a": self.a.value, "w1": self.w1.value, "b1": self.b1.value, "w2": self.w2.value}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name in ("a", "w1", "b1", "w2"):
            getattr(self, name).value = np.array(state[name], dtype=float)

    def config(self):
        return {**super().config(), "hidden": self.hidden}


def make_schedule(kind: str = "linear", gamma_min: float = DEFAULT_GAMMA_MIN, gamma_max: float = DEFAULT_GAMMA_MAX, **kw) -> NoiseSchedule:
    if kind == "linear":
        return LinearSchedule(gamma_min, gamma_max)
    if kind in ("learned", "monotone-net"):
        return MonotoneSchedule(gamma_min, gamma_max, **kw)
    raise ValueError(f"unknown schedule kind {kind!r}")


def eval_schedule(s: NoiseSchedule, t) -> SchedulePoint:
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or not np.all(np.isfinite(t_arr)):
        raise ValueError(f"schedule time must lie in [0, 1], got {t!r}")
    return s.point(t_arr)


def snr(s: NoiseSchedule, t) -> np.ndarray:
    """Signal-to-noise ratio alpha_t^2 / sigma_t^2 = exp(-gamma(t))."""
    return np.exp(-eval_schedule(s, t).gamma)
