"""Forward diffusion, the VDM objective and the AdamW training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from . import numcore as nc
from .denoiser import DenoiserConfig, DenoiserModel
from .schedule import LinearSchedule, NoiseSchedule

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Non-finite loss during training."""

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 128
    learning_rate: float = 2e-4
    weight_decay: float = 0.01
    plateau_patience: int = 100
    plateau_factor: float = 0.9
    cfg_drop_prob: float = 0.1
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0 or self.plateau_patience < 1:
            raise ValueError("epochs, batch_size, learning_rate and plateau_patience must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if not 0.0 <= self.cfg_drop_prob <= 1.0:
            raise ValueError("cfg_drop_prob must lie in [0, 1]")


@dataclass
class EpochRecord:
    epoch: int
    diffusion_loss: float
    prior_kl: float
    lr: float


@dataclass
class TrainState:
    model: DenoiserModel
    schedule: NoiseSchedule
    lr: float
    epoch: int = 0
    history: list[EpochRecord] = field(default_factory=list)


# ---------------------------------------------------------------------------
# objective pieces


def forward_diffuse(z, t, eps, s: NoiseSchedule) -> np.ndarray:
    """z_t = alpha_t z + sigma_t eps; ``t`` may be a scalar or one value per row."""
    z = np.asarray(z, dtype=float)
    gamma = np.asarray(s.gamma(t), dtype=float)
    if z.ndim == 2 and gamma.ndim == 1:
        gamma = gamma[:, None]
    return np.sqrt(expit(-gamma)) * z + np.sqrt(expit(gamma)) * np.asarray(eps, dtype=float)


def prior_kl(z, s: NoiseSchedule) -> np.ndarray:
    """KL(N(alpha_1 z, sigma_1^2 I) || N(0, I)), one value per row of ``z``."""
    z = np.asarray(z, dtype=float)
    g1 = float(s.gamma(1.0))
    sigma2 = expit(g1)
    alpha2 = expit(-g1)
    # -log sigma^2 = softplus(-gamma) avoids cancellation
    return 0.5 * np.sum(sigma2 + alpha2 * z * z - 1.0 + np.logaddexp(0.0, -g1), axis=-1)


def _noisy_latent(z: np.ndarray, t: np.ndarray, eps: np.ndarray, s: NoiseSchedule) -> nc.Tensor:
    if not s.params():
        return nc.Tensor(forward_diffuse(z, t, eps, s))
    gamma = nc.reshape(s.gamma_tensor(nc.Tensor(t)), (len(t), 1))
    alpha = nc.sqrt(nc.sigmoid(nc.mul(gamma, -1.0)))
    sigma = nc.sqrt(nc.sigmoid(gamma))
    return nc.add(nc.mul(alpha, z), nc.mul(sigma, eps))


def _loss_tensor(m: DenoiserModel, s: NoiseSchedule, z, t, eps, cls) -> nc.Tensor:
    eps_hat = m.forward(_noisy_latent(z, t, eps, s), t, cls)
    per_row = nc.sum(nc.square(nc.sub(eps, eps_hat)), axis=1)
    return nc.mul(nc.mean(per_row), 0.5)


def diffusion_loss(m: DenoiserModel, batch, s: NoiseSchedule, rng: nc.Rng, ctx=None, antithetic: bool = False) -> float:
    """Monte Carlo estimate of 0.5 E||eps - eps_hat(z_t, t)||^2 over t ~ U(0,1), eps ~ N(0, I).

    With ``antithetic=True`` the batch is scored at t and 1 - t with the same
    noise and the two halves are averaged.
    """
    z = np.atleast_2d(np.asarray(batch, dtype=float))
    if z.shape[0] == 0:
        raise ValueError("diffusion_loss needs a nonempty batch")
    n = z.shape[0]
    t = rng.uniform(n)
    eps = rng.normal(z.shape)
    cls = m.class_index(ctx, n)
    loss = _loss_tensor(m, s, z, t, eps, cls).value
    if antithetic:
        loss = 0.5 * (loss + _loss_tensor(m, s, z, 1.0 - t, eps, cls).value)
    return float(loss)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay (decay applied before the moment step)."""

    def __init__(self, params: list[nc.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            p.value *= 1.0 - self.lr * self.wd
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without relative improvement."""

    def __init__(self, factor: float, patience: int, threshold: float = 1e-4):
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric: float, lr: float) -> float:
        if metric < self.best - abs(self.best) * self.threshold or math.isinf(self.best):
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.bad_epochs = 0
            return lr * self.factor
        return lr


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: DenoiserModel
    schedule: NoiseSchedule
    history: list[EpochRecord]


def _as_arrays(data):
    if hasattr(data, "features"):
        return np.asarray(data.features, dtype=float), getattr(data, "labels", None)
    if isinstance(data, tuple):
        return np.asarray(data[0], dtype=float), data[1]
    return np.asarray(data, dtype=float), None


def train(
    cfg: TrainConfig,
    data,
    s: Optional[NoiseSchedule] = None,
    model: Optional[DenoiserModel] = None,
    model_config: Optional[DenoiserConfig] = None,
    callback=None,
) -> TrainResult:
    """Fit the denoiser (and a learnable schedule, if given) on normalized features.

    ``data`` is a dataset with ``features``/``labels``, a ``(features, labels)``
    tuple or a bare array. Labels are dropped to the null class with
    probability ``cfg.cfg_drop_prob`` per example.
    """
    x, labels = _as_arrays(data)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("training data must be a nonempty 2-d array")
    s = s if s is not None else LinearSchedule()
    if model is None:
        if model_config is None:
            n_cls = 0 if labels is None else int(np.max(labels)) + 1
            model_config = DenoiserConfig(input_dim=x.shape[1], num_classes=n_cls, seed=cfg.seed)
        model = DenoiserModel(model_config)
    if x.shape[1] != model.config.input_dim:
        raise ValueError(f"data dim {x.shape[1]} does not match model input dim {model.config.input_dim}")
    null = model.config.null_class
    lab = np.full(x.shape[0], null, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)

    params = model.parameters() + s.params()
    opt = AdamW(params, cfg.learning_rate, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    plateau = PlateauScheduler(cfg.plateau_factor, cfg.plateau_patience)
    state = TrainState(model=model, schedule=s, lr=cfg.learning_rate)
    root = nc.Rng(cfg.seed, (0x7A1,))
    n = x.shape[0]

    for epoch in range(cfg.epochs):
        order = root.child(epoch).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            rng = root.child(epoch, b + 1)
            z = x[idx]
            t = rng.uniform(len(idx))
            eps = rng.normal(z.shape)
            drop = rng.uniform(len(idx)) < cfg.cfg_drop_prob
            cls = np.where(drop, null, lab[idx])
            loss = _loss_tensor(model, s, z, t, eps, cls)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingError(epoch, b, value)
            grads = nc.backward(loss, params)
            opt.lr = state.lr
            opt.step(grads)
            total += value * len(idx)
        kl = float(np.mean(prior_kl(x, s)))
        diff = total / n
        state.history.append(EpochRecord(epoch, diff, kl, state.lr))
        state.lr = plateau.step(diff + kl, state.lr)
        state.epoch = epoch + 1
        if callback is not None:
            callback(state)
        if epoch % 100 == 0:
            log.debug("epoch %d diffusion %.5f prior_kl %.5f lr %.3g", epoch, diff, kl, state.lr)
    return TrainResult(model=model, schedule=s, history=state.history)
