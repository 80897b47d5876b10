"""Noise-prediction network eps_hat(z_t, t, class) and its checkpoint format.

The backbone is a fully connected encoder-decoder. Every hidden block is
``GeLU(LayerNorm(W h + b + C cond))`` where ``cond`` is the sum of the time
embedding and the class-context embedding; encoder and decoder blocks of
equal width are joined by additive skip connections.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import numcore as nc

CHECKPOINT_MAGIC = b"VDMC"
CHECKPOINT_VERSION = 1


@dataclass
class DenoiserConfig:
    input_dim: int
    num_classes: int = 0
    hidden_dims: tuple[int, ...] = (256, 128, 64, 128, 256)
    fourier_n: Optional[int] = 7
    time_embed_dim: int = 128
    class_embed_dim: int = 128
    time_max_freq: float = 16.0
    seed: int = 0

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.input_dim < 1 or not self.hidden_dims:
            raise ValueError("input_dim and hidden_dims must be nonempty")
        if self.time_embed_dim != self.class_embed_dim:
            raise ValueError("time and class embeddings are summed, so their sizes must match")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @property
    def null_class(self) -> int:
        return self.num_classes

    @property
    def feature_dim(self) -> int:
        return self.input_dim * (1 if self.fourier_n is None else 3)


@dataclass(frozen=True)
class ConditioningContext:
    """``class_id=None`` selects the null (unconditional) embedding."""

    class_id: Optional[int] = None

    @property
    def is_null(self) -> bool:
        return self.class_id is None


UNCONDITIONAL = ConditioningContext()


def fourier_augment(z: np.ndarray, n: int = 7) -> np.ndarray:
    """Concatenate ``z`` with ``sin(2^n pi z)`` and ``cos(2^n pi z)`` along the last axis."""
    z = np.asarray(z, dtype=float)
    w = (2.0**n) * math.pi
    return np.concatenate([z, np.sin(w * z), np.cos(w * z)], axis=-1)


def _fourier_tensor(z: nc.Tensor, n: int) -> nc.Tensor:
    scaled = nc.mul(z, (2.0**n) * math.pi)
    return nc.concat([z, nc.sin(scaled), nc.cos(scaled)], axis=-1)


def time_frequencies(dim: int, max_freq: float = 16.0) -> np.ndarray:
    return np.exp(np.linspace(0.0, math.log(max_freq), dim // 2))


def time_embed(t, dim: int = 128, max_freq: float = 16.0) -> np.ndarray:
    """Sinusoidal embedding ``[sin(f_k t), cos(f_k t)]`` over log-spaced ``f_k``.

    Returns shape ``t.shape + (dim,)``.
    """
    t = np.asarray(t, dtype=float)
    arg = t[..., None] * time_frequencies(dim, max_freq)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


class DenoiserModel:
    def __init__(self, config: DenoiserConfig):
        self.config = config
        rng = nc.Rng(config.seed, (0xD3,))
        cfg = config
        ce = cfg.time_embed_dim
        p: dict[str, nc.Tensor] = {}

        def linear(name, fan_in, fan_out, zero=False):
            w = np.zeros((fan_in, fan_out)) if zero else rng.normal((fan_in, fan_out)) / math.sqrt(fan_in)
            p[f"{name}.w"] = nc.Tensor(w, requires_grad=True)
            p[f"{name}.b"] = nc.Tensor(np.zeros((1, fan_out)), requires_grad=True)

        linear("time", ce, ce)
        p["class.base"] = nc.Tensor(rng.normal((1, ce)), requires_grad=True)
        # per-class offsets from the null embedding; zero until a labelled example updates them
        p["class.delta"] = nc.Tensor(np.zeros((cfg.num_classes, ce)), requires_grad=True)
        prev = cfg.feature_dim
        for i, h in enumerate(cfg.hidden_dims):
            linear(f"block{i}", prev, h)
            p[f"block{i}.cond"] = nc.Tensor(rng.normal((ce, h)) / math.sqrt(ce), requires_grad=True)
            p[f"block{i}.ln_scale"] = nc.Tensor(np.ones((1, h)), requires_grad=True)
            p[f"block{i}.ln_shift"] = nc.Tensor(np.zeros((1, h)), requires_grad=True)
            prev = h
        linear("out", prev, cfg.input_dim, zero=True)
        self.params = p
        self.skips = _skip_pairs(cfg.hidden_dims)
        self._freqs = time_frequencies(ce, cfg.time_max_freq)

    # -- parameters ------------------------------------------------------
    def parameters(self) -> list[nc.Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            arr = np.asarray(state[k], dtype=float)
            if arr.shape != v.shape:
                raise ValueError(f"parameter {k}: expected shape {v.shape}, got {arr.shape}")
            v.value = arr.copy()

    # -- forward -----------------------------------------------------------
    def class_index(self, ctx, n: int) -> np.ndarray:
        """Resolve a context, or an array of class ids with -1 meaning null, to table rows."""
        null = self.config.null_class
        if ctx is None or isinstance(ctx, ConditioningContext):
            cid = None if ctx is None else ctx.class_id
            if cid is not None and not 0 <= cid < null:
                raise ValueError(f"class id {cid} out of range for {null} classes")
            return np.full(n, null if cid is None else cid, dtype=np.int64)
        ids = np.asarray(ctx, dtype=np.int64).reshape(-1)
        if ids.shape[0] != n:
            raise ValueError(f"got {ids.shape[0]} class ids for {n} samples")
        if np.any(ids >= null):
            raise ValueError(f"class id out of range for {null} classes")
        return np.where(ids < 0, null, ids)

    def forward(self, z_t: nc.Tensor, t, cls: np.ndarray) -> nc.Tensor:
        """Tape forward pass. ``t`` is a scalar or per-row array, ``cls`` row indices."""
        p = self.params
        cfg = self.config
        n = z_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        arg = t[:, None] * self._freqs
        sinus = np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)
        temb = nc.gelu(nc.add(nc.matmul(sinus, p["time.w"]), p["time.b"]))
        table = nc.concat([p["class.delta"], np.zeros((1, cfg.class_embed_dim))], axis=0)
        cemb = nc.add(p["class.base"], nc.take_rows(table, cls))
        cond = nc.add(temb, cemb)

        h = z_t if cfg.fourier_n is None else _fourier_tensor(z_t, cfg.fourier_n)
        acts: list[nc.Tensor] = []
        for i in range(len(cfg.hidden_dims)):
            pre = nc.add(nc.add(nc.matmul(h, p[f"block{i}.w"]), p[f"block{i}.b"]), nc.matmul(cond, p[f"block{i}.cond"]))
            h = nc.gelu(nc.layer_norm(pre, p[f"block{i}.ln_scale"], p[f"block{i}.ln_shift"]))
            if i in self.skips:
                h = nc.add(h, acts[self.skips[i]])
            acts.append(h)
        return nc.add(nc.matmul(h, p["out.w"]), p["out.b"])

    def __call__(self, z_t, t, ctx=None) -> np.ndarray:
        return predict_noise(self, z_t, t, ctx)


def _skip_pairs(hidden: tuple[int, ...]) -> dict[int, int]:
    """Map decoder block index -> mirrored encoder block index of equal width."""
    pairs = {}
    n = len(hidden)
    for j in range(n // 2):
        k = n - 1 - j
        if hidden[j] == hidden[k]:
            pairs[k] = j
    return pairs


def predict_noise(m: DenoiserModel, z_t, t, ctx=None) -> np.ndarray:
    """Evaluate eps_hat for a batch (or single vector) of noisy latents."""
    z = np.asarray(z_t, dtype=float)
    single = z.ndim == 1
    z2 = z.reshape(1, -1) if single else z
    if z2.shape[1] != m.config.input_dim:
        raise ValueError(f"expected latent dim {m.config.input_dim}, got {z2.shape[1]}")
    cls = m.class_index(ctx, z2.shape[0])
    out = m.forward(nc.Tensor(z2), t, cls).value
    return out[0] if single else out


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path, model: DenoiserModel, schedule=None, extra: Optional[dict] = None) -> None:
    """Write ``VDMC | u32 version | u32 len | config json | f64 payload``."""
    from .schedule import MonotoneSchedule

    arrays = [(k, v.value) for k, v in model.params.items()]
    sched_cfg = None
    if schedule is not None:
        sched_cfg = schedule.config()
        if isinstance(schedule, MonotoneSchedule):
            arrays += [(f"schedule.{k}", v) for k, v in schedule.state().items()]
    header = {
        "model": asdict(model.config),
        "schedule": sched_cfg,
        "extra": extra or {},
        "arrays": [[k, list(a.shape)] for k, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for _, a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Return ``(model, schedule, extra)`` from a file written by :func:`save_checkpoint`."""
    from .schedule import make_schedule

    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + n])
    offset = 12 + n
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(float)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing payload bytes")
    model = DenoiserModel(DenoiserConfig(**header["model"]))
    model.load_state({k: v for k, v in arrays.items() if not k.startswith("schedule.")})
    schedule = None
    if header["schedule"] is not None:
        cfg = dict(header["schedule"])
        schedule = make_schedule(**cfg)
        if cfg["kind"] == "learned":
            schedule.load_state({k[len("schedule.") :]: v for k, v in arrays.items() if k.startswith("schedule.")})
    return model, schedule, header["extra"]


class StandardNormalOracle:
    """Analytic optimum eps_hat*(z_t, t) = sigma_t z_t for N(0, I) data.

    Exposes the same ``forward``/``class_index`` surface as
    :class:`DenoiserModel` so it can stand in for a trained network.
    """

    def __init__(self, schedule, input_dim: int, num_classes: int = 0):
        self.schedule = schedule
        self.config = DenoiserConfig(input_dim=input_dim, num_classes=num_classes, hidden_dims=(1,))

    def class_index(self, ctx, n: int) -> np.ndarray:
        return DenoiserModel.class_index(self, ctx, n)

    def forward(self, z_t: nc.Tensor, t, cls) -> nc.Tensor:
        sigma = self.schedule.point(np.asarray(t, dtype=float)).sigma
        sigma = np.broadcast_to(sigma, (z_t.shape[0],))[:, None]
        return nc.mul(z_t, sigma)

    def __call__(self, z_t, t, ctx=None) -> np.ndarray:
        return predict_noise(self, z_t, t, ctx)


class ZeroDenoiser(StandardNormalOracle):
    """Predicts eps_hat = 0 everywhere."""

    def forward(self, z_t, t, cls):
        return nc.mul(z_t, 0.0)
