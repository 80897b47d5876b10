"""Shared trained-model fixtures and the acceptance summary hook."""
import time
from dataclasses import dataclass

import numpy as np
import pytest

from vdmood import data as dm
from vdmood.denoiser import DenoiserConfig
from vdmood.schedule import LinearSchedule
from vdmood.train import TrainConfig, train

ACCEPTANCE_LINES: list[str] = []


@dataclass
class Trained:
    model: object
    schedule: object
    train_seconds: float
    extra: dict


@pytest.fixture(scope="session")
def gaussian_model():
    """N(0, I) d=2 model; fast lr annealing via a short plateau patience."""
    x = np.random.default_rng(0).standard_normal((4096, 2))
    s = LinearSchedule()
    cfg = TrainConfig(epochs=300, learning_rate=1e-3, plateau_patience=10, plateau_factor=0.7, seed=0)
    t0 = time.perf_counter()
    res = train(cfg, x, s, model_config=DenoiserConfig(input_dim=2, fourier_n=None))
    return Trained(res.model, res.schedule, time.perf_counter() - t0, {"history": res.history})


@pytest.fixture(scope="session")
def gmm2_benchmark():
    """Class-conditional model on normalized gmm2 plus InD-test and uniform-box OOD splits."""
    tr = dm.synth("gmm2", 4096, 2, seed=0)
    te = dm.synth("gmm2", 500, 2, seed=1)
    box = dm.synth("uniform-box", 500, 2, seed=2)
    trn, (ten, boxn), _ = dm.normalize(tr, te, box)
    s = LinearSchedule()
    cfg = TrainConfig(epochs=100, learning_rate=1e-3, plateau_patience=10, plateau_factor=0.7, seed=0)
    t0 = time.perf_counter()
    res = train(cfg, (trn.features, trn.labels), s,
                model_config=DenoiserConfig(input_dim=2, num_classes=2, fourier_n=None))
    extra = {
        "train": trn, "test": ten, "ood": boxn,
        "test_logits": dm.gmm2_class_logits(te.features), "ood_logits": dm.gmm2_class_logits(box.features),
    }
    return Trained(res.model, res.schedule, time.perf_counter() - t0, extra)


@pytest.fixture(scope="session")
def cfg_drop_one_model():
    tr = dm.synth("gmm2", 512, 2, seed=3)
    trn, _, _ = dm.normalize(tr)
    s = LinearSchedule()
    cfg = TrainConfig(epochs=5, learning_rate=1e-3, cfg_drop_prob=1.0, seed=0)
    t0 = time.perf_counter()
    res = train(cfg, (trn.features, trn.labels), s,
                model_config=DenoiserConfig(input_dim=2, num_classes=2, fourier_n=None, hidden_dims=(32, 32)))
    return Trained(res.model, res.schedule, time.perf_counter() - t0, {"data": trn})


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
