"""The thirteen acceptance criteria, each at its stated tolerance.

Every test records one ``PASS``/``FAIL`` line, printed in the terminal
summary (see ``conftest.py``), then asserts.
"""
import math
import time

import numpy as np
import pytest
from scipy.stats import norm, spearmanr

from vdmood import numcore as nc
from vdmood.baselines import fit_baseline, fit_gaussian, fit_gmm_em, baseline_logpdf, gaussian_logpdf, gmm_logpdf
from vdmood.cli import main
from vdmood.denoiser import ConditioningContext, DenoiserConfig, DenoiserModel, StandardNormalOracle
from vdmood.diagnostics import loss_vs_noise
from vdmood.flow import FlowConfig, divergence, integrate
from vdmood.metrics import auroc, fpr_at_95_tpr
from vdmood.schedule import LinearSchedule, MonotoneSchedule
from vdmood.scores import flow_scores, score_tkdl, tkdl_from_losses
from vdmood.theory import default_uniform_setup, optimality_experiment
from conftest import ACCEPTANCE_LINES
from oracles import central_diff, pairwise_auroc, rademacher_set, riemann_1d, riemann_2d, std_normal_logpdf, sweep_fpr95


def verdict(n, title, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'} {title} ({detail})")
    print(ACCEPTANCE_LINES[-1])
    assert ok, ACCEPTANCE_LINES[-1]


def test_c01_schedule_identity():
    t0 = time.perf_counter()
    t = np.linspace(0.0, 1.0, 1000)
    worst, mono = 0.0, True
    learned = MonotoneSchedule(hidden=16, seed=0)
    rng = np.random.default_rng(0)
    for p in learned.params():
        p.value = p.value + 0.5 * rng.normal(size=p.shape)
    for s in (LinearSchedule(), LinearSchedule(-10.0, 10.0), MonotoneSchedule(seed=1), learned):
        pt = s.point(t)
        worst = max(worst, float(np.max(np.abs(pt.alpha2 + pt.sigma2 - 1.0))))
        mono &= bool(np.all(np.diff(s.gamma(t)) > 0))
    dt = time.perf_counter() - t0
    verdict(1, "schedule identity", worst <= 1e-15 and mono and dt < 1.0,
            f"max|a2+s2-1|={worst:.1e}, strictly increasing={mono}, {dt:.2f}s")


def test_c02_gradient_correctness():
    t0 = time.perf_counter()
    cfg = DenoiserConfig(input_dim=4, num_classes=3, hidden_dims=(8, 6, 8), time_embed_dim=8, class_embed_dim=8)
    m = DenoiserModel(cfg)
    rng = np.random.default_rng(5)
    for p in m.parameters():
        p.value = p.value + 0.3 * rng.normal(size=p.shape)
    z = rng.normal(size=(6, 4)) * 0.01
    t = rng.uniform(size=6)
    eps = rng.normal(size=(6, 4))
    cls = np.array([0, 1, 2, 3, 0, 3])

    def loss():
        return nc.mul(nc.sum(nc.square(nc.sub(eps, m.forward(nc.Tensor(z), t, cls)))), 0.5 / 6)

    worst = 0.0
    for p, g in zip(m.parameters(), nc.backward(loss(), m.parameters())):
        fd = central_diff(lambda: float(loss().value), p.value, h=1e-5)
        worst = max(worst, float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-8)))
    dt = time.perf_counter() - t0
    verdict(2, "gradient correctness", worst < 1e-4 and dt < 30, f"max relative error {worst:.1e}, {dt:.1f}s")


def test_c03_exact_likelihood_oracle():
    t0 = time.perf_counter()
    s = LinearSchedule(-13.3, 10.0)
    worst = 0.0
    for d in (1, 2, 4):
        z = nc.Rng(11, (d,)).normal((100, d))
        res = integrate(StandardNormalOracle(s, d), z, FlowConfig(steps=50), s)
        worst = max(worst, float(np.max(np.abs(res.log_p0 - std_normal_logpdf(z)))))
    dt = time.perf_counter() - t0
    verdict(3, "exact-likelihood oracle", worst < 1e-3 and dt < 10, f"max error {worst:.2e} nats, {dt:.1f}s")


def test_c04_trained_likelihood_fidelity(gaussian_model):
    t0 = time.perf_counter()
    z = np.random.default_rng(99).standard_normal((500, 2))
    res = integrate(gaussian_model.model, z, FlowConfig(steps=50), gaussian_model.schedule)
    analytic = norm.logpdf(z).sum(axis=1)
    mae = float(np.mean(np.abs(res.log_p0 - analytic)))
    rho = float(spearmanr(res.log_p0, analytic)[0])
    dt = gaussian_model.train_seconds + time.perf_counter() - t0
    verdict(4, "trained-model likelihood fidelity", mae < 0.1 and rho > 0.99 and dt < 900,
            f"mean|EL-logpdf|={mae:.4f}, spearman={rho:.4f}, 300 epochs, {dt:.0f}s")


def test_c05_hutchinson_unbiasedness():
    t0 = time.perf_counter()
    a3 = np.random.default_rng(3).normal(size=(3, 3))
    exact = abs(float(divergence(lambda z: nc.matmul(z, a3.T), np.zeros(3), rademacher_set(3))) - np.trace(a3))
    a5 = np.random.default_rng(4).normal(size=(5, 5))
    n = 100_000
    per = divergence(lambda z: nc.matmul(z, a5.T), np.zeros((n, 5)), nc.Rng(5).normal((1, n, 5)))
    se = per.std(ddof=1) / math.sqrt(n)
    gap = abs(per.mean() - np.trace(a5))
    dt = time.perf_counter() - t0
    verdict(5, "Hutchinson unbiasedness", exact < 1e-12 and gap < 3 * se and dt < 10,
            f"enumeration error {exact:.1e}, gaussian gap {gap / se:.2f} s.e., {dt:.1f}s")


def test_c06_rk4_order(gaussian_model, gmm2_benchmark):
    t0 = time.perf_counter()
    gaps = {}
    z = np.random.default_rng(7).standard_normal((150, 2))
    for name, tm in (("N(0,I)", gaussian_model), ("gmm2", gmm2_benchmark)):
        a = integrate(tm.model, z, FlowConfig(steps=50), tm.schedule).log_p0
        b = integrate(tm.model, z, FlowConfig(steps=100), tm.schedule).log_p0
        gaps[name] = float(np.max(np.abs(a - b)))
    dt = time.perf_counter() - t0
    detail = ", ".join(f"{k} model {v:.1e}" for k, v in gaps.items())
    verdict(6, "RK4 order", max(gaps.values()) < 1e-4 and dt < 60, f"max |EL(50)-EL(100)|: {detail}, {dt:.0f}s")


def test_c07_ood_separability(gmm2_benchmark):
    t0 = time.perf_counter()
    b = gmm2_benchmark
    cfg = FlowConfig(steps=50)
    el_i, pl_i, _ = flow_scores(b.model, b.extra["test"], cfg, b.schedule)
    el_o, pl_o, _ = flow_scores(b.model, b.extra["ood"], cfg, b.schedule)
    tk_i = score_tkdl(b.model, b.extra["test"], b.extra["test_logits"], b.schedule, k=2).scores.values
    tk_o = score_tkdl(b.model, b.extra["ood"], b.extra["ood_logits"], b.schedule, k=2).scores.values
    aucs = {"EL": auroc(el_i.values, el_o.values), "PL": auroc(pl_i.values, pl_o.values), "TKDL": auroc(tk_i, tk_o)}
    opt = optimality_experiment(default_uniform_setup(), 10_000, seed=0)
    dt = b.train_seconds + time.perf_counter() - t0
    ok = all(v > 0.95 for v in aucs.values()) and opt.auc_density == opt.auc_ratio and dt < 1200
    detail = ", ".join(f"{k} AUROC {v:.4f}" for k, v in aucs.items())
    verdict(7, "OOD separability", ok, f"{detail}, optimality auc_density-auc_ratio="
            f"{opt.auc_density - opt.auc_ratio:.1e}, {dt:.0f}s")


def test_c08_tkdl_bounds():
    rng = np.random.default_rng(8)
    ok_bounds = True
    for k in range(1, 9):
        raw = tkdl_from_losses(rng.uniform(0, 50, size=(200, k)))
        ok_bounds &= bool(np.all((raw >= 1.0 / k - 1e-15) & (raw <= 1.0)))
    equal = all(np.all(tkdl_from_losses(np.full((2, k), 3.7)) == 1.0 / k) for k in (1, 2, 3, 5, 10))
    two = abs(float(tkdl_from_losses(np.array([[1.0, 2.0]]))[0]) - 1.0 / (1.0 + math.exp(-1.0)))
    verdict(8, "TKDL bounds and arithmetic", ok_bounds and equal and two < 1e-12,
            f"bounds={ok_bounds}, equal-loss exact={equal}, (1,2) error {two:.1e}")


def test_c09_metric_oracles():
    rng = np.random.default_rng(9)
    worst_auc = worst_fpr = 0.0
    for i in range(100):
        n_i, n_o = rng.integers(1, 80, size=2)
        ind, ood = rng.normal(size=n_i), rng.normal(rng.uniform(0, 2), size=n_o)
        if i % 4 == 0:
            ind, ood = np.round(ind, 1), np.round(ood, 1)
        worst_auc = max(worst_auc, abs(auroc(ind, ood) - pairwise_auroc(ind, ood)))
        worst_fpr = max(worst_fpr, abs(fpr_at_95_tpr(ind, ood) - sweep_fpr95(list(ind), list(ood))))
    ind, ood = rng.normal(size=300), rng.normal(1, size=300)
    base = auroc(ind, ood)
    invariant = all(auroc(f(ind), f(ood)) == base for f in (np.exp, lambda v: 5 * v - 2, np.arctan, np.cbrt))
    verdict(9, "metric oracles", worst_auc <= 1e-12 and worst_fpr <= 1e-12 and invariant,
            f"AUROC error {worst_auc:.1e}, FPR@95 error {worst_fpr:.1e}, transform-invariant={invariant}")


def test_c10_baseline_sanity():
    rng = np.random.default_rng(10)
    lab = rng.integers(0, 2, 500)
    x2 = np.where(lab[:, None] == 0, -2.0, 2.0) * [1.0, 0.0] + rng.normal(size=(500, 2)) * [0.7, 1.2]
    x1 = x2[:, :1]
    g = fit_gmm_em(x2, 4, seed=0)
    monotone = bool(np.all(np.diff(g.log_likelihood_trace) >= -1e-12))
    masses = []
    for method, param in (("gaussian", None), ("gmm", 3), ("kde", 0.3)):
        m2 = fit_baseline(method, x2, param)
        masses.append(riemann_2d(lambda p: baseline_logpdf(m2, p), -10.0, 10.0, n=300))
        m1 = fit_baseline(method, x1, param)
        masses.append(riemann_1d(lambda p: baseline_logpdf(m1, p), -12.0, 12.0))
    mass_err = max(abs(v - 1.0) for v in masses)
    q = rng.normal(size=(100, 2)) * 3
    k1 = float(np.max(np.abs(gmm_logpdf(fit_gmm_em(x2, 1), q) - gaussian_logpdf(fit_gaussian(x2), q))))
    verdict(10, "baseline sanity", monotone and mass_err < 0.02 and k1 < 1e-10,
            f"EM monotone={monotone}, max |mass-1|={mass_err:.4f}, K=1 vs Gaussian {k1:.1e}")


def test_c11_loss_vs_noise_curve(gmm2_benchmark):
    s = LinearSchedule()
    x = np.random.default_rng(11).normal(size=(4000, 2))
    c = loss_vs_noise(StandardNormalOracle(s, 2), {"ind": x}, s, repeats=4, seed=0)
    z = np.abs(c.mean["ind"] - 2 * s.point(c.t_grid).alpha2) / c.stderr("ind")
    b = gmm2_benchmark
    sets = {"test": b.extra["test"].features, "ood": b.extra["ood"].features}
    g = loss_vs_noise(b.model, sets, b.schedule, t_grid=[1.0], repeats=20, seed=0)
    ind_l, ood_l = float(g.mean["test"][0]), float(g.mean["ood"][0])
    verdict(11, "loss-vs-noise curve", bool(np.all(z < 3)) and ood_l > ind_l,
            f"oracle max deviation {z.max():.2f} s.e. over {z.size} t values, t=1 loss OOD {ood_l:.4f} > InD {ind_l:.4f}")


def test_c12_conditional_consistency(cfg_drop_one_model, gmm2_benchmark):
    m = cfg_drop_one_model
    z = m.extra["data"].features[:40]
    identical = True
    for c in (0, 1):
        cond = FlowConfig(steps=10, conditioning=ConditioningContext(c))
        el_c, pl_c, _ = flow_scores(m.model, z, cond, m.schedule)
        el_u, pl_u, _ = flow_scores(m.model, z, FlowConfig(steps=10), m.schedule)
        identical &= el_c.values.tobytes() == el_u.values.tobytes() and pl_c.values.tobytes() == pl_u.values.tobytes()
    b = gmm2_benchmark
    res = score_tkdl(b.model, b.extra["test"], b.extra["test_logits"], b.schedule, k=2)
    acc = float(np.mean(res.argmax_class == b.extra["test"].labels))
    verdict(12, "conditional/unconditional consistency", identical and acc > 0.9,
            f"cfg_drop=1 EL/PL bit-identical={identical}, TKDL argmax accuracy {acc:.3f}")


def _pipeline(root):
    root.mkdir()
    argv = [
        ["synth", "--kind", "gmm2", "--n", "300", "--out", root / "train.fvec"],
        ["synth", "--kind", "gmm2", "--n", "80", "--seed", "8", "--out", root / "test.fvec"],
        ["synth", "--kind", "uniform-box", "--n", "80", "--out", root / "box.fvec"],
        ["train", "--data", root / "train.fvec", "--out", root / "m.vdmc", "--epochs", "4", "--hidden", "16,16",
         "--fourier", "none", "--lr", "1e-3"],
        ["score", "--model", root / "m.vdmc", "--data", root / "test.fvec", "--steps", "6", "--out", root / "el_test.csv"],
        ["score", "--model", root / "m.vdmc", "--data", root / "box.fvec", "--steps", "6", "--out", root / "box.csv"],
        ["eval", "--ind-scores", root / "el_test.csv", "--ood-scores", root / "box.csv", "--out", root / "report.json"],
    ]
    codes = [main([str(a) for a in args] + ["--seed", "13"]) for args in argv]
    return codes, (root / "report.json").read_bytes() if (root / "report.json").exists() else b""


def test_c13_end_to_end_determinism(tmp_path):
    c1, r1 = _pipeline(tmp_path / "run1")
    c2, r2 = _pipeline(tmp_path / "run2")
    ok = c1 == c2 == [0] * 7 and r1 == r2 and len(r1) > 0
    verdict(13, "end-to-end determinism", ok, f"exit codes {c1}, reports byte-identical={r1 == r2}, {len(r1)} bytes")
