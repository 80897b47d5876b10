import csv
import json

import numpy as np
import pytest

from vdmood import data as dmod
from vdmood.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main, read_scores_csv

FAST_TRAIN = ["--epochs", "3", "--hidden", "8,8", "--fourier", "none", "--lr", "1e-3"]


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(root, seed=5):
    root.mkdir(parents=True, exist_ok=True)
    assert run("synth", "--kind", "gmm2", "--n", 200, "--seed", seed, "--out", root / "train.fvec") == EXIT_OK
    assert run("synth", "--kind", "gmm2", "--n", 60, "--seed", seed + 1, "--out", root / "test.fvec") == EXIT_OK
    assert run("synth", "--kind", "uniform-box", "--n", 60, "--seed", seed, "--out", root / "box.fvec") == EXIT_OK
    assert run("train", "--data", root / "train.fvec", "--out", root / "m.vdmc", "--seed", seed, *FAST_TRAIN) == EXIT_OK
    for name in ("test", "box"):
        rc = run("score", "--model", root / "m.vdmc", "--data", root / f"{name}.fvec", "--steps", 4,
                 "--seed", seed, "--out", root / f"{name}.csv")
        assert rc == EXIT_OK
    rc = run("eval", "--ind-scores", root / "test.csv", "--ood-scores", root / "box.csv", "--method", "EL",
             "--out", root / "report.json")
    assert rc == EXIT_OK
    return (root / "report.json").read_bytes()


def test_no_args_is_usage_error(capsys):
    assert main([]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_missing_required_and_bad_choice():
    assert run("train", "--data", "x.fvec") == EXIT_USAGE
    assert run("synth", "--kind", "spiral", "--out", "x") == EXIT_USAGE
    assert run("bogus") == EXIT_USAGE


def test_full_pipeline_is_deterministic(tmp_path):
    a = pipeline(tmp_path / "a")
    b = pipeline(tmp_path / "b")
    assert a == b
    rep = json.loads(a)
    assert 0.0 <= rep["methods"]["EL"]["datasets"]["box"]["auroc"] <= 1.0
    assert (tmp_path / "a" / "hist_EL.csv").exists()
    hist = (tmp_path / "a" / "m.vdmc.history.csv").read_text().splitlines()
    assert hist[0] == "epoch,diffusion_loss,prior_kl,lr" and len(hist) == 4


def test_config_file_merges_and_flags_win(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"kind": "uniform-box", "n": 7, "low": 0.0, "high": 1.0}))
    assert run("synth", "--config", cfg, "--out", tmp_path / "a.csv") == EXIT_OK
    ds = dmod.ingest(tmp_path / "a.csv")
    assert ds.n == 7 and ds.features.min() >= 0.0 and ds.features.max() <= 1.0
    assert run("synth", "--config", cfg, "--n", 3, "--out", tmp_path / "b.csv") == EXIT_OK
    assert dmod.ingest(tmp_path / "b.csv").n == 3
    cfg.write_text(json.dumps({"colour": "blue"}))
    assert run("synth", "--config", cfg, "--out", tmp_path / "c.csv") == EXIT_USAGE


def test_env_seed_default(tmp_path, monkeypatch):
    monkeypatch.setenv("VDMOOD_SEED", "11")
    run("synth", "--n", 5, "--out", tmp_path / "env.fvec")
    run("synth", "--n", 5, "--seed", 11, "--out", tmp_path / "flag.fvec")
    run("synth", "--n", 5, "--seed", 12, "--out", tmp_path / "other.fvec")
    assert (tmp_path / "env.fvec").read_bytes() == (tmp_path / "flag.fvec").read_bytes()
    assert (tmp_path / "env.fvec").read_bytes() != (tmp_path / "other.fvec").read_bytes()
    monkeypatch.setenv("VDMOOD_SEED", "abc")
    assert run("synth", "--n", 5, "--out", tmp_path / "x.fvec") == EXIT_USAGE


def test_data_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("f0,f1\n1,2\n3\n")
    assert run("ingest", "--data", bad) == EXIT_DATA
    assert run("ingest", "--data", tmp_path / "nope.csv") == EXIT_DATA
    ck = tmp_path / "bad.vdmc"
    ck.write_bytes(b"JUNKJUNK")
    run("synth", "--n", 5, "--out", tmp_path / "x.fvec")
    assert run("score", "--model", ck, "--data", tmp_path / "x.fvec", "--out", tmp_path / "s.csv") == EXIT_DATA


def test_ingest_converts(tmp_path, capsys):
    run("synth", "--n", 4, "--out", tmp_path / "x.fvec")
    assert run("ingest", "--data", tmp_path / "x.fvec", "--out", tmp_path / "x.csv") == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert info == {"n": 4, "d": 2, "labels": True}
    assert dmod.ingest(tmp_path / "x.csv") == dmod.ingest(tmp_path / "x.fvec")


def test_tkdl_and_conditional_training(tmp_path):
    assert run("synth", "--n", 80, "--out", tmp_path / "tr.fvec", "--logits-out", tmp_path / "tr_logits.csv") == 0
    assert run("train", "--data", tmp_path / "tr.fvec", "--out", tmp_path / "c.vdmc", "--conditional",
               *FAST_TRAIN) == EXIT_OK
    rc = run("score", "--model", tmp_path / "c.vdmc", "--data", tmp_path / "tr.fvec", "--method", "tkdl",
             "--logits", tmp_path / "tr_logits.csv", "--k", 2, "--repeats", 3, "--out", tmp_path / "t.csv")
    assert rc == EXIT_OK
    vals = read_scores_csv(tmp_path / "t.csv")
    assert vals.size == 80 and np.all((vals >= 0.0) & (vals <= 0.5))
    rc = run("score", "--model", tmp_path / "c.vdmc", "--data", tmp_path / "tr.fvec", "--method", "tkdl",
             "--out", tmp_path / "t2.csv")
    assert rc == EXIT_USAGE
    rc = run("score", "--model", tmp_path / "c.vdmc", "--data", tmp_path / "tr.fvec", "--method", "pl",
             "--cond", "1", "--steps", 3, "--out", tmp_path / "p.csv")
    assert rc == EXIT_OK


@pytest.mark.parametrize("method,extra", [("gaussian", []), ("gmm", ["--components", "2"]), ("kde", ["--bandwidth", "0.3"])])
def test_baseline_subcommand(tmp_path, method, extra):
    run("synth", "--n", 100, "--out", tmp_path / "tr.fvec")
    run("synth", "--kind", "uniform-box", "--n", 20, "--out", tmp_path / "box.fvec")
    rc = run("baseline", "--train", tmp_path / "tr.fvec", "--data", tmp_path / "box.fvec", "--method", method,
             *extra, "--out", tmp_path / "b.csv")
    assert rc == EXIT_OK
    assert read_scores_csv(tmp_path / "b.csv").size == 20


def test_baseline_tuning(tmp_path):
    run("synth", "--n", 150, "--out", tmp_path / "tr.fvec")
    rc = run("baseline", "--train", tmp_path / "tr.fvec", "--data", tmp_path / "tr.fvec", "--method", "gmm",
             "--tune", "--grid", "1,2,3", "--fit-size", 100, "--out", tmp_path / "b.csv")
    assert rc == EXIT_OK


def test_multi_method_eval(tmp_path):
    rng = np.random.default_rng(0)
    for name, loc in (("a_ind", 0), ("a_far", 3), ("b_ind", 0), ("b_far", 1)):
        with open(tmp_path / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "score"])
            for i, v in enumerate(rng.normal(loc, size=30)):
                w.writerow([i, v])
    groups = json.dumps({"all": ["a_far", "b_far"]})
    rc = run("eval", "--run", "A", tmp_path / "a_ind.csv", tmp_path / "a_far.csv",
             "--run", "B", tmp_path / "b_ind.csv", tmp_path / "b_far.csv", "--groups", groups,
             "--out", tmp_path / "r.json")
    assert rc == EXIT_OK
    rep = json.loads((tmp_path / "r.json").read_text())
    assert set(rep["methods"]) == {"A", "B"}
    assert rc == 0 and run("eval", "--ind-scores", tmp_path / "missing.csv", "--out", tmp_path / "x.json") == EXIT_DATA


def test_curve_and_demos(tmp_path):
    run("synth", "--kind", "gaussian", "--n", 50, "--out", tmp_path / "g.fvec")
    run("train", "--data", tmp_path / "g.fvec", "--out", tmp_path / "g.vdmc", *FAST_TRAIN)
    rc = run("curve", "--model", tmp_path / "g.vdmc", "--data", f"ind={tmp_path / 'g.fvec'}", "--t-grid", "0.5,1.0",
             "--out", tmp_path / "curve.csv")
    assert rc == EXIT_OK
    assert (tmp_path / "curve.csv").read_text().splitlines()[0] == "t,dataset,mean,var"
    assert run("demo-transform", "--out", tmp_path / "tr.csv") == EXIT_OK
    rows = list(csv.reader(open(tmp_path / "tr.csv")))
    assert rows[0] == ["x", "p_X", "p_Y"] and len(rows) == 502
    assert run("demo-optimality", "--n", 500, "--out", tmp_path / "opt.json") == EXIT_OK
    res = json.loads((tmp_path / "opt.json").read_text())
    assert res["auc_density"] == res["auc_ratio"]
