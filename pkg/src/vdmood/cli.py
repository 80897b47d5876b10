"""Command-line entry point: ``vdmood <subcommand> [options]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
A ``--config run.json`` file supplies defaults for the chosen subcommand;
flags given on the command line win. The environment variable
``VDMOOD_SEED`` sets the default seed.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import baselines as bl
from . import data as dmod
from . import theory
from .denoiser import ConditioningContext, DenoiserConfig, DenoiserModel, load_checkpoint, save_checkpoint
from .diagnostics import loss_vs_noise
from .flow import FlowConfig, FlowError
from .metrics import MethodScores, build_report
from .schedule import make_schedule
from .scores import flow_scores, score_tkdl
from .train import TrainConfig, TrainingError, train

log = logging.getLogger("vdmood")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "VDMOOD_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    p = _Parser(prog="vdmood", description="Diffusion-model likelihoods for OOD detection on feature vectors.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file with defaults for this subcommand")
        sp.add_argument("--seed", type=int)
        return sp

    sp = cmd("synth", "draw a synthetic dataset")
    sp.add_argument("--kind", choices=dmod.SYNTH_KINDS, default="gmm2")
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--d", type=int, default=2)
    sp.add_argument("--separation", type=float, default=8.0)
    sp.add_argument("--component-std", type=float, default=1.0)
    sp.add_argument("--noise", type=float, default=0.1)
    sp.add_argument("--low", type=float, default=-12.0)
    sp.add_argument("--high", type=float, default=12.0)
    sp.add_argument("--logits-out", help="also write Bayes-optimal gmm2 class logits")
    sp.add_argument("--out")

    sp = cmd("ingest", "validate a feature file and convert it (FVEC or CSV by extension)")
    sp.add_argument("--data")
    sp.add_argument("--out")

    sp = cmd("train", "train the diffusion model on a feature file")
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.add_argument("--epochs", type=int, default=2000)
    sp.add_argument("--batch-size", type=int, default=128)
    sp.add_argument("--lr", type=float, default=2e-4)
    sp.add_argument("--weight-decay", type=float, default=0.01)
    sp.add_argument("--patience", type=int, default=100, help="plateau epochs before the lr is reduced")
    sp.add_argument("--plateau-factor", type=float, default=0.9)
    sp.add_argument("--schedule", choices=("linear", "learned"), default="linear")
    sp.add_argument("--gamma-min", type=float, default=-13.3)
    sp.add_argument("--gamma-max", type=float, default=5.0)
    sp.add_argument("--cfg-drop", type=float, default=0.1)
    sp.add_argument("--conditional", action="store_true", default=False, help="use labels for class conditioning")
    sp.add_argument("--hidden", type=_int_list, default=(256, 128, 64, 128, 256))
    sp.add_argument("--fourier", default="7", help="Fourier feature count n, or 'none'")
    sp.add_argument("--history", help="loss history CSV (default: <out>.history.csv)")

    sp = cmd("score", "score samples with EL, PL or TKDL")
    sp.add_argument("--model")
    sp.add_argument("--data")
    sp.add_argument("--method", choices=("el", "pl", "tkdl"), default="el")
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--probes", type=int, default=1)
    sp.add_argument("--probe-kind", choices=("rademacher", "gaussian"), default="rademacher")
    sp.add_argument("--cond", default="none", help="class id or 'none'")
    sp.add_argument("--logits")
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--repeats", type=int, default=20)
    sp.add_argument("--out")

    sp = cmd("baseline", "fit a density baseline on training features and score a file")
    sp.add_argument("--train")
    sp.add_argument("--data")
    sp.add_argument("--method", choices=("gaussian", "gmm", "kde"), default="gaussian")
    sp.add_argument("--components", type=int, default=20)
    sp.add_argument("--bandwidth", type=float, default=0.5)
    sp.add_argument("--tune", action="store_true", default=False)
    sp.add_argument("--grid", type=_float_list, help="tuning grid (default: components 1..50 / bandwidths)")
    sp.add_argument("--fit-size", type=int, default=10000)
    sp.add_argument("--out")

    sp = cmd("eval", "compute AUROC/FPR@95, average ranks and histograms")
    sp.add_argument("--ind-scores")
    sp.add_argument("--ood-scores", nargs="+", default=[])
    sp.add_argument("--train-scores")
    sp.add_argument("--method", help="method label (default: stem of --ind-scores)")
    sp.add_argument("--run", nargs="+", action="append", default=[], metavar="ITEM",
                    help="METHOD IND_CSV OOD_CSV... (repeatable, for multi-method reports)")
    sp.add_argument("--groups", help='JSON object {"group": ["ood name", ...]}')
    sp.add_argument("--out")

    sp = cmd("curve", "diffusion loss versus noise level")
    sp.add_argument("--model")
    sp.add_argument("--data", nargs="+", default=[], help="NAME=FILE items")
    sp.add_argument("--t-grid", type=_float_list)
    sp.add_argument("--repeats", type=int, default=4)
    sp.add_argument("--out")

    sp = cmd("demo-transform", "density under a monotone piecewise-linear map")
    sp.add_argument("--x-min", type=float, default=-1.0)
    sp.add_argument("--x-max", type=float, default=4.0)
    sp.add_argument("--points", type=int, default=501)
    sp.add_argument("--out")

    sp = cmd("demo-optimality", "density vs likelihood-ratio AUC under mixture OOD")
    sp.add_argument("--n", type=int, default=10000)
    sp.add_argument("--ood", choices=("uniform", "ridge"), default="uniform")
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.add_argument("--out")
    return p


REQUIRED = {
    "synth": ("out",),
    "ingest": ("data",),
    "train": ("data", "out"),
    "score": ("model", "data", "out"),
    "baseline": ("train", "data", "out"),
    "eval": ("out",),
    "curve": ("model", "out"),
    "demo-transform": ("out",),
    "demo-optimality": ("out",),
}


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    if not argv:
        raise UsageError(parser.format_usage().strip())
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_usage().strip())
    if args.config:
        sp = _subparser(parser, args.command)
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
        known = {a.dest for a in sp._actions} - {"help", "config"}
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        for key in ("hidden",):
            if key in cfg and isinstance(cfg[key], list):
                cfg[key] = tuple(cfg[key])
        sp.set_defaults(**cfg)
        args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = _default_seed()
    missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) in (None, "")]
    if args.command == "eval" and not args.run and not args.ind_scores:
        missing.append("ind_scores or run")
    if missing:
        raise UsageError(f"{args.command}: missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return args


# ---------------------------------------------------------------------------
# helpers


def write_scores_csv(path, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "score"])
        for i, v in enumerate(np.asarray(values, dtype=float)):
            w.writerow([i, repr(float(v))])


def read_scores_csv(path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise dmod.DataError(f"cannot read scores {path}: {exc}") from None
    if not rows or rows[0] != ["sample_id", "score"]:
        raise dmod.DataError(f"{path}: expected header sample_id,score")
    try:
        vals = np.array([float(r[1]) for r in rows[1:]])
    except (IndexError, ValueError) as exc:
        raise dmod.DataError(f"{path}: bad score row ({exc})") from None
    if vals.size == 0 or not np.all(np.isfinite(vals)):
        raise dmod.DataError(f"{path}: empty or non-finite scores")
    return vals


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "diffusion_loss", "prior_kl", "lr"])
        for r in history:
            w.writerow([r.epoch, repr(r.diffusion_loss), repr(r.prior_kl), repr(r.lr)])


def _load_model(path):
    try:
        model, schedule, extra = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise dmod.DataError(f"cannot read checkpoint {path}: {exc}") from None
    stats = dmod.NormStats.from_dict(extra["norm_stats"]) if "norm_stats" in extra else None
    return model, schedule, stats


def _normalized(path, stats):
    ds = dmod.ingest(path)
    if stats is None:
        return ds
    return dmod.normalize(ds, stats=stats)[0]


def _stem(path) -> str:
    return Path(path).stem


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(a) -> None:
    params = dmod.SynthParams(a.separation, a.component_std, a.noise, a.low, a.high)
    ds = dmod.synth(a.kind, a.n, a.d, a.seed, params)
    dmod.save(a.out, ds)
    if a.logits_out:
        if a.kind != "gmm2":
            raise UsageError("--logits-out is only available for gmm2")
        dmod.save(a.logits_out, dmod.FeatureDataset(dmod.gmm2_class_logits(ds.features, params)))


def cmd_ingest(a) -> None:
    ds = dmod.ingest(a.data)
    print(json.dumps({"n": ds.n, "d": ds.d, "labels": ds.labels is not None}))
    if a.out:
        dmod.save(a.out, ds)


def cmd_train(a) -> None:
    raw = dmod.ingest(a.data)
    ds, _, stats = dmod.normalize(raw)
    fourier = None if str(a.fourier).lower() == "none" else int(a.fourier)
    n_cls = 0
    if a.conditional:
        if ds.labels is None:
            raise dmod.DataError("--conditional needs a labelled training file")
        n_cls = int(ds.labels.max()) + 1
    mcfg = DenoiserConfig(input_dim=ds.d, num_classes=n_cls, hidden_dims=tuple(a.hidden), fourier_n=fourier,
                          seed=a.seed)
    tcfg = TrainConfig(epochs=a.epochs, batch_size=a.batch_size, learning_rate=a.lr, weight_decay=a.weight_decay,
                       plateau_patience=a.patience, plateau_factor=a.plateau_factor, cfg_drop_prob=a.cfg_drop,
                       seed=a.seed)
    schedule = make_schedule(a.schedule, a.gamma_min, a.gamma_max, seed=a.seed)
    data = (ds.features, ds.labels if a.conditional else None)
    result = train(tcfg, data, schedule, model=DenoiserModel(mcfg))
    extra = {"norm_stats": stats.to_dict(), "epochs": a.epochs, "seed": a.seed}
    save_checkpoint(a.out, result.model, result.schedule, extra)
    write_history_csv(a.history or f"{a.out}.history.csv", result.history)


def _conditioning(text) -> ConditioningContext:
    if text is None or str(text).lower() == "none":
        return ConditioningContext()
    try:
        return ConditioningContext(int(text))
    except ValueError:
        raise UsageError(f"--cond must be a class id or 'none', got {text!r}") from None


def cmd_score(a) -> None:
    model, schedule, stats = _load_model(a.model)
    ds = _normalized(a.data, stats)
    if a.method in ("el", "pl"):
        cfg = FlowConfig(steps=a.steps, probe_count=a.probes, probe_kind=a.probe_kind,
                         conditioning=_conditioning(a.cond), seed=a.seed)
        el, pl, _ = flow_scores(model, ds, cfg, schedule)
        values = el.values if a.method == "el" else pl.values
    else:
        if not a.logits:
            raise UsageError("--method tkdl requires --logits")
        logits = dmod.ingest(a.logits).features
        if logits.shape[0] != ds.n:
            raise dmod.DataError(f"{logits.shape[0]} logit rows for {ds.n} samples")
        if logits.shape[1] != model.config.num_classes:
            raise dmod.DataError(f"logits have {logits.shape[1]} classes, model has {model.config.num_classes}")
        values = score_tkdl(model, ds, logits, schedule, k=a.k, repeats=a.repeats, seed=a.seed).scores.values
    write_scores_csv(a.out, values)


def cmd_baseline(a) -> None:
    train_ds, (test_ds,), _ = dmod.normalize(dmod.ingest(a.train), dmod.ingest(a.data))
    param = a.components if a.method == "gmm" else a.bandwidth
    if a.tune and a.method != "gaussian":
        grid = a.grid or (list(range(1, 51)) if a.method == "gmm" else [0.05, 0.1, 0.2, 0.5, 1.0])
        if a.method == "gmm":
            grid = [int(g) for g in grid]
        param = bl.tune_hyperparams(a.method, train_ds.features, grid, fit_size=a.fit_size, seed=a.seed).best
        log.info("tuned %s parameter: %s", a.method, param)
    model = bl.fit_baseline(a.method, train_ds.features, param, seed=a.seed)
    write_scores_csv(a.out, -bl.baseline_logpdf(model, test_ds.features))


def cmd_eval(a) -> None:
    runs = {}
    if a.ind_scores:
        method = a.method or _stem(a.ind_scores)
        runs[method] = MethodScores(
            test=read_scores_csv(a.ind_scores),
            ood={_stem(p): read_scores_csv(p) for p in a.ood_scores},
            train=read_scores_csv(a.train_scores) if a.train_scores else None,
        )
    for item in a.run:
        if len(item) < 2:
            raise UsageError("--run needs METHOD IND_CSV [OOD_CSV...]")
        runs[item[0]] = MethodScores(test=read_scores_csv(item[1]), ood={_stem(p): read_scores_csv(p) for p in item[2:]})
    groups = None
    if a.groups:
        try:
            groups = json.loads(Path(a.groups).read_text()) if Path(a.groups).exists() else json.loads(a.groups)
        except json.JSONDecodeError as exc:
            raise UsageError(f"--groups is not valid JSON: {exc}") from None
    out = Path(a.out)
    build_report(runs, groups, out_dir=out.parent if str(out.parent) else ".", report_name=out.name)


def cmd_curve(a) -> None:
    model, schedule, stats = _load_model(a.model)
    sets = {}
    for item in a.data:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = _stem(item), item
        sets[name] = _normalized(path, stats).features
    if not sets:
        raise UsageError("curve: give at least one --data NAME=FILE")
    curve = loss_vs_noise(model, sets, schedule, a.t_grid, repeats=a.repeats, seed=a.seed)
    curve.write_csv(a.out)


def cmd_demo_transform(a) -> None:
    p, transform = theory.figure1_example()
    xs = np.linspace(a.x_min, a.x_max, a.points)
    with open(a.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "p_X", "p_Y"])
        for x, px, py in zip(xs, p(xs), theory.transformed_density(p, transform, xs)):
            w.writerow([repr(float(x)), repr(float(px)), repr(float(py))])


def cmd_demo_optimality(a) -> None:
    setup = theory.default_uniform_setup(a.alpha) if a.ood == "uniform" else theory.default_ridge_setup(a.alpha)
    res = theory.optimality_experiment(setup, a.n, a.seed)
    Path(a.out).write_text(json.dumps(res.to_dict(), sort_keys=True, indent=2) + "\n")


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "score": cmd_score,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "curve": cmd_curve,
    "demo-transform": cmd_demo_transform,
    "demo-optimality": cmd_demo_optimality,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (dmod.DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FlowError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
