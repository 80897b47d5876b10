"""OOD evaluation: AUROC, FPR@95, average ranks and the JSON/CSV report.

All scores follow one orientation: higher means more OOD.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

REPORT_SCHEMA = 1
HIST_BINS = 64


def _check(ind, ood):
    ind = np.asarray(ind, dtype=float).ravel()
    ood = np.asarray(ood, dtype=float).ravel()
    if ind.size == 0 or ood.size == 0:
        raise ValueError("both score vectors must be nonempty")
    return ind, ood


def auroc(ind_scores, ood_scores) -> float:
    """P(ood > ind) + 1/2 P(ood == ind), with OOD as the positive class."""
    ind, ood = _check(ind_scores, ood_scores)
    ranks = rankdata(np.concatenate([ind, ood]))
    n_o = ood.size
    u = ranks[ind.size :].sum() - n_o * (n_o + 1) / 2.0
    return float(u / (n_o * ind.size))


def fpr_at_95_tpr(ind_scores, ood_scores, tpr: float = 0.95) -> float:
    """Fraction of OOD samples accepted as InD at the 95%-InD-acceptance cutoff.

    A sample is called InD when its score is <= the cutoff; the cutoff is the
    smallest InD score that accepts at least ``ceil(tpr * n_ind)`` InD samples.
    """
    ind, ood = _check(ind_scores, ood_scores)
    k = max(1, math.ceil(tpr * ind.size - 1e-9))
    cutoff = np.sort(ind)[k - 1]
    return float(np.mean(ood <= cutoff))


def average_rank(table, higher_is_better: bool = True) -> np.ndarray:
    """Mean fractional rank per method (rows) across datasets (columns); 1 is best."""
    t = np.asarray(table, dtype=float)
    if t.ndim != 2 or t.size == 0:
        raise ValueError("table must be a nonempty methods x datasets matrix")
    if not np.all(np.isfinite(t)):
        raise ValueError("table has missing cells")
    keyed = -t if higher_is_better else t
    ranks = np.apply_along_axis(rankdata, 0, keyed)
    return ranks.mean(axis=1)


# ---------------------------------------------------------------------------
# report


@dataclass
class MethodScores:
    test: np.ndarray
    ood: dict[str, np.ndarray] = field(default_factory=dict)
    train: Optional[np.ndarray] = None


def histogram(vectors: Mapping[str, np.ndarray], bins: int = HIST_BINS):
    """Shared-edge histograms over the pooled min..max of all vectors."""
    pooled = np.concatenate([np.asarray(v, dtype=float).ravel() for v in vectors.values()])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    counts = {k: np.histogram(np.asarray(v, dtype=float).ravel(), bins=edges)[0] for k, v in vectors.items()}
    return edges, counts


def _mean(xs):
    return float(np.mean(xs)) if xs else float("nan")


def build_report(
    runs: Mapping[str, MethodScores],
    groups: Optional[Mapping[str, Sequence[str]]] = None,
    out_dir=None,
    report_name: str = "report.json",
    bins: int = HIST_BINS,
) -> dict:
    """Compute per-(method, OOD set) metrics, group means, average ranks and histograms.

    When ``out_dir`` is given the JSON report and one histogram CSV per
    method are written there; the returned dict is the report content.
    """
    methods = sorted(runs)
    report: dict = {"schema": REPORT_SCHEMA, "methods": {}, "average_rank": {}, "histograms": {}}
    ood_names: list[str] = sorted({name for m in methods for name in runs[m].ood})
    for m in methods:
        r = runs[m]
        cells = {}
        for name in sorted(r.ood):
            cells[name] = {"auroc": auroc(r.test, r.ood[name]), "fpr95": fpr_at_95_tpr(r.test, r.ood[name])}
        grp = {}
        for gname, members in sorted((groups or {}).items()):
            present = [cells[x] for x in members if x in cells]
            grp[gname] = {
                "auroc": _mean([c["auroc"] for c in present]),
                "fpr95": _mean([c["fpr95"] for c in present]),
            }
        report["methods"][m] = {"datasets": cells, "groups": grp, "n_test": int(np.size(r.test))}

    complete = [n for n in ood_names if all(n in runs[m].ood for m in methods)]
    if methods and complete:
        au = [[report["methods"][m]["datasets"][n]["auroc"] for n in complete] for m in methods]
        fp = [[report["methods"][m]["datasets"][n]["fpr95"] for n in complete] for m in methods]
        r_au = average_rank(au, higher_is_better=True)
        r_fp = average_rank(fp, higher_is_better=False)
        report["average_rank"] = {
            "auroc": dict(zip(methods, map(float, r_au))),
            "fpr95": dict(zip(methods, map(float, r_fp))),
            "combined": dict(zip(methods, map(float, (r_au + r_fp) / 2.0))),
        }

    hist_tables = {}
    for m in methods:
        r = runs[m]
        vecs = {}
        if r.train is not None:
            vecs["train"] = r.train
        vecs["test"] = r.test
        for name in sorted(r.ood):
            vecs[f"ood:{name}"] = r.ood[name]
        edges, counts = histogram(vecs, bins)
        hist_tables[m] = (edges, counts)
        report["histograms"][m] = f"hist_{_slug(m)}.csv"

    if out_dir is not None:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            for m, (edges, counts) in hist_tables.items():
                write_histogram_csv(out / report["histograms"][m], edges, counts)
            (out / report_name).write_text(dumps_report(report))
        except OSError as exc:
            raise OSError(f"writing report to {out}: {exc}") from exc
    return report


def dumps_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_histogram_csv(path, edges: np.ndarray, counts: Mapping[str, np.ndarray]) -> None:
    names = list(counts)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", *names])
        for i in range(len(edges) - 1):
            w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), *(int(counts[k][i]) for k in names)])


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)
