"""Machine-readable report files: metrics, popularity-decile exposure and work counts.

Floats are written with ``repr`` so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .costs import CostCounters, StageCost
from .dataset import PopularityTable, SampleSet
from .fairness import METRIC_COLUMNS, EvalReport
from .recmodel import ModelState, rank_topk_batch

DECILES = 10


def _num(x):
    return repr(float(x))


def write_metrics_csv(reports: dict, path):
    """``reports`` maps a stage label (``backbone``, ``debiased``...) to an EvalReport."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "K", *METRIC_COLUMNS])
        for stage, report in reports.items():
            for K in report.Ks:
                w.writerow([stage, K, *(_num(report[K][m]) for m in METRIC_COLUMNS)])


def read_metrics_csv(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rep = out.setdefault(row["stage"], EvalReport())
            rep.rows[int(row["K"])] = {m: float(row[m]) for m in METRIC_COLUMNS}
    return out


# -- popularity deciles ----------------------------------------------------

def popularity_deciles(pop: PopularityTable):
    """Item indices split into 10 buckets, most popular first (ties by index)."""
    order = np.lexsort((np.arange(len(pop.count)), -pop.count))
    return np.array_split(order, DECILES)


def decile_report(model: ModelState, test: SampleSet, pop: PopularityTable, K,
                  exclude_history=False):
    """Per decile: item count, share of top-K slots, share of test targets."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    lists = rank_topk_batch(model, test, K, exclude_history)
    slots = lists[lists >= 0]
    slot_counts = np.bincount(slots, minlength=len(pop.count))
    target_counts = np.bincount(test.target, minlength=len(pop.count))
    rows = []
    for d, items in enumerate(popularity_deciles(pop)):
        rows.append((d + 1, len(items), slot_counts[items].sum() / max(len(slots), 1),
                     target_counts[items].sum() / len(test)))
    return rows


def write_decile_csv(tables: dict, K, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "K", "decile", "n_items", "rec_share", "target_share"])
        for stage, rows in tables.items():
            for decile, n_items, rec, tgt in rows:
                w.writerow([stage, K, decile, n_items, _num(rec), _num(tgt)])


# -- cost accounting -------------------------------------------------------

@dataclass(frozen=True)
class CostSummary:
    identify_x: int
    unlearn_x: int
    c_max: float
    c_lsq: float
    identify_violation: bool
    unlearn_violation: bool


def fit_cost_constant(measured, x):
    """Smallest ``c`` with ``measured <= c * x`` everywhere, and the least-squares slope."""
    measured = np.asarray(measured, dtype=float)
    x = np.asarray(x, dtype=float)
    keep = x > 0
    if not np.any(keep):
        return 0.0, 0.0
    m, x = measured[keep], x[keep]
    return float(np.max(m / x)), float(m @ x / (x @ x))


def cost_report(counters: CostCounters) -> CostSummary:
    ident_x = counters.n_c + counters.identify.cg_iters
    unl_x = counters.n_u + counters.unlearn.cg_iters
    measured = [counters.identify.grad_evals, counters.unlearn.grad_evals]
    c_max, c_lsq = fit_cost_constant(measured, [ident_x, unl_x])

    def over(value, x):
        return bool(value > 1.1 * c_lsq * x)
    return CostSummary(ident_x, unl_x, c_max, c_lsq,
                       over(measured[0], ident_x), over(measured[1], unl_x))


def write_cost_json(counters: CostCounters, path):
    summary = cost_report(counters)
    doc = counters.to_dict()
    doc["grad_evals"] = counters.grad_evals
    doc["cg_iters_total"] = counters.cg_iters_total
    doc["bounds"] = {
        "identify_x": summary.identify_x,
        "unlearn_x": summary.unlearn_x,
        "c_max": summary.c_max,
        "c_lsq": summary.c_lsq,
        "identify_bound": summary.c_lsq * summary.identify_x,
        "unlearn_bound": summary.c_lsq * summary.unlearn_x,
        "identify_violation": summary.identify_violation,
        "unlearn_violation": summary.unlearn_violation,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def read_cost_json(path) -> CostCounters:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return CostCounters(StageCost(**doc["identify"]), StageCost(**doc["unlearn"]),
                        doc["n_c"], doc["n_u"], doc["n"], doc["E"])
