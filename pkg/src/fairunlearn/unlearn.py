"""One-step influence unlearning and the exact-retraining oracle it is checked against.

Removing a set ``U`` from ``n`` training samples is a down-weighting by
``-1/n`` per sample; a first-order expansion around the trained optimum gives

    delta = (1/n) (H + damping I)^-1 sum_{k in U} grad L(z_k)

with ``H`` the mean Hessian of the full training risk at the original
parameters.  The step is exact when the risk is a shared quadratic plus
linear per-sample terms.  When each sample also carries curvature (as the L2
term here does) it undershoots the remain-set optimum by about ``|U|/n``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .costs import StageCost
from .dataset import SampleSet
from .errors import DegenerateRemainError
from .fairness import METRIC_COLUMNS, evaluate
from .influence import CGConfig, CGResult, solve_damped_cg, train_hvp
from .recmodel import (ModelState, TrainConfig, fit_adapter, init_model, mean_loss_and_grad,
                       per_sample_losses_and_grads)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UnlearnResult:
    delta: np.ndarray
    updated_model: ModelState
    n: int
    unlearn_ids: np.ndarray
    cg: CGResult
    damping: float
    grad_norm_at_call: float = float("nan")


def influence_delta(grad_sum, hvp_oracle, n, cfg: CGConfig = CGConfig(),
                    cost: StageCost | None = None) -> CGResult:
    """Solve for ``(1/n) (H + damping I)^-1 grad_sum`` with any Hessian oracle.

    Returned ``x`` is already scaled by ``1/n``.
    """
    res = solve_damped_cg(hvp_oracle, grad_sum, cfg, cost)
    return CGResult(res.x / n, res.iters, res.residual)


def _check_ids(train: SampleSet, unlearn_ids):
    ids = np.unique(np.asarray(unlearn_ids, dtype=np.int64))
    if not np.all(np.isin(ids, train.sample_id)):
        raise ValueError("unlearn ids must be training sample ids")
    if len(ids) and len(ids) >= len(train):
        raise DegenerateRemainError("unlearning every training sample leaves nothing to keep")
    return ids


def compute_delta(model: ModelState, train: SampleSet, unlearn_ids, cfg: CGConfig = CGConfig(),
                  threads=1, cost: StageCost | None = None) -> UnlearnResult:
    ids = _check_ids(train, unlearn_ids)
    n = len(train)
    zero = np.zeros(model.d * model.d)
    if len(ids) == 0:
        return UnlearnResult(zero, model, n, ids, CGResult(zero, 0, 0.0), cfg.damping)
    _, full_grad = mean_loss_and_grad(model, train)
    grad_norm = float(np.linalg.norm(full_grad))
    log.info("training-risk gradient norm at unlearning time: %.3e", grad_norm)
    _, grads = per_sample_losses_and_grads(model, train.subset(train.rows_of(ids)), threads)
    if cost is not None:
        cost.grad_evals += 1 + len(ids)
    res = influence_delta(grads.sum(axis=0), train_hvp(model, train), n, cfg, cost)
    return UnlearnResult(res.x, apply_update(model, res.x), n, ids, res, cfg.damping, grad_norm)


def apply_update(model: ModelState, delta) -> ModelState:
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (model.d * model.d,):
        raise ValueError(f"delta must have length {model.d * model.d}")
    return ModelState(model.item_emb, model.adapter + delta.reshape(model.d, model.d),
                      model.reg, model.seed)


def retrain_oracle(train: SampleSet, unlearn_ids, base: ModelState, cfg: TrainConfig) -> ModelState:
    """Train from the backbone's initialisation on the remain set only."""
    ids = _check_ids(train, unlearn_ids)
    remain = train.without(ids) if len(ids) else train
    return fit_adapter(init_model(base.item_count, cfg, base.item_emb), remain, cfg)


def random_unlearn_baseline(train: SampleSet, size, seed) -> np.ndarray:
    if not 0 <= size <= len(train):
        raise ValueError(f"size must be in [0, {len(train)}]")
    rng = np.random.default_rng(seed)
    return np.sort(train.sample_id[rng.choice(len(train), size=size, replace=False)])


@dataclass
class GapReport:
    rows: list = field(default_factory=list)  # (metric, K, fudlr, retrained, gap)
    param_distance: float = 0.0
    retrain_shift: float = 0.0
    stationarity_before: float = 0.0
    stationarity_after: float = 0.0

    def gap(self, metric, K):
        for m, k, _, _, g in self.rows:
            if m == metric and k == K:
                return g
        raise KeyError((metric, K))


def gap_report(fudlr: ModelState, retrained: ModelState, original: ModelState, remain: SampleSet,
               test: SampleSet, Ks=(5, 20), pop=None, groups=None, tau=5.0, fair_pop="apt",
               fair_attr="1-dp", exclude_history=False) -> GapReport:
    kw = dict(pop=pop, groups=groups, tau=tau, fair_pop=fair_pop, fair_attr=fair_attr,
              exclude_history=exclude_history)
    ours = evaluate(fudlr, test, Ks, **kw)
    ref = evaluate(retrained, test, Ks, **kw)
    report = GapReport()
    for K in ours.Ks:
        for metric in METRIC_COLUMNS:
            a, b = ours[K][metric], ref[K][metric]
            report.rows.append((metric, K, a, b, abs(a - b)))
    report.param_distance = float(np.linalg.norm(fudlr.theta - retrained.theta))
    report.retrain_shift = float(np.linalg.norm(retrained.theta - original.theta))
    report.stationarity_before = float(np.linalg.norm(mean_loss_and_grad(original, remain)[1]))
    report.stationarity_after = float(np.linalg.norm(mean_loss_and_grad(fudlr, remain)[1]))
    return report


def _num(x):
    return repr(float(x))


def write_gap_csv(report: GapReport, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "fudlr_value", "retrained_value", "gap"])
        for metric, K, a, b, g in report.rows:
            w.writerow([f"{metric}@{K}", _num(a), _num(b), _num(g)])
        for name in ("param_distance", "retrain_shift", "stationarity_before", "stationarity_after"):
            w.writerow([name, "", "", _num(getattr(report, name))])


def unlearn_summary(result: UnlearnResult, stationarity_before=None, stationarity_after=None):
    return {
        "n": result.n,
        "n_unlearn": int(len(result.unlearn_ids)),
        "delta_norm": float(np.linalg.norm(result.delta)),
        "cg_iterations": result.cg.iters,
        "cg_residual": result.cg.residual,
        "damping": result.damping,
        "grad_norm_at_call": result.grad_norm_at_call,
        "stationarity_before": stationarity_before,
        "stationarity_after": stationarity_after,
    }


def write_unlearn_json(summary: dict, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
