"""Differentiable bias functionals and the evaluation metric suite.

Bias functionals are smooth in ``theta`` and drive sample identification:

* popularity: mean over samples of the expected popularity ``sum_i P(i|z) v_pop(i)``
* attribute: ``|Pbar_G0 - Pbar_G1|`` where ``Pbar_Gj`` is the mean probability
  the model assigns to the ground-truth target over group-j samples
* combined: ``alpha * popularity + (1 - alpha) * attribute``

The ranking metrics (HR, NDCG, ARP, APT, HD, DP) work on top-K lists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import G0, G1, GroupAssignment, PopularityTable, SampleSet
from .errors import GroupEmptyError
from .recmodel import ModelState, _neg_distances, _softmax, history_means, rank_topk_batch

KINDS = ("popularity", "attribute", "combined")
METRIC_COLUMNS = ("hr", "ndcg", "arp", "apt", "hd", "dp", "f_pop", "f_attr")


@dataclass(frozen=True)
class BiasSpec:
    kind: str
    eval_set: SampleSet
    pop: PopularityTable | None = None
    groups: GroupAssignment | None = None
    alpha: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"bias kind must be one of {KINDS}, got {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.kind in ("popularity", "combined") and self.pop is None:
            raise ValueError(f"{self.kind} bias needs a popularity table")
        if self.kind in ("attribute", "combined") and self.groups is None:
            raise ValueError(f"{self.kind} bias needs a group assignment")
        if len(self.eval_set) == 0:
            raise ValueError("bias evaluation set is empty")

    def fingerprint(self) -> str:
        parts = [self.kind, repr(float(self.alpha)), str(len(self.eval_set)),
                 str(int(self.eval_set.target.sum()))]
        if self.pop is not None:
            parts.append(repr(float(self.pop.v_pop.sum())))
        if self.groups is not None:
            parts.append(",".join(map(str, self.groups.counts())))
        return "|".join(parts)


@dataclass(frozen=True)
class BiasValue:
    value: float
    grad: np.ndarray


def _forward(model, samples):
    means = history_means(model, samples)
    probs = _softmax(_neg_distances(model, means))
    return means, probs


def popularity_bias(model: ModelState, samples: SampleSet, v_pop) -> BiasValue:
    E = model.item_emb
    means, probs = _forward(model, samples)
    per = probs @ v_pop
    # d/dA of sum_i v_i p_i = 2 E^T (p * (v - b)) e^T; centring v first is exact
    # because sum_i p_i = 1, and makes a constant v give an exactly zero gradient
    v = v_pop - v_pop.mean()
    resid = (probs * (v - (probs @ v)[:, None])) @ E
    grad = (2.0 / len(samples)) * (resid.T @ means)
    return BiasValue(float(per.mean()), grad.reshape(-1))


def _group_rows(samples, groups):
    g = groups.group_of[samples.user]
    rows0, rows1 = np.flatnonzero(g == G0), np.flatnonzero(g == G1)
    if len(rows0) == 0 or len(rows1) == 0:
        raise GroupEmptyError("both user groups need at least one sample")
    return rows0, rows1


def attribute_bias(model: ModelState, samples: SampleSet, groups: GroupAssignment) -> BiasValue:
    E = model.item_emb
    rows0, rows1 = _group_rows(samples, groups)
    means, probs = _forward(model, samples)
    rows = np.arange(len(samples))
    p_t = probs[rows, samples.target]
    # d p_t / dA = 2 p_t (E_t - E^T p) e^T
    resid = p_t[:, None] * (E[samples.target] - probs @ E)
    w = np.zeros(len(samples))
    w[rows0] = 1.0 / len(rows0)
    w[rows1] = -1.0 / len(rows1)
    gap = float(p_t[rows0].mean() - p_t[rows1].mean())
    sign = float(np.sign(gap))
    grad = sign * 2.0 * ((resid * w[:, None]).T @ means)
    return BiasValue(abs(gap), grad.reshape(-1))


def evaluate_bias(model: ModelState, spec: BiasSpec) -> BiasValue:
    if spec.kind == "popularity":
        return popularity_bias(model, spec.eval_set, spec.pop.v_pop)
    if spec.kind == "attribute":
        return attribute_bias(model, spec.eval_set, spec.groups)
    bp = popularity_bias(model, spec.eval_set, spec.pop.v_pop)
    ba = attribute_bias(model, spec.eval_set, spec.groups)
    a = spec.alpha
    return BiasValue(a * bp.value + (1 - a) * ba.value, a * bp.grad + (1 - a) * ba.grad)


# -- ranking metrics -------------------------------------------------------

def _hit_ranks(lists, targets):
    """1-based rank of each target inside its list, 0 when absent."""
    hits = lists == targets[:, None]
    found = hits.any(axis=1)
    return np.where(found, hits.argmax(axis=1) + 1, 0)


def accuracy_from_lists(lists, targets, K):
    ranks = _hit_ranks(lists[:, :K], targets)
    hit = ranks > 0
    gains = np.zeros(len(ranks))
    gains[hit] = 1.0 / np.log2(1.0 + ranks[hit])
    return float(hit.mean()), float(gains.mean())


def popularity_from_lists(lists, pop: PopularityTable, K):
    top = lists[:, :K]
    valid = top >= 0
    v = np.where(valid, pop.v_pop[np.maximum(top, 0)], 0.0)
    arp = float(np.mean(v.sum(axis=1) / np.maximum(valid.sum(axis=1), 1)))
    tail = np.where(valid, pop.is_tail[np.maximum(top, 0)], False)
    apt = float(np.mean(tail.sum(axis=1) / K))
    return arp, apt


def attribute_from_lists(lists, samples: SampleSet, groups: GroupAssignment, item_count, K):
    rows0, rows1 = _group_rows(samples, groups)
    top = lists[:, :K]
    hr0, _ = accuracy_from_lists(top[rows0], samples.target[rows0], K)
    hr1, _ = accuracy_from_lists(top[rows1], samples.target[rows1], K)
    freq = []
    for rows in (rows0, rows1):
        t = top[rows]
        f = np.bincount(t[t >= 0], minlength=item_count) / (K * len(rows))
        freq.append(f)
    return abs(hr0 - hr1), 0.5 * float(np.abs(freq[0] - freq[1]).sum())


def eval_accuracy(model, test: SampleSet, Ks, exclude_history=False):
    lists = rank_topk_batch(model, test, max(Ks), exclude_history)
    return {K: accuracy_from_lists(lists, test.target, K) for K in Ks}


def eval_popularity_fairness(model, test: SampleSet, pop: PopularityTable, Ks, exclude_history=False):
    lists = rank_topk_batch(model, test, max(Ks), exclude_history)
    return {K: popularity_from_lists(lists, pop, K) for K in Ks}


def eval_attribute_fairness(model, test: SampleSet, groups: GroupAssignment, Ks, exclude_history=False):
    lists = rank_topk_batch(model, test, max(Ks), exclude_history)
    return {K: attribute_from_lists(lists, test, groups, model.item_count, K) for K in Ks}


def f_score(hr, fair, tau=5.0):
    """Harmonic mean of ``tau * hr`` and ``fair`` (0 when both vanish)."""
    if hr < 0 or fair < 0:
        raise ValueError("hr and fair must be non-negative")
    denom = tau * hr + fair
    if denom == 0:
        return 0.0
    return 2.0 * tau * hr * fair / denom


def fair_component(row, which):
    """Fair@K used inside the F-scores.

    ``apt`` and ``1-dp`` reproduce the published F columns; ``arp`` and
    ``1-hd`` are the alternative readings.
    """
    if which == "apt":
        return row["apt"]
    if which == "arp":
        return row["arp"]
    if which == "1-dp":
        return 1.0 - row["dp"]
    if which == "1-hd":
        return 1.0 - row["hd"]
    raise ValueError(f"unknown fair component {which!r}")


@dataclass
class EvalReport:
    rows: dict = field(default_factory=dict)  # K -> {metric: value}
    tau: float = 5.0

    def __getitem__(self, K):
        return self.rows[K]

    @property
    def Ks(self):
        return sorted(self.rows)


def evaluate(model: ModelState, test: SampleSet, Ks, pop: PopularityTable | None = None,
             groups: GroupAssignment | None = None, tau=5.0, fair_pop="apt",
             fair_attr="1-dp", exclude_history=False) -> EvalReport:
    """All metrics for every K; attribute metrics are NaN without two groups."""
    Ks = sorted(Ks)
    lists = rank_topk_batch(model, test, Ks[-1], exclude_history)
    report = EvalReport(tau=tau)
    has_groups = False
    if groups is not None:
        g = groups.group_of[test.user]
        has_groups = bool(np.any(g == G0) and np.any(g == G1))
    for K in Ks:
        row = dict.fromkeys(METRIC_COLUMNS, math.nan)
        row["hr"], row["ndcg"] = accuracy_from_lists(lists, test.target, K)
        if pop is not None:
            row["arp"], row["apt"] = popularity_from_lists(lists, pop, K)
            row["f_pop"] = f_score(row["hr"], fair_component(row, fair_pop), tau)
        if has_groups:
            row["hd"], row["dp"] = attribute_from_lists(lists, test, groups, model.item_count, K)
            row["f_attr"] = f_score(row["hr"], fair_component(row, fair_attr), tau)
        report.rows[K] = row
    return report
