"""Learn a soft removal mask over candidate samples and pick the unlearning set.

Each candidate ``k`` gets a logit ``w_k`` and removal probability
``m_k = sigmoid(w_k)``.  The objective is

    lambda_fair * -mean(m * I) + lambda_acc * mean(m * loss) + lambda_spa * mean(m)

over the cached influence scores ``I`` and per-sample losses.  After Adam,
samples with ``w_k > 0`` are selected.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import AlignmentError, DivergenceError
from .influence import InfluenceCache

log = logging.getLogger(__name__)

LAMBDA_GRID = tuple(10.0 ** i for i in range(-3, 3))


@dataclass(frozen=True)
class Lambdas:
    fair: float = 1.0
    acc: float = 1.0
    spa: float = 1.0

    def __post_init__(self):
        if min(self.fair, self.acc, self.spa) < 0:
            raise ValueError("mask weights must be non-negative")


@dataclass(frozen=True)
class MaskOptConfig:
    learning_rate: float = 1e-3
    iterations: int = 500
    seed: int = 0
    init_logit: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class MaskState:
    sample_ids: np.ndarray
    logits: np.ndarray
    step: int
    lambdas: Lambdas

    @property
    def probs(self):
        return expit(self.logits)


def mask_terms(logits, cache: InfluenceCache):
    """The three unweighted objective terms ``(L_fair, L_acc, L_spa)``."""
    m = expit(logits)
    return -np.mean(m * cache.influence), np.mean(m * cache.loss), np.mean(m)


def mask_objective(mask: MaskState, cache: InfluenceCache):
    if not np.array_equal(mask.sample_ids, cache.sample_ids):
        raise AlignmentError("mask and influence cache cover different samples")
    lam = mask.lambdas
    l_fair, l_acc, l_spa = mask_terms(mask.logits, cache)
    value = lam.fair * l_fair + lam.acc * l_acc + lam.spa * l_spa
    m = expit(mask.logits)
    per = -lam.fair * cache.influence + lam.acc * cache.loss + lam.spa
    grad = m * (1.0 - m) * per / len(m)
    return float(value), grad


def optimize_mask(candidates, cache: InfluenceCache, lambdas: Lambdas,
                  cfg: MaskOptConfig = MaskOptConfig()) -> MaskState:
    ids = np.asarray(getattr(candidates, "sample_ids", candidates), dtype=np.int64)
    if not np.array_equal(np.sort(ids), cache.sample_ids):
        raise AlignmentError("influence cache does not cover the candidate set")
    state = MaskState(cache.sample_ids.copy(), np.full(len(ids), float(cfg.init_logit)), 0, lambdas)
    initial, _ = mask_objective(state, cache)
    w = state.logits.copy()
    m1 = np.zeros_like(w)
    m2 = np.zeros_like(w)
    value = initial
    for t in range(1, cfg.iterations + 1):
        value, g = mask_objective(MaskState(state.sample_ids, w, t - 1, lambdas), cache)
        if not np.isfinite(value) or not np.all(np.isfinite(g)):
            raise DivergenceError(f"mask objective is not finite at step {t}", t)
        m1 = cfg.beta1 * m1 + (1 - cfg.beta1) * g
        m2 = cfg.beta2 * m2 + (1 - cfg.beta2) * g * g
        m1_hat = m1 / (1 - cfg.beta1 ** t)
        m2_hat = m2 / (1 - cfg.beta2 ** t)
        w = w - cfg.learning_rate * m1_hat / (np.sqrt(m2_hat) + cfg.eps)
    final = MaskState(state.sample_ids, w, cfg.iterations, lambdas)
    value, _ = mask_objective(final, cache)
    if value > initial:
        log.warning("mask objective rose from %.6g to %.6g", initial, value)
    return final


def select_unlearn_set(mask: MaskState) -> np.ndarray:
    return np.sort(mask.sample_ids[mask.logits > 0])


def write_mask_csv(mask: MaskState, cache: InfluenceCache, path):
    selected = mask.logits > 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "final_logit", "m", "influence", "loss", "selected"])
        for k in range(len(mask.sample_ids)):
            w.writerow([int(mask.sample_ids[k]), repr(float(mask.logits[k])),
                        repr(float(expit(mask.logits[k]))), repr(float(cache.influence[k])),
                        repr(float(cache.loss[k])), int(selected[k])])


def read_selected_ids(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        ids = [int(r["sample_id"]) for r in csv.DictReader(fh) if r["selected"] == "1"]
    return np.array(sorted(ids), dtype=np.int64)
