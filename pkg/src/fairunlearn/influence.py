"""Damped conjugate gradient and influence scores of training samples on a bias.

The influence of up-weighting sample ``z`` on a functional ``B`` is
``-grad B^T (H + lambda I)^-1 grad L(z)``.  Since ``H`` is symmetric, the
inverse-Hessian product ``s = (H + lambda I)^-1 grad B`` is solved once and
each candidate only costs a gradient and a dot product.  A positive score
means removing the sample should lower ``B``.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from .costs import StageCost
from .dataset import CandidateSet, SampleSet
from .errors import NumericalError, SolverError
from .fairness import BiasSpec, evaluate_bias
from .recmodel import HessianOperator, ModelState, hvp, per_sample_losses_and_grads

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CGConfig:
    damping: float = 1e-3
    tol: float = 1e-8
    max_iter: int = 200

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("CG tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")


@dataclass(frozen=True)
class CGResult:
    x: np.ndarray
    iters: int
    residual: float


def solve_damped_cg(hvp_oracle, b, cfg: CGConfig = CGConfig(), cost: StageCost | None = None) -> CGResult:
    """Solve ``(H + damping I) x = b`` given only ``v -> H v``.

    Stops when ``||r|| / ||b|| <= tol`` or after ``max_iter`` iterations
    (logged, not raised).  ``residual`` is the relative residual reached.
    """
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise SolverError("right-hand side is not finite", 0)
    b_norm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    if b_norm == 0.0:
        return CGResult(x, 0, 0.0)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    rel = 1.0
    it = 0
    for it in range(1, cfg.max_iter + 1):
        Ap = hvp_oracle(p) + cfg.damping * p
        if cost is not None:
            cost.grad_evals += 1
            cost.cg_iters += 1
        pAp = float(p @ Ap)
        if not np.isfinite(pAp) or pAp <= 0.0:
            raise SolverError(f"curvature {pAp} at iteration {it}; system is not positive definite", it)
        alpha = rs / pAp
        x += alpha * p
        r -= alpha * Ap
        rs_new = float(r @ r)
        if not np.isfinite(rs_new):
            raise SolverError(f"non-finite residual at iteration {it}", it)
        rel = np.sqrt(rs_new) / b_norm
        if rel <= cfg.tol:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    else:
        log.warning("CG hit max_iter=%d with relative residual %.3e", cfg.max_iter, rel)
    return CGResult(x, it, float(rel))


def train_hvp(model: ModelState, train: SampleSet, method="analytic"):
    if method == "analytic":
        op = HessianOperator(model, train)

        def product(v):
            out = op(v)
            if not np.all(np.isfinite(out)):
                raise NumericalError("Hessian-vector product is not finite")
            return out
        return product
    return lambda v: hvp(model, train, v, method)


def precompute_influence_vector(model: ModelState, train: SampleSet, spec: BiasSpec,
                                cfg: CGConfig = CGConfig(), cost: StageCost | None = None) -> CGResult:
    """``(H + damping I)^-1 grad B`` with ``H`` the training-risk Hessian."""
    bias = evaluate_bias(model, spec)
    if cost is not None:
        cost.grad_evals += 1
    return solve_damped_cg(train_hvp(model, train), bias.grad, cfg, cost)


@dataclass(frozen=True)
class InfluenceCache:
    s_vector: np.ndarray
    sample_ids: np.ndarray
    influence: np.ndarray
    loss: np.ndarray
    grad_norm: np.ndarray
    fingerprint: str = ""

    def __len__(self):
        return len(self.sample_ids)


def influence_scores(model: ModelState, candidates: CandidateSet, train: SampleSet, s,
                     fingerprint="", threads=1, cost: StageCost | None = None) -> InfluenceCache:
    ids = np.sort(np.asarray(candidates.sample_ids, dtype=np.int64))
    if len(np.unique(ids)) != len(ids):
        raise ValueError("candidate ids must be unique")
    rows = train.rows_of(ids)
    losses, grads = per_sample_losses_and_grads(model, train.subset(rows), threads)
    if cost is not None:
        cost.grad_evals += len(ids)
    s = np.asarray(s, dtype=float)
    return InfluenceCache(s.copy(), ids, -(grads @ s), losses,
                          np.linalg.norm(grads, axis=1), fingerprint)


def cache_fingerprint(model: ModelState, spec: BiasSpec, cfg: CGConfig) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(model.item_emb).tobytes())
    h.update(np.ascontiguousarray(model.adapter).tobytes())
    h.update(repr(float(model.reg)).encode())
    h.update(spec.fingerprint().encode())
    h.update(f"{cfg.damping!r}|{cfg.tol!r}|{cfg.max_iter}".encode())
    return h.hexdigest()


def write_influence_csv(cache: InfluenceCache, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# fingerprint={cache.fingerprint}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "influence", "loss", "grad_norm"])
        for row in zip(cache.sample_ids, cache.influence, cache.loss, cache.grad_norm):
            w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])


def read_influence_csv(path, s_vector=None) -> InfluenceCache:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
        fingerprint = first.split("=", 1)[1] if first.startswith("# fingerprint=") else ""
        rows = list(csv.DictReader(fh))
    col = lambda k, t: np.array([t(r[k]) for r in rows])  # noqa: E731
    s = np.zeros(0) if s_vector is None else np.asarray(s_vector)
    return InfluenceCache(s, col("sample_id", int), col("influence", float),
                          col("loss", float), col("grad_norm", float), fingerprint)
