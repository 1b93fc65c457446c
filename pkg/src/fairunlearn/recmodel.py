"""Distance-softmax next-item recommender with a trainable d x d adapter.

A sample's history is mean-pooled over frozen item embeddings ``E`` and
mapped through the adapter ``A`` to a query ``q = A e``.  Items are scored by
squared distance ``d_i = ||E_i - q||^2`` and ``P(i) = softmax(-d)_i``.  Only
``A`` (flattened row-major into ``theta``) is differentiated.

Because ``||q||^2`` is shared by every item, the logits are linear in ``A``,
so the cross-entropy is convex in ``theta`` and its Hessian has the closed
form ``4 * mean_k Cov_k (x) e_k e_k^T + reg * I``.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import Sample, SampleSet
from .errors import DivergenceError, NumericalError, SizeError

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
BLOCK = 2048
MAX_ORACLE_DIM = 4096


@dataclass(frozen=True, eq=False)
class ModelState:
    item_emb: np.ndarray
    adapter: np.ndarray
    reg: float = 1e-3
    seed: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("embedding width must be >= 2")
        if self.adapter.shape != (self.d, self.d):
            raise ValueError("adapter must be d x d")
        if not np.all(np.isfinite(self.adapter)):
            raise NumericalError("adapter has non-finite entries")
        for arr in (self.item_emb, self.adapter):
            arr.flags.writeable = False

    def __eq__(self, other):
        if not isinstance(other, ModelState):
            return NotImplemented
        return (self.reg == other.reg and self.seed == other.seed
                and np.array_equal(self.item_emb, other.item_emb)
                and np.array_equal(self.adapter, other.adapter))

    __hash__ = None

    @property
    def d(self) -> int:
        return self.item_emb.shape[1]

    @property
    def item_count(self) -> int:
        return self.item_emb.shape[0]

    @property
    def theta(self) -> np.ndarray:
        return self.adapter.reshape(-1).copy()

    def with_theta(self, theta) -> "ModelState":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.d * self.d,):
            raise ValueError(f"parameter vector must have length {self.d * self.d}")
        return ModelState(self.item_emb, theta.reshape(self.d, self.d).copy(), self.reg, self.seed)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    learning_rate: float = 1.0
    seed: int = 0
    reg: float = 1e-3
    dim: int = 8
    tol: float = 1e-6

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.reg < 0:
            raise ValueError("reg must be >= 0")


# -- forward pass ----------------------------------------------------------

def history_means(model: ModelState, samples: SampleSet) -> np.ndarray:
    if np.any(samples.lengths < 1):
        raise ValueError("every sample needs a non-empty history")
    valid = samples.history >= 0
    emb = model.item_emb[np.where(valid, samples.history, 0)]
    emb = emb * valid[..., None]
    return emb.sum(axis=1) / samples.lengths[:, None]


def _neg_distances(model: ModelState, means: np.ndarray) -> np.ndarray:
    q = means @ model.adapter.T
    sq_items = np.einsum("ij,ij->i", model.item_emb, model.item_emb)
    sq_q = np.einsum("ij,ij->i", q, q)
    out = q @ (2.0 * model.item_emb.T)
    out -= sq_items[None, :]
    out -= sq_q[:, None]
    return out


def _softmax(neg_d: np.ndarray) -> np.ndarray:
    return _softmax_lse(neg_d)[0]


def _softmax_lse(neg_d: np.ndarray):
    """Row softmax and log-sum-exp sharing one exponentiation."""
    top = neg_d.max(axis=-1, keepdims=True)
    z = neg_d - top
    np.exp(z, out=z)
    total = z.sum(axis=-1, keepdims=True)
    z /= total
    return z, (np.log(total) + top)[..., 0]


def distributions(model: ModelState, samples: SampleSet):
    """Distances and probabilities for every sample, shape ``(n, item_count)``."""
    neg_d = _neg_distances(model, history_means(model, samples))
    return -neg_d, _softmax(neg_d)


def item_distribution(model: ModelState, sample: Sample):
    if len(sample.history) == 0:
        raise ValueError("empty history")
    dist, probs = distributions(model, SampleSet.from_samples([sample]))
    return dist[0], probs[0]


def softmax_neg(distances) -> np.ndarray:
    """Max-shifted ``softmax(-d)`` of a single distance vector."""
    return _softmax(-np.asarray(distances, dtype=float))


# -- losses and gradients --------------------------------------------------

def _blocks(n):
    return [(s, min(s + BLOCK, n)) for s in range(0, n, BLOCK)]


def _map_blocks(fn, n, threads=1):
    spans = _blocks(n)
    if threads and threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda span: fn(*span), spans))
    return [fn(*span) for span in spans]


def per_sample_losses_and_grads(model: ModelState, samples: SampleSet, threads=1):
    """Per-sample loss ``-log P(target) + reg/2 ||theta||^2`` and its gradient.

    Returns ``(losses (n,), grads (n, d*d))``.  Rows are computed in fixed
    blocks so the result does not depend on ``threads``.
    """
    E, A = model.item_emb, model.adapter
    l2 = 0.5 * model.reg * float(np.sum(A * A))

    def block(lo, hi):
        sub = samples.subset(np.arange(lo, hi))
        means = history_means(model, sub)
        neg_d = _neg_distances(model, means)
        rows = np.arange(hi - lo)
        picked = neg_d[rows, sub.target]
        probs, lse = _softmax_lse(neg_d)
        losses = lse - picked + l2
        resid = probs @ E - E[sub.target]
        grads = 2.0 * np.einsum("ka,kb->kab", resid, means).reshape(hi - lo, -1)
        grads += model.reg * A.reshape(-1)
        return losses, grads

    parts = _map_blocks(block, len(samples), threads)
    if not parts:
        return np.zeros(0), np.zeros((0, model.d * model.d))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def sample_loss_and_grad(model: ModelState, sample: Sample):
    losses, grads = per_sample_losses_and_grads(model, SampleSet.from_samples([sample]))
    return float(losses[0]), grads[0]


def mean_loss_and_grad(model: ModelState, samples: SampleSet, means=None):
    """Empirical risk over ``samples`` and its gradient w.r.t. ``theta``.

    ``means`` may carry precomputed history means (they do not depend on the
    adapter).
    """
    E, A = model.item_emb, model.adapter
    n = len(samples)
    if means is None:
        means = history_means(model, samples)
    neg_d = _neg_distances(model, means)
    picked = neg_d[np.arange(n), samples.target]
    probs, lse = _softmax_lse(neg_d)
    loss = float(np.mean(lse - picked))
    loss += 0.5 * model.reg * float(np.sum(A * A))
    resid = probs @ E - E[samples.target]
    grad = (2.0 / n) * (resid.T @ means) + model.reg * A
    return loss, grad.reshape(-1)


class HessianOperator:
    """``v -> H v`` for the mean risk over ``samples`` at a fixed ``model``.

    The forward pass (history means, probabilities) is computed once, so each
    product costs two ``n x item_count`` matrix multiplications.
    """

    def __init__(self, model: ModelState, samples: SampleSet):
        self.model = model
        self.d = model.d
        self.n = len(samples)
        self.means = history_means(model, samples)
        self.probs = _softmax(_neg_distances(model, self.means))
        self.mu = self.probs @ model.item_emb

    def __call__(self, v) -> np.ndarray:
        E = self.model.item_emb
        V = np.asarray(v, dtype=float).reshape(self.d, self.d)
        # Cov_k (V e_k) = E^T(p*w) - (E^T p)(p.w), with w = E V e_k
        pw = (self.means @ V.T) @ E.T
        pw *= self.probs
        cov_v = pw @ E - self.mu * pw.sum(axis=1, keepdims=True)
        out = (4.0 / self.n) * (cov_v.T @ self.means) + self.model.reg * V
        return out.reshape(-1)


def hvp(model: ModelState, samples: SampleSet, v, method="analytic") -> np.ndarray:
    """Mean-risk Hessian times ``v`` without forming the Hessian.

    ``method="fd"`` uses central differences of the gradient with step
    ``1e-5 * (1 + ||v||)``.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (model.d * model.d,):
        raise ValueError(f"vector must have length {model.d * model.d}")
    if method == "fd":
        eps = 1e-5 * (1.0 + np.linalg.norm(v))
        theta = model.theta
        _, gp = mean_loss_and_grad(model.with_theta(theta + eps * v), samples)
        _, gm = mean_loss_and_grad(model.with_theta(theta - eps * v), samples)
        out = (gp - gm) / (2 * eps)
    elif method == "analytic":
        out = HessianOperator(model, samples)(v)
    else:
        raise ValueError(f"unknown hvp method {method!r}")
    if not np.all(np.isfinite(out)):
        raise NumericalError("Hessian-vector product is not finite")
    return out


def exact_hessian(model: ModelState, samples: SampleSet) -> np.ndarray:
    """Dense mean-risk Hessian built from its Kronecker form (oracle use only)."""
    d, E = model.d, model.item_emb
    if d * d > MAX_ORACLE_DIM:
        raise SizeError(f"dense Hessian of size {d * d} exceeds oracle guard {MAX_ORACLE_DIM}")
    means = history_means(model, samples)
    probs = _softmax(_neg_distances(model, means))
    mu = probs @ E
    cov = np.einsum("ki,ia,ic->kac", probs, E, E) - np.einsum("ka,kc->kac", mu, mu)
    H = 4.0 * np.einsum("kac,kb,kd->abcd", cov, means, means) / len(samples)
    H = H.reshape(d * d, d * d)
    H = 0.5 * (H + H.T)
    H[np.diag_indices_from(H)] += model.reg
    return H


# -- training --------------------------------------------------------------

def init_model(item_count, cfg: TrainConfig, item_emb=None) -> ModelState:
    """Seeded base embeddings (unless given) and an identity adapter."""
    if item_emb is None:
        rng = np.random.default_rng(cfg.seed)
        item_emb = rng.normal(0.0, 1.0 / np.sqrt(cfg.dim), size=(item_count, cfg.dim))
    item_emb = np.array(item_emb, dtype=float)
    if item_emb.shape[0] != item_count:
        raise ValueError("item_emb rows must equal item_count")
    return ModelState(item_emb, np.eye(item_emb.shape[1]), cfg.reg, cfg.seed)


def fit_adapter(init: ModelState, samples: SampleSet, cfg: TrainConfig) -> ModelState:
    """Full-batch gradient descent on the mean risk, starting from ``init``."""
    if len(samples) == 0:
        raise ValueError("cannot train on an empty sample set")
    model = ModelState(init.item_emb, np.array(init.adapter), cfg.reg, cfg.seed)
    theta = model.theta
    means = history_means(model, samples)
    grad_norm = np.inf
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        loss, grad = mean_loss_and_grad(model, samples, means)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise DivergenceError(f"non-finite loss at epoch {epoch}", epoch)
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < cfg.tol:
            epoch -= 1
            break
        theta = theta - cfg.learning_rate * grad
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"non-finite parameters at epoch {epoch}", epoch)
        model = model.with_theta(theta)
    else:
        _, grad = mean_loss_and_grad(model, samples, means)
        grad_norm = float(np.linalg.norm(grad))
    log.info("adapter training stopped after %d epochs, |grad| = %.3e", epoch, grad_norm)
    return ModelState(model.item_emb, np.array(model.adapter), cfg.reg, cfg.seed,
                      meta={"epochs_run": epoch, "grad_norm": grad_norm})


def train_backbone(samples: SampleSet, item_count, cfg: TrainConfig, item_emb=None) -> ModelState:
    return fit_adapter(init_model(item_count, cfg, item_emb), samples, cfg)


# -- ranking ---------------------------------------------------------------

def rank_topk_batch(model: ModelState, samples: SampleSet, K, exclude_history=False) -> np.ndarray:
    """Top-``K`` items per sample by ascending distance, ties by item index.

    Rows are padded with -1 when exclusion leaves fewer than ``K`` items.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    dist, _ = distributions(model, samples)
    if exclude_history:
        rows = np.repeat(np.arange(len(samples)), samples.history.shape[1])
        cols = samples.history.reshape(-1)
        keep = cols >= 0
        dist[rows[keep], cols[keep]] = np.inf
    K = min(K, model.item_count)
    order = np.argsort(dist, axis=1, kind="stable")[:, :K]
    if exclude_history:
        order = np.where(np.isinf(np.take_along_axis(dist, order, axis=1)), -1, order)
    return order


def rank_topk(model: ModelState, sample: Sample, K, exclude_history=False) -> list:
    row = rank_topk_batch(model, SampleSet.from_samples([sample]), K, exclude_history)[0]
    return [int(i) for i in row if i >= 0]


# -- checkpoints -----------------------------------------------------------

def save_model(model: ModelState, path):
    """Write a JSON header line followed by raw little-endian float64 arrays."""
    header = {"version": CHECKPOINT_VERSION, "seed": model.seed, "d": model.d,
              "item_count": model.item_count, "reg": repr(float(model.reg)),
              "meta": {k: (repr(v) if isinstance(v, float) else v) for k, v in sorted(model.meta.items())}}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(model.item_emb, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.adapter, dtype="<f8").tobytes())


def load_model(path) -> ModelState:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        n, d = header["item_count"], header["d"]
        emb = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(n, d).copy()
        adapter = np.frombuffer(fh.read(8 * d * d), dtype="<f8").reshape(d, d).copy()
    meta = {k: (float(v) if isinstance(v, str) else v) for k, v in header.get("meta", {}).items()}
    return ModelState(emb, adapter, float(header["reg"]), header["seed"], meta)
