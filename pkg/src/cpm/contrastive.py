"""Context queue, similarity distributions, positive mining and the two losses.

The numpy functions operate on single queries and are the reference forms;
the batched helpers at the bottom build the differentiable student side and
the constant target side used by the trainer.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

# call counters, read by tests to confirm which stage touched what
counters: Counter = Counter()

UNIT_TOL = 1e-12


class EmptyQueueError(ValueError):
    pass


class ContextQueue:
    """Fixed-capacity FIFO of unit-norm embeddings tagged with sample ids.

    Storage is a ring buffer; :meth:`entries` returns the contents oldest
    first so index ``i`` is stable within a snapshot.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError("capacity and dim must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._buf = np.zeros((self.capacity, self.dim), dtype=np.float64)
        self._ids: list[str | None] = [None] * self.capacity
        self._labels = np.full(self.capacity, -1, dtype=np.int64)
        self._cursor = 0
        self._count = 0

    def __len__(self) -> int:
        return self._count

    @property
    def full(self) -> bool:
        return self._count == self.capacity

    def push(self, embeddings, ids=None, labels=None) -> None:
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim == 1:
            emb = emb[None]
        if emb.shape[1] != self.dim:
            raise ValueError(f"embedding dim {emb.shape[1]} does not match queue dim {self.dim}")
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        # rows already of unit norm are stored untouched, so pushes replay exactly
        off = np.abs(norms - 1.0) > UNIT_TOL
        emb = np.where(off, emb / np.maximum(norms, ad.NORM_EPS), emb)
        n = emb.shape[0]
        ids = [None] * n if ids is None else list(ids)
        labels = np.full(n, -1) if labels is None else np.asarray(labels)
        for i in range(n):
            self._buf[self._cursor] = emb[i]
            self._ids[self._cursor] = ids[i]
            self._labels[self._cursor] = labels[i]
            self._cursor = (self._cursor + 1) % self.capacity
            self._count = min(self._count + 1, self.capacity)
        counters["queue_push"] += 1

    def _order(self) -> np.ndarray:
        if self._count < self.capacity:
            return np.arange(self._count)
        return (np.arange(self.capacity) + self._cursor) % self.capacity

    def entries(self) -> np.ndarray:
        return self._buf[self._order()].copy()

    def ids(self) -> list:
        return [self._ids[i] for i in self._order()]

    def labels(self) -> np.ndarray:
        return self._labels[self._order()].copy()

    def state(self) -> dict:
        return {"entries": self.entries(), "ids": self.ids(), "labels": self.labels()}

    @classmethod
    def from_state(cls, capacity: int, entries, ids, labels=None) -> "ContextQueue":
        entries = np.asarray(entries, dtype=np.float64)
        q = cls(capacity, entries.shape[1])
        n = len(entries)
        q._buf[:n] = entries
        q._ids[:n] = list(ids)
        if labels is not None:
            q._labels[:n] = labels
        q._count = n
        q._cursor = n % capacity
        return q


@dataclass
class SimilarityDistribution:
    weights: np.ndarray
    temperature: float
    normalized: bool = True


@dataclass
class MiningResult:
    indices: np.ndarray
    scores: np.ndarray


@dataclass
class EnhancedTargetDistribution:
    values: np.ndarray
    positives: np.ndarray
    temperature: float


# ----------------------------------------------------------------------
# reference forms on one query


def center_and_normalize(batch: ad.Tensor, train: bool = True) -> ad.Tensor:
    """Subtract the batch mean per dimension, then unit-normalise rows."""
    if not isinstance(batch, ad.Tensor):
        batch = ad.Tensor(batch)
    if train and batch.shape[0] < 2:
        raise ValueError("mean-centring needs a batch of at least two in train mode")
    centred = ad.mean_center_rows(batch)
    norms = np.linalg.norm(centred.data, axis=-1)
    degenerate = int((norms < ad.NORM_EPS).sum())
    if degenerate:
        counters["degenerate_rows"] += degenerate
        log.warning("%d centred rows fell below the norm guard", degenerate)
    return ad.l2_normalize_rows(centred)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def similarity_distribution(v, queue_entries, tau: float) -> SimilarityDistribution:
    q = np.asarray(queue_entries, dtype=np.float64)
    if q.size == 0:
        raise EmptyQueueError("similarity distribution over an empty queue")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    dots = q @ np.asarray(v, dtype=np.float64)
    return SimilarityDistribution(_softmax(dots / tau), tau, True)


def _weights(d) -> np.ndarray:
    if isinstance(d, SimilarityDistribution):
        return d.weights
    if isinstance(d, EnhancedTargetDistribution):
        return d.values
    return np.asarray(d, dtype=np.float64)


def cross_entropy(target, student) -> float:
    """``H(t, s) = -sum t_i log s_i`` with ``0 log 0 = 0``."""
    t, s = _weights(target), _weights(student)
    live = t > 0
    if np.any(s[live] <= 0):
        raise ValueError("student weight is zero where target weight is positive")
    return float(-(t[live] * np.log(s[live])).sum())


def entropy(target) -> float:
    t = _weights(target)
    live = t > 0
    return float(-(t[live] * np.log(t[live])).sum())


def kl_loss(target, student) -> float:
    """``KL(t || s) = H(t, s) - H(t)``."""
    return cross_entropy(target, student) - entropy(target)


def enhanced_loss(enhanced_target, student) -> float:
    """``H(t, s) - H(t)`` evaluated verbatim, also for an unnormalised ``t``."""
    return cross_entropy(enhanced_target, student) - entropy(enhanced_target)


def mine_topk(scores, k: int, exclude=None) -> MiningResult:
    """Indices of the ``k`` largest scores, ties going to the lower index.

    ``exclude`` is a boolean mask of entries that may not be selected.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if k < 0 or k > n:
        raise ValueError(f"K={k} outside [0, {n}]")
    counters["mine_topk"] += 1
    if k == 0:
        return MiningResult(np.zeros(0, dtype=np.int64), np.zeros(0))
    candidates = np.arange(n) if exclude is None else np.flatnonzero(~np.asarray(exclude, bool))
    # stable sort on negated scores keeps lower indices first among equals
    order = candidates[np.argsort(-scores[candidates], kind="stable")][:k]
    return MiningResult(order.astype(np.int64), scores[order])


def enhance_target(raw_dots, positives, tau_prime: float, renormalize: bool = False) -> EnhancedTargetDistribution:
    """Target weights with mined positives' similarity replaced by 1.

    The shared denominator is computed from the original dots, so the
    result does not sum to one unless ``renormalize`` is set.
    """
    if tau_prime <= 0:
        raise ValueError("temperature must be positive")
    counters["enhance_target"] += 1
    dots = np.asarray(raw_dots, dtype=np.float64)
    pos = np.asarray(positives, dtype=np.int64)
    # non-positives are exactly the plain target; positives reuse its shift and mass
    logits = dots / tau_prime
    values = _softmax(logits)
    if pos.size:
        shift = logits.max()
        log_z = np.log(np.exp(logits - shift).sum())
        values[pos] = np.exp(1.0 / tau_prime - shift - log_z)
    if renormalize:
        values = values / values.sum()
    return EnhancedTargetDistribution(values, pos, tau_prime)


# ----------------------------------------------------------------------
# batched forms used during training


def target_distributions(
    target_bar: np.ndarray,
    queue_entries: np.ndarray,
    tau_prime: float,
    k: int = 0,
    enhance: bool = False,
    exclude: np.ndarray | None = None,
    mining_scores: np.ndarray | None = None,
    renormalize: bool = False,
) -> tuple[np.ndarray, np.ndarray, list[MiningResult]]:
    """Constant target weights ``(B, N)`` for a batch of unit target embeddings.

    Returns the weights, the raw target dots and the per-row mining results
    (empty when ``enhance`` is false).  ``exclude`` is a ``(B, N)`` mask of
    queue entries that belong to the query sample itself.
    """
    if len(queue_entries) == 0:
        raise EmptyQueueError("target distribution over an empty queue")
    dots = np.asarray(target_bar, dtype=np.float64) @ queue_entries.T
    if not enhance:
        return _softmax(dots / tau_prime), dots, []
    scores = dots if mining_scores is None else mining_scores
    weights = np.empty_like(dots)
    mined = []
    for b in range(dots.shape[0]):
        res = mine_topk(scores[b], k, None if exclude is None else exclude[b])
        weights[b] = enhance_target(dots[b], res.indices, tau_prime, renormalize).values
        mined.append(res)
    return weights, dots, mined


def student_log_distribution(student_bar: ad.Tensor, queue_entries: np.ndarray, tau: float) -> ad.Tensor:
    """Differentiable ``log D`` for a batch of unit student embeddings, in float64."""
    s = ad.cast(student_bar, np.float64) if student_bar.dtype != np.float64 else student_bar
    logits = ad.matmul(s, ad.Tensor(np.ascontiguousarray(queue_entries.T)))
    return ad.log_softmax_with_temperature(logits, tau)


def distribution_loss(target_weights: np.ndarray, log_student: ad.Tensor) -> ad.Tensor:
    """Batch mean of ``H(t, s) - H(t)``; the target carries no gradient."""
    t = np.asarray(target_weights, dtype=np.float64)
    live = t > 0
    neg_entropy = float((t[live] * np.log(t[live])).sum())
    ce = ad.reduce_sum(ad.multiply(ad.Tensor(t), log_student))
    b = t.shape[0]
    return ad.multiply(ad.sub(neg_entropy, ce), 1.0 / b)


def self_mask(query_ids, queue_ids) -> np.ndarray:
    """``(B, N)`` mask marking queue entries that carry the query's own sample id."""
    qids = np.asarray([str(i) for i in queue_ids], dtype=object)
    return np.stack([qids == str(q) for q in query_ids]) if len(query_ids) else np.zeros((0, len(qids)), bool)
