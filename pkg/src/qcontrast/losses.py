"""Contrastive and classification objectives for long-tailed training.

All losses are fused ops over :class:`~qcontrast.tensor.Tensor` with a
hand-written backward. ``reduction="sum"`` is the literal sum over anchors
(or samples); ``"mean"`` divides by the number of rows.
"""

from __future__ import annotations

import math
from collections import Counter

import numpy as np

from .errors import ConfigurationError, ContractViolation, DimensionError
from .tensor import Tensor

__all__ = [
    "scl_loss",
    "class_weights",
    "crcl_loss",
    "crcl_oracle",
    "logit_adjusted_ce",
    "cross_entropy",
    "composite_loss",
    "class_prior",
]

UNIT_NORM_TOL = 1e-8


def _check_batch(z: Tensor, labels: np.ndarray) -> np.ndarray:
    if z.ndim != 2:
        raise DimensionError(f"embeddings must be [2B, d], got {z.shape}")
    labels = np.asarray(labels)
    if labels.shape != (z.shape[0],):
        raise DimensionError(f"labels shape {labels.shape} does not match {z.shape[0]} embeddings")
    norms = np.linalg.norm(z.data, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        worst = int(np.argmax(np.abs(norms - 1.0)))
        raise ContractViolation(f"embedding row {worst} has norm {norms[worst]:.12g}, expected 1")
    return labels


def _reduce(total: float, count: int, reduction: str) -> tuple[float, float]:
    if reduction == "sum":
        return total, 1.0
    if reduction == "mean":
        return total / count, 1.0 / count
    raise ConfigurationError(f"unknown reduction {reduction!r}")


def _weighted_contrastive(z: Tensor, labels, log_w: np.ndarray, inv_tau: float, reduction: str) -> Tensor:
    """Shared kernel of SCL and CRCL.

    For anchor i the loss is ``lse_a(s_ia + log W_a) - mean_p s_ip`` with
    ``s = z z^T / tau``; anchors without positives contribute zero.
    """
    labels = _check_batch(z, labels)
    n = z.shape[0]
    sim = (z.data @ z.data.T) * inv_tau
    off_diag = ~np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & off_diag
    n_pos = pos.sum(axis=1)
    has_pos = n_pos > 0

    logits = np.where(off_diag, sim + log_w[None, :], -np.inf)
    row_max = logits.max(axis=1, keepdims=True) if n > 1 else np.zeros((n, 1))
    exp = np.where(off_diag, np.exp(logits - row_max), 0.0)
    denom = exp.sum(axis=1, keepdims=True)
    lse = (row_max + np.log(np.where(denom > 0, denom, 1.0)))[:, 0]
    pos_mean = np.where(has_pos, (sim * pos).sum(axis=1) / np.maximum(n_pos, 1), 0.0)
    per_anchor = np.where(has_pos, lse - pos_mean, 0.0)
    value, factor = _reduce(float(per_anchor.sum()), n, reduction)

    def backward(g):
        soft = exp / np.where(denom > 0, denom, 1.0)
        gs = (soft - pos / np.maximum(n_pos, 1)[:, None]) * has_pos[:, None]
        gs = gs * (float(g) * factor * inv_tau)
        return ((gs + gs.T) @ z.data,)

    return Tensor._from_op(np.array(value), (z,), backward)


def scl_loss(z: Tensor, labels, tau: float = 1.0, reduction: str = "sum") -> Tensor:
    """Supervised contrastive loss over a batch of unit-norm embeddings."""
    if not tau > 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    return _weighted_contrastive(z, labels, np.zeros(len(labels)), 1.0 / tau, reduction)


def class_weights(labels) -> dict[int, float]:
    """Reciprocal class counts within the batch."""
    counts = Counter(int(y) for y in np.asarray(labels).ravel())
    if not counts:
        raise ConfigurationError("class_weights needs a non-empty batch")
    return {c: 1.0 / k for c, k in counts.items()}


def crcl_loss(z: Tensor, labels, weights: dict[int, float] | None = None, reduction: str = "sum") -> Tensor:
    """Class-weighted contrastive loss (no temperature).

    ``weights`` overrides the per-class denominator weights; by default they
    are the reciprocal batch counts from :func:`class_weights`.
    """
    labels = np.asarray(labels)
    w = class_weights(labels) if weights is None else weights
    log_w = np.log(np.array([w[int(y)] for y in labels], dtype=np.float64))
    return _weighted_contrastive(z, labels, log_w, 1.0, reduction)


def crcl_oracle(z, labels) -> float:
    """Class-weighted contrastive loss by plain nested loops.

    Independent check for :func:`crcl_loss`; no vectorization and no
    log-sum-exp shift, so keep batches small.
    """
    z = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    labels = [int(y) for y in labels]
    n = len(labels)
    counts = {c: labels.count(c) for c in set(labels)}
    total = 0.0
    for i in range(n):
        positives = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        denom = 0.0
        for a in range(n):
            if a != i:
                dot = sum(z[i][d] * z[a][d] for d in range(len(z[i])))
                denom += (1.0 / counts[labels[a]]) * math.exp(dot)
        acc = 0.0
        for p in positives:
            dot = sum(z[i][d] * z[p][d] for d in range(len(z[i])))
            acc += math.log(math.exp(dot) / denom)
        total += -acc / len(positives)
    return total


def class_prior(labels, n_classes: int) -> np.ndarray:
    """Empirical class frequencies; every class must be present."""
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=n_classes).astype(np.float64)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ConfigurationError(f"classes {missing} have no training samples; prior would be zero")
    return counts / counts.sum()


def _softmax_ce(logits: Tensor, labels, shift: np.ndarray, reduction: str) -> Tensor:
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [B, C], got {logits.shape}")
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"labels shape {labels.shape} does not match {logits.shape[0]} rows")
    adj = logits.data + shift[None, :]
    adj = adj - adj.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(adj).sum(axis=1))
    rows = np.arange(len(labels))
    nll = log_norm - adj[rows, labels]
    value, factor = _reduce(float(nll.sum()), len(labels), reduction)

    def backward(g):
        soft = np.exp(adj - log_norm[:, None])
        soft[rows, labels] -= 1.0
        return (soft * (float(g) * factor),)

    return Tensor._from_op(np.array(value), (logits,), backward)


def logit_adjusted_ce(logits: Tensor, labels, prior, tau: float = 1.0, reduction: str = "sum") -> Tensor:
    """Cross-entropy on logits shifted by ``tau * log(prior)``."""
    prior = np.asarray(prior, dtype=np.float64)
    if logits.ndim == 2 and prior.shape != (logits.shape[1],):
        raise DimensionError(f"prior has {prior.shape} entries, logits have {logits.shape[1]} classes")
    if np.any(prior <= 0):
        raise ConfigurationError("prior entries must be strictly positive")
    if abs(prior.sum() - 1.0) > 1e-12:
        raise ConfigurationError(f"prior must sum to 1, sums to {prior.sum()!r}")
    return _softmax_ce(logits, labels, tau * np.log(prior), reduction)


def cross_entropy(logits: Tensor, labels, reduction: str = "sum") -> Tensor:
    return _softmax_ce(logits, labels, np.zeros(logits.shape[1]), reduction)


def composite_loss(crcl: Tensor, lce: Tensor) -> Tensor:
    """Unweighted sum of the contrastive and classifier terms."""
    return crcl + lce
