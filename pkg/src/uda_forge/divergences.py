"""Impurity, entropy and divergence functions with derivatives w.r.t. probabilities.

Every function accepts a single distribution (shape ``(c,)``) or a batch of
row distributions (shape ``(n, c)``) and reduces along the last axis.
Gradients are taken with respect to the probability vector only; chaining
through softmax happens in :mod:`uda_forge.model`.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError

LOG_FLOOR = 1e-12
PROB_TOL = 1e-9


def check_prob(p, tol: float = PROB_TOL) -> np.ndarray:
    """Validate that ``p`` holds probability rows and return it as float64."""
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0 or p.shape[-1] == 0:
        raise DomainError("empty probability vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise DomainError("probabilities must be finite and non-negative")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise DomainError("probabilities must sum to 1")
    return p


def _same_shape(p: np.ndarray, q: np.ndarray) -> None:
    if p.shape != q.shape:
        raise ShapeError(f"distribution shapes differ: {p.shape} vs {q.shape}")


def _floored_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, LOG_FLOOR))


def _floored_inv(p: np.ndarray) -> np.ndarray:
    # derivative of log(max(p, floor)); zero on the flat part
    out = np.zeros_like(p)
    np.divide(1.0, p, out=out, where=p > LOG_FLOOR)
    return out


def gini(p):
    """Gini impurity ``1 - sum p_i^2``."""
    p = np.asarray(p, dtype=np.float64)
    return 1.0 - np.sum(p * p, axis=-1)


def gini_grad(p) -> np.ndarray:
    return -2.0 * np.asarray(p, dtype=np.float64)


def gibbs_entropy(p):
    """Shannon/Gibbs entropy in nats, with ``0 ln 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    logs = np.zeros_like(p)
    np.log(p, out=logs, where=p > 0)
    return -np.sum(p * logs, axis=-1)


def kl(p, q):
    """``KL(p || q)``; terms with ``p_i = 0`` contribute zero."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _same_shape(p, q)
    pos = p > 0
    terms = np.zeros_like(p)
    np.multiply(p, _floored_log(p) - _floored_log(q), out=terms, where=pos)
    return np.sum(terms, axis=-1)


def kl_grad_q(p, q) -> np.ndarray:
    """Derivative of ``KL(p || q)`` with respect to ``q``: ``-p / q``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _same_shape(p, q)
    return -p * _floored_inv(q)


def kl_grad_p(p, q) -> np.ndarray:
    """Derivative of ``KL(p || q)`` with respect to ``p``: ``ln(p/q) + 1``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _same_shape(p, q)
    return _floored_log(p) - _floored_log(q) + 1.0


def smooth_labels(labels, c: int, eps: float) -> np.ndarray:
    """Label-smoothed one-hot targets ``(1 - eps) * onehot + eps / c``."""
    labels = np.atleast_1d(np.asarray(labels))
    if not 0.0 <= eps < 1.0:
        raise DomainError(f"label smoothing must be in [0, 1), got {eps}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range for {c} classes")
    y = np.full((labels.size, c), eps / c)
    y[np.arange(labels.size), labels.astype(np.int64)] += 1.0 - eps
    return y


def cross_entropy_smoothed(label, p, eps: float = 0.0):
    """Cross-entropy ``-sum y_i ln p_i`` against smoothed targets.

    ``label`` may be an int (with ``p`` of shape ``(c,)``) or an array of
    labels with ``p`` of shape ``(n, c)``; the per-sample values are returned.
    """
    p = np.asarray(p, dtype=np.float64)
    y = smooth_labels(label, p.shape[-1], eps)
    out = -np.sum(y * _floored_log(np.atleast_2d(p)), axis=-1)
    return float(out[0]) if p.ndim == 1 else out


def cross_entropy_smoothed_grad(label, p, eps: float = 0.0) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    y = smooth_labels(label, p.shape[-1], eps)
    g = -y * _floored_inv(np.atleast_2d(p))
    return g[0] if p.ndim == 1 else g
