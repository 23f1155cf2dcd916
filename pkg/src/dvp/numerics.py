"""Elementary numeric primitives: cosine scores, softmax, NLL, gradient checks.

Vectors and matrices are plain float64 numpy arrays.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DomainError, NumericError, ShapeError

DEFAULT_TAU = 0.01


def as_vector(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DomainError("vector has non-finite entries")
    return v


def cosine_similarity(u, v, tau: float = DEFAULT_TAU) -> float:
    """Cosine of the angle between ``u`` and ``v`` divided by temperature ``tau``."""
    u = as_vector(u)
    v = as_vector(v)
    if u.shape != v.shape:
        raise ShapeError(f"dimension mismatch: {u.size} vs {v.size}")
    if tau <= 0:
        raise DomainError("tau must be positive")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DomainError("cosine similarity undefined for zero-norm input")
    c = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, c)) / tau


def cosine_matrix(Z: np.ndarray, E: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Row-wise cosine scores between embeddings ``Z`` (n, d) and ``E`` (m, d)."""
    zn = np.linalg.norm(Z, axis=1, keepdims=True)
    en = np.linalg.norm(E, axis=1, keepdims=True)
    if np.any(zn == 0) or np.any(en == 0):
        raise DomainError("cosine similarity undefined for zero-norm input")
    return (Z / zn) @ (E / en).T / tau


def logsumexp(x, axis=-1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax; works on a vector or along ``axis`` of a batch."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ShapeError("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise DomainError("softmax input has non-finite entries")
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def nll(probs, label: int) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise IndexError(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(p[label]))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample NLL of softmax(logits), computed as log-sum-exp minus the true logit."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    return logsumexp(logits, axis=1) - logits[np.arange(len(labels)), labels]


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any array shape)."""
    if h <= 0:
        raise DomainError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        g[i] = (fp - fm) / (2 * h)
    return grad
