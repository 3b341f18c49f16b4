"""Dense float64 helpers shared across the package."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, ZeroNormError

DTYPE = np.float64


def as_vector(x, name="x") -> np.ndarray:
    v = np.asarray(x, dtype=DTYPE)
    if v.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def mat_vec(M, x) -> np.ndarray:
    """Dense matrix-vector product with a shape check."""
    M = np.asarray(M, dtype=DTYPE)
    x = as_vector(x)
    if M.ndim != 2 or M.shape[1] != x.shape[0]:
        raise DimensionError(f"cannot multiply {M.shape} by {x.shape}")
    return M @ x


def cosine(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"cosine of {a.shape} and {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine undefined for zero-norm input")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise cosine between rows of ``A`` and rows of ``B``."""
    return unit_rows(A) @ unit_rows(B).T


def unit_rows(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=DTYPE)
    n = np.linalg.norm(X, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ZeroNormError("cannot normalise a zero-norm row")
    return X / n


def seeded_rng(seed) -> np.random.Generator:
    """PCG64 generator; streams are identical across runs and platforms."""
    return np.random.Generator(np.random.PCG64(seed))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def log_sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    return -np.logaddexp(0.0, -x)


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=DTYPE)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def logsumexp(x, axis=-1):
    x = np.asarray(x, dtype=DTYPE)
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)
