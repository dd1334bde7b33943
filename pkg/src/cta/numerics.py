"""Small dense-array helpers and a seeded, splittable random source.

Vectors and matrices are plain float64 numpy arrays. Feature batches are
stored row-wise, shape ``(n, d)``.
"""
from __future__ import annotations

import zlib
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


def as_vector(x, name: str = "x") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def as_matrix(m, name: str = "M") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] == 0:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def matvec(M, x) -> np.ndarray:
    M = as_matrix(M, "M")
    x = as_vector(x, "x")
    if M.shape[1] != x.shape[0]:
        raise ShapeError(f"cannot multiply {M.shape} matrix by length-{x.shape[0]} vector")
    return M @ x


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise ValueError("step size h must be positive")
    theta = np.array(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(theta))
        flat[i] = orig - h
        fm = float(f(theta))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(theta.shape)


def make_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Philox generator keyed by ``seed`` and an optional path of sub-stream keys.

    Philox is counter-based, so a given (seed, keys) pair yields the same
    stream on every platform and independently of how many other streams
    were drawn before it.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    words = [int(seed)]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def relative_error(a, b, floor: float = 1e-12) -> float:
    """max |a-b| / max(|b|, floor), the convention used by the gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(b))) if b.size else 0.0, floor)
    return float(np.max(np.abs(a - b))) / scale if a.size else 0.0
