"""Frozen affine block with a parallel low-rank residual adaptor.

Batches are row-major, so for inputs ``X`` of shape ``(n, d)``::

    F = X @ W_b.T + b + relu(X @ W_down) @ W_up

which is the per-row ``W_b x + b + W_up^T relu(W_down^T x)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import blas

from .numerics import ShapeError


class DivergenceError(FloatingPointError):
    """A gradient or parameter became non-finite; the run cannot continue."""


@dataclass
class FrozenBackbone:
    weight: np.ndarray
    bias: np.ndarray
    _identity: bool = field(default=False, init=False, repr=False)

    def __post_init__(self):
        d = self.bias.shape[0]
        if self.weight.shape != (d, d):
            raise ShapeError(f"backbone weight must be {(d, d)}, got {self.weight.shape}")
        self.refresh()

    @classmethod
    def identity(cls, d: int) -> "FrozenBackbone":
        return cls(np.eye(d), np.zeros(d))

    @property
    def dim(self) -> int:
        return self.bias.shape[0]

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size

    def refresh(self):
        # Exact identity/zero lets apply() skip a d x d product without changing a single bit.
        W = self.weight
        self._identity = bool(not np.any(self.bias) and np.all(np.diagonal(W) == 1.0)
                              and np.count_nonzero(W) == self.dim)

    def apply(self, X: np.ndarray) -> np.ndarray:
        if self._identity:
            return X + 0.0
        return X @ self.weight.T + self.bias

    def copy(self) -> "FrozenBackbone":
        return FrozenBackbone(self.weight.copy(), self.bias.copy())


@dataclass
class LowRankAdaptor:
    w_down: np.ndarray  # (d, d // r)
    w_up: np.ndarray    # (d // r, d)
    r: int

    def __post_init__(self):
        d, h = self.w_down.shape
        if self.r < 1 or d % self.r or h != d // self.r:
            raise ShapeError(f"w_down shape {self.w_down.shape} inconsistent with r={self.r}")
        if self.w_up.shape != (h, d):
            raise ShapeError(f"w_up must be {(h, d)}, got {self.w_up.shape}")

    @classmethod
    def initialize(cls, d: int, r: int, rng: np.random.Generator) -> "LowRankAdaptor":
        """Fan-in scaled uniform down-projection; the up-projection starts at exactly zero."""
        if r < 1 or d % r:
            raise ShapeError(f"reduction ratio r={r} must divide d={d}")
        h = d // r
        bound = 1.0 / np.sqrt(d)
        w_down = rng.uniform(-bound, bound, size=(d, h))
        return cls(w_down=w_down, w_up=np.zeros((h, d)), r=r)

    @property
    def dim(self) -> int:
        return self.w_down.shape[0]

    @property
    def hidden(self) -> int:
        return self.w_down.shape[1]

    @property
    def n_params(self) -> int:
        return self.w_down.size + self.w_up.size

    def copy(self) -> "LowRankAdaptor":
        return LowRankAdaptor(self.w_down.copy(), self.w_up.copy(), self.r)


@dataclass
class ForwardCache:
    x: np.ndarray  # block inputs (n, d)
    z: np.ndarray  # x @ w_down
    a: np.ndarray  # relu(z)
    f: np.ndarray  # block outputs
    w_up: np.ndarray


@dataclass
class AdaptorGradients:
    g_down: np.ndarray
    g_up: np.ndarray
    g_backbone: np.ndarray | None = None

    def is_finite(self) -> bool:
        arrays = [self.g_down, self.g_up]
        if self.g_backbone is not None:
            arrays.append(self.g_backbone)
        # A finite sum proves every entry is finite; only fall back to the elementwise scan otherwise.
        return all(np.isfinite(g.sum()) or bool(np.all(np.isfinite(g))) for g in arrays)


def forward(backbone: FrozenBackbone, adaptor: LowRankAdaptor, x) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the adapted block on one vector ``(d,)`` or a batch ``(n, d)``."""
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X2 = X[None, :] if single else X
    if X2.ndim != 2 or X2.shape[1] != backbone.dim or adaptor.dim != backbone.dim:
        raise ShapeError(f"input shape {X.shape} incompatible with block dim {backbone.dim}")
    Z = X2 @ adaptor.w_down
    A = np.maximum(Z, 0.0)
    F = backbone.apply(X2) + A @ adaptor.w_up
    cache = ForwardCache(x=X2, z=Z, a=A, f=F, w_up=adaptor.w_up)
    return (F[0] if single else F), cache


def _upstream(cache: ForwardCache, upstream) -> np.ndarray:
    G = np.asarray(upstream, dtype=np.float64)
    if G.ndim == 1:
        G = G[None, :]
    if G.shape != cache.f.shape:
        raise ShapeError(f"expected {cache.f.shape[0]} upstream gradients of length "
                         f"{cache.f.shape[1]}, got shape {G.shape}")
    return G


def backward(cache: ForwardCache, upstream) -> AdaptorGradients:
    """Adaptor gradients summed over the batch, given dL/dF row by row."""
    G = _upstream(cache, upstream)
    g_up = cache.a.T @ G
    g_z = (G @ cache.w_up.T) * (cache.z > 0)
    g_down = cache.x.T @ g_z
    return AdaptorGradients(g_down=g_down, g_up=g_up)


def full_finetune_backward(cache: ForwardCache, upstream) -> AdaptorGradients:
    grads = backward(cache, upstream)
    grads.g_backbone = _upstream(cache, upstream).T @ cache.x
    return grads


def sgd_step(adaptor: LowRankAdaptor, grads: AdaptorGradients, lr: float) -> LowRankAdaptor:
    if grads.g_down.shape != adaptor.w_down.shape or grads.g_up.shape != adaptor.w_up.shape:
        raise ShapeError("gradient shapes do not match the adaptor")
    if not grads.is_finite():
        raise DivergenceError("non-finite adaptor gradient")
    return LowRankAdaptor(w_down=adaptor.w_down - lr * grads.g_down,
                          w_up=adaptor.w_up - lr * grads.g_up, r=adaptor.r)


def sgd_step_backbone(backbone: FrozenBackbone, grads: AdaptorGradients, lr: float) -> FrozenBackbone:
    """Full-finetune only: move the backbone weight as well."""
    if grads.g_backbone is None or grads.g_backbone.shape != backbone.weight.shape:
        raise ShapeError("missing or mis-shaped backbone gradient")
    if not grads.is_finite():
        raise DivergenceError("non-finite backbone gradient")
    return FrozenBackbone(backbone.weight - lr * grads.g_backbone, backbone.bias.copy())


def _rank_update(w: np.ndarray, left: np.ndarray, right: np.ndarray, lr: float):
    """``w -= lr * left.T @ right`` in one BLAS call, overwriting ``w``.

    A C-ordered ``w`` is the Fortran-ordered ``w.T``, so the update is issued
    on the transpose: ``w.T += -lr * right.T @ left``.
    """
    out = blas.dgemm(alpha=-lr, a=right, b=left, trans_a=1, beta=1.0, c=w.T, overwrite_c=1)
    if not np.shares_memory(out, w):
        w[...] = out.T


def fused_sgd_step(cache: ForwardCache, upstream, adaptor: LowRankAdaptor, lr: float,
                   backbone: FrozenBackbone | None = None):
    """Apply ``backward`` + ``sgd_step`` (and the backbone step if given) in place.

    Only the small per-row factors are formed; each weight matrix is written
    once. Agrees with the two-stage path up to floating-point rounding.
    """
    G = _upstream(cache, upstream)
    if cache.w_up is not adaptor.w_up:
        raise ValueError("cache was not produced by this adaptor")
    g_z = (G @ adaptor.w_up.T) * (cache.z > 0)
    touched = [adaptor.w_up, adaptor.w_down]
    _rank_update(adaptor.w_up, cache.a, G, lr)
    _rank_update(adaptor.w_down, cache.x, g_z, lr)
    if backbone is not None:
        _rank_update(backbone.weight, G, cache.x, lr)
        backbone.refresh()
        touched.append(backbone.weight)
    if not all(np.isfinite(w.sum()) for w in touched):
        raise DivergenceError("non-finite parameters after an SGD step")
