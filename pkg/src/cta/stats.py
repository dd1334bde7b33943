"""Gaussian summaries of feature sets, EMA mean tracking and diagonal KL."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numerics import ShapeError, as_vector

VAR_FLOOR = 1e-6
DEFAULT_REFERENCE_SAMPLES = 2000


@dataclass(frozen=True)
class GaussianStats:
    """Diagonal Gaussian: per-dimension mean and (floored) population variance."""

    mean: np.ndarray
    var: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def inv_var(self) -> np.ndarray:
        return 1.0 / self.var


def _as_feature_matrix(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        X = np.asarray(features, dtype=np.float64)
    else:
        rows = [np.asarray(f, dtype=np.float64) for f in features]
        if not rows:
            raise ValueError("need at least 2 feature vectors, got 0")
        if len({r.shape for r in rows}) != 1:
            raise ShapeError("feature vectors have inconsistent lengths")
        X = np.stack(rows)
    if X.ndim != 2:
        raise ShapeError(f"features must form an (n, d) array, got shape {X.shape}")
    return X


def compute_stats(features, var_floor: float = VAR_FLOOR) -> GaussianStats:
    X = _as_feature_matrix(features)
    if X.shape[0] < 2:
        raise ValueError(f"need at least 2 feature vectors, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite entries")
    mean = X.mean(axis=0)
    var = np.maximum(X.var(axis=0), var_floor)
    return GaussianStats(mean=mean, var=var, count=X.shape[0])


@dataclass(frozen=True)
class EmaMeanTracker:
    """Running test-domain mean, started at the train mean."""

    mean: np.ndarray
    alpha: float

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")

    @classmethod
    def from_stats(cls, stats: GaussianStats, alpha: float) -> "EmaMeanTracker":
        return cls(mean=stats.mean.copy(), alpha=alpha)


def ema_update(tracker: EmaMeanTracker, batch_mean) -> EmaMeanTracker:
    m = as_vector(batch_mean, "batch_mean")
    if m.shape != tracker.mean.shape:
        raise ShapeError(f"batch_mean has length {m.shape[0]}, tracker has {tracker.mean.shape[0]}")
    a = tracker.alpha
    return replace(tracker, mean=(1.0 - a) * tracker.mean + a * m)


def kl_diag_gaussian(P: GaussianStats, Q: GaussianStats) -> float:
    """KL(N(mu_P, diag var_P) || N(mu_Q, diag var_Q))."""
    if P.mean.shape != Q.mean.shape:
        raise ShapeError(f"dimension mismatch: {P.dim} vs {Q.dim}")
    # (r - 1) - ln r written with log1p so equal variances contribute exactly zero
    u = (P.var - Q.var) / Q.var
    var_terms = u - np.log1p(u)
    diff = P.mean - Q.mean
    return 0.5 * (max(float(np.sum(var_terms)), 0.0) + float(np.sum(diff * diff / Q.var)))


def mahalanobis_half(mean_a, mean_b, var) -> float:
    """0.5 * sum((a-b)^2 / var): the KL between two Gaussians sharing ``var``."""
    diff = np.asarray(mean_a) - np.asarray(mean_b)
    return 0.5 * float(np.sum(diff * diff / var))


def in_domain_gap(train_features, rng: np.random.Generator, n_pairs: int = 10,
                  var_floor: float = VAR_FLOOR) -> float:
    """Average KL between the two halves of random disjoint splits of the train features."""
    X = _as_feature_matrix(train_features)
    n = X.shape[0]
    if n < 4:
        raise ValueError(f"in-domain gap needs at least 4 features, got {n}")
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    half = n // 2
    total = 0.0
    for _ in range(n_pairs):
        perm = rng.permutation(n)
        a = compute_stats(X[perm[:half]], var_floor)
        b = compute_stats(X[perm[half:2 * half]], var_floor)
        total += kl_diag_gaussian(a, b)
    return total / n_pairs
