"""Image-level and class-wise object-level feature alignment losses.

The test covariance is approximated by the train covariance, so every KL
here reduces to half a squared Mahalanobis distance between the train mean
and an EMA-tracked test mean.

Gradients follow an update-then-differentiate convention: the EMA trackers
have already absorbed the current batch, and only the current batch's
``alpha * mean(batch)`` term carries gradient (the history is a constant).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import ShapeError
from .stats import EmaMeanTracker, GaussianStats, ema_update, mahalanobis_half

WEIGHT_FLOOR = 0.01
SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class RoiPrediction:
    feature: np.ndarray
    probs: np.ndarray  # [p_0 .. p_{C-1}, p_bg]

    def __post_init__(self):
        p = self.probs
        if p.ndim != 1 or p.shape[0] < 2:
            raise ShapeError("probs must hold C foreground entries plus background")
        if np.any(p < 0) or abs(float(p.sum()) - 1.0) > SIMPLEX_TOL:
            raise ValueError("probs are not on the probability simplex")


def assign_labels(probs: np.ndarray, bg_threshold: float = 0.5) -> np.ndarray:
    """Vectorised class assignment: argmax foreground class, or -1 when filtered as background.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class index.
    """
    if not 0.0 < bg_threshold < 1.0:
        raise ValueError("bg_threshold must lie in (0, 1)")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise ShapeError(f"probs must be (n, C+1), got {probs.shape}")
    labels = np.argmax(probs[:, :-1], axis=1)
    return np.where(probs[:, -1] < bg_threshold, labels, -1)


def assign_and_filter(rois: list[RoiPrediction], bg_threshold: float = 0.5) -> dict[int, list[np.ndarray]]:
    if not rois:
        return {}
    labels = assign_labels(np.stack([r.probs for r in rois]), bg_threshold)
    out: dict[int, list[np.ndarray]] = {}
    for roi, k in zip(rois, labels):
        if k >= 0:
            out.setdefault(int(k), []).append(roi.feature)
    return out


@dataclass
class ClassBank:
    train_stats: list[GaussianStats]
    emas: list[EmaMeanTracker]
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if len(self.train_stats) != len(self.emas):
            raise ShapeError("one EMA tracker per class is required")
        if self.counts is None:
            self.counts = np.zeros(len(self.train_stats), dtype=np.int64)

    @classmethod
    def from_train_stats(cls, train_stats: list[GaussianStats], alpha: float) -> "ClassBank":
        return cls(list(train_stats), [EmaMeanTracker.from_stats(s, alpha) for s in train_stats])

    @property
    def n_classes(self) -> int:
        return len(self.train_stats)


def update_class_bank(bank: ClassBank, assigned: dict[int, list[np.ndarray]] | dict[int, np.ndarray]) -> ClassBank:
    """Add this step's assignments to the counts and move each observed class's EMA once."""
    emas = list(bank.emas)
    counts = bank.counts.copy()
    for k, feats in assigned.items():
        F = np.asarray(feats, dtype=np.float64)
        if F.ndim == 1:
            F = F[None, :]
        if len(F) == 0:
            continue
        if not 0 <= k < bank.n_classes:
            raise ShapeError(f"class index {k} outside [0, {bank.n_classes})")
        counts[k] += len(F)
        emas[k] = ema_update(emas[k], F.mean(axis=0))
    return replace(bank, emas=emas, counts=counts)


def class_weights(bank: ClassBank) -> dict[int, float]:
    seen = np.flatnonzero(bank.counts > 0)
    if seen.size == 0:
        return {}
    top = float(bank.counts[seen].max())
    return {int(k): float(np.log(top / bank.counts[k])) + WEIGHT_FLOOR for k in seen}


def image_loss(train: GaussianStats, test_mean: EmaMeanTracker) -> float:
    if train.mean.shape != test_mean.mean.shape:
        raise ShapeError("train and test dimensions differ")
    return mahalanobis_half(train.mean, test_mean.mean, train.var)


def object_loss(bank: ClassBank) -> float:
    total = 0.0
    for k, w in class_weights(bank).items():
        s = bank.train_stats[k]
        total += w * mahalanobis_half(s.mean, bank.emas[k].mean, s.var)
    return total


@dataclass
class AlignmentOutput:
    l_img: float
    l_obj: float
    image_grads: np.ndarray   # (B, d), one row per image feature
    object_grads: np.ndarray  # (n, d), one row per assigned object feature

    @property
    def l_total(self) -> float:
        return self.l_img + self.l_obj


def total_loss_and_grads(train: GaussianStats, bank: ClassBank, image_ema: EmaMeanTracker,
                         image_features: np.ndarray, object_features: np.ndarray,
                         object_labels: np.ndarray) -> AlignmentOutput:
    """Loss and dL/df for a batch whose statistics the trackers already contain.

    ``object_features``/``object_labels`` hold only the features kept by the
    background filter, with their assigned class.
    """
    image_features = np.asarray(image_features, dtype=np.float64)
    if image_features.ndim != 2 or len(image_features) == 0:
        raise ValueError("batch must contain at least one image feature")
    B = len(image_features)
    alpha = image_ema.alpha
    l_img = image_loss(train, image_ema)
    g_img = (alpha / B) * (image_ema.mean - train.mean) / train.var
    image_grads = np.broadcast_to(g_img, image_features.shape).copy()

    object_features = np.asarray(object_features, dtype=np.float64).reshape(-1, train.dim)
    object_labels = np.asarray(object_labels, dtype=np.int64)
    object_grads = np.zeros_like(object_features)
    weights = class_weights(bank)
    for k in np.unique(object_labels):
        rows = object_labels == k
        s = bank.train_stats[k]
        ema = bank.emas[k]
        object_grads[rows] = weights[int(k)] * (ema.alpha / rows.sum()) * (ema.mean - s.mean) / s.var
    return AlignmentOutput(l_img=l_img, l_obj=object_loss(bank),
                           image_grads=image_grads, object_grads=object_grads)


def split_by_label(features: np.ndarray, labels: np.ndarray) -> dict[int, np.ndarray]:
    """Group kept features (label >= 0) by class."""
    return {int(k): features[labels == k] for k in np.unique(labels[labels >= 0])}
