"""Scikit-learn style estimator wrapping the continual test-time adaptation loop.

``fit`` consumes clean source features and precomputes the reference
statistics; ``step``/``partial_fit`` consume one test batch at a time,
predicting first and adapting afterwards; ``transform`` and
``predict_proba`` apply the current adapted model without changing it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .adaptor import FrozenBackbone, LowRankAdaptor, forward, fused_sgd_step
from .alignment import (ClassBank, assign_labels, image_loss, object_loss,
                        split_by_label, total_loss_and_grads, update_class_bank)
from .controller import SkipDecision, make_skip_state, observe
from .ctastats import ReferenceStats
from .numerics import make_rng
from .stats import EmaMeanTracker, compute_stats, ema_update, in_domain_gap

METHODS = ("direct", "full", "ours", "ours-skip", "evenly-skip")


@dataclass
class StepOutcome:
    probs: np.ndarray        # head output for each object, computed before any update
    labels: np.ndarray       # assigned class, -1 when filtered as background
    l_img: float
    l_obj: float
    decision: SkipDecision
    updated: bool

    @property
    def l_total(self) -> float:
        return self.l_img + self.l_obj


class ContinualAdapter(BaseEstimator):
    """Frozen block + low-rank adaptor adapted online by EMA feature alignment.

    Parameters
    ----------
    method : {"direct", "full", "ours", "ours-skip", "evenly-skip"}
        ``direct`` never updates, ``ours`` updates the adaptor every step,
        ``full`` also updates the backbone, ``ours-skip`` consults the skip
        criteria and ``evenly-skip`` updates on every ``evenly_n``-th step.
    head : callable
        Maps a feature batch ``(n, d)`` to class probabilities ``(n, C+1)``
        with the background probability last.
    """

    def __init__(self, head: Callable[[np.ndarray], np.ndarray] | None = None, method: str = "ours",
                 rank_ratio: int = 32, lr: float = 1e-3, alpha: float = 0.01, tau1: float = 1.1,
                 tau2: float = 1.05, bg_threshold: float = 0.5, evenly_n: int = 10,
                 n_pairs: int = 10, random_state: int = 0):
        self.head = head
        self.method = method
        self.rank_ratio = rank_ratio
        self.lr = lr
        self.alpha = alpha
        self.tau1 = tau1
        self.tau2 = tau2
        self.bg_threshold = bg_threshold
        self.evenly_n = evenly_n
        self.n_pairs = n_pairs
        self.random_state = random_state

    # ------------------------------------------------------------ fitting

    def fit(self, X_image, X_objects, y_objects):
        """Compute reference statistics from clean source features and reset the adaptor."""
        X_image = check_array(X_image, dtype=np.float64)
        X_objects = check_array(X_objects, dtype=np.float64)
        y = np.asarray(y_objects, dtype=np.int64)
        if len(y) != len(X_objects):
            raise ValueError("X_objects and y_objects have different lengths")
        n_classes = int(y.max()) + 1
        classes = [compute_stats(X_objects[y == k]) for k in range(n_classes)]
        gap = in_domain_gap(X_image, make_rng(self.random_state, "dkl_in"), self.n_pairs)
        return self.fit_reference(ReferenceStats(compute_stats(X_image), classes, gap))

    def fit_reference(self, reference: ReferenceStats):
        """Start from precomputed statistics, e.g. loaded from a ``ctastats`` file."""
        self._validate_params()
        d = reference.dim
        self.reference_ = reference
        self.n_features_in_ = d
        self.backbone_ = FrozenBackbone.identity(d)
        self.adaptor_ = LowRankAdaptor.initialize(d, self.rank_ratio,
                                                  make_rng(self.random_state, "adaptor"))
        self.image_ema_ = EmaMeanTracker.from_stats(reference.image, self.alpha)
        self.bank_ = ClassBank.from_train_stats(reference.classes, self.alpha)
        self.skip_state_ = make_skip_state(reference.dkl_in, self.tau1, self.tau2)
        self.n_steps_ = 0
        self.n_backward_ = 0
        return self

    def _validate_params(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.head is None:
            raise ValueError("a classification head is required")
        if not self.lr >= 0 or not 0 < self.alpha <= 1:
            raise ValueError("lr must be >= 0 and alpha in (0, 1]")
        if self.method == "evenly-skip" and not self.evenly_n >= 1:
            raise ValueError("evenly_n must be a positive integer")

    # ------------------------------------------------------------ inference

    def transform(self, X):
        check_is_fitted(self, "adaptor_")
        X = check_array(X, dtype=np.float64)
        F, _ = forward(self.backbone_, self.adaptor_, X)
        return F

    def predict_proba(self, X):
        return self.head(self.transform(X))

    def predict(self, X):
        """Assigned class per row, -1 for background."""
        return assign_labels(self.predict_proba(X), self.bg_threshold)

    # ------------------------------------------------------------ adaptation

    def _wants_update(self, decision: SkipDecision) -> bool:
        if self.method in ("ours", "full"):
            return True
        if self.method == "ours-skip":
            return decision.update
        if self.method == "evenly-skip":
            return self.n_steps_ % self.evenly_n == 0
        return False

    def step(self, image_features, object_features) -> StepOutcome:
        """Predict on one test batch, then update statistics and (maybe) the weights."""
        check_is_fitted(self, "adaptor_")
        X_img = check_array(image_features, dtype=np.float64)
        X_obj = np.asarray(object_features, dtype=np.float64).reshape(-1, self.n_features_in_)
        B = len(X_img)
        F, cache = forward(self.backbone_, self.adaptor_, np.vstack([X_img, X_obj]))
        F_img, F_obj = F[:B], F[B:]
        probs = self.head(F_obj) if len(F_obj) else np.empty((0, self.bank_.n_classes + 1))
        labels = assign_labels(probs, self.bg_threshold) if len(F_obj) else np.empty(0, np.int64)

        self.image_ema_ = ema_update(self.image_ema_, F_img.mean(axis=0))
        self.bank_ = update_class_bank(self.bank_, split_by_label(F_obj, labels))
        l_img = image_loss(self.reference_.image, self.image_ema_)
        l_obj = object_loss(self.bank_)
        if not (math.isfinite(l_img) and math.isfinite(l_obj)):
            raise FloatingPointError(f"alignment loss diverged at step {self.n_steps_}")
        decision, self.skip_state_ = observe(self.skip_state_, l_img)

        updated = self._wants_update(decision)
        if updated:
            kept = labels >= 0
            out = total_loss_and_grads(self.reference_.image, self.bank_, self.image_ema_,
                                       F_img, F_obj[kept], labels[kept])
            upstream = np.zeros_like(F)
            upstream[:B] = out.image_grads
            upstream[B:][kept] = out.object_grads
            fused_sgd_step(cache, upstream, self.adaptor_, self.lr,
                           self.backbone_ if self.method == "full" else None)
            self.n_backward_ += 1
        self.n_steps_ += 1
        return StepOutcome(probs=probs, labels=labels, l_img=l_img, l_obj=l_obj,
                           decision=decision, updated=updated)

    def partial_fit(self, image_features, object_features):
        self.step(image_features, object_features)
        return self
