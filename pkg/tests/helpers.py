"""Shared fixtures for gradient checks: random adaptor instances and quadratic losses."""
import numpy as np

from cta.adaptor import FrozenBackbone, LowRankAdaptor, forward
from cta.alignment import (ClassBank, image_loss, object_loss, split_by_label, total_loss_and_grads,
                           update_class_bank)
from cta.numerics import make_rng
from cta.stats import EmaMeanTracker, GaussianStats, ema_update


def random_instance(seed, d, r, n=3, backbone="random"):
    rng = make_rng(seed, "grad-instance")
    h = d // r
    ad = LowRankAdaptor(rng.standard_normal((d, h)) / np.sqrt(d), rng.standard_normal((h, d)) * 0.5, r)
    if backbone == "identity":
        bb = FrozenBackbone.identity(d)
    else:
        bb = FrozenBackbone(np.eye(d) + 0.3 * rng.standard_normal((d, d)), rng.standard_normal(d))
    X = rng.standard_normal((n, d))
    Q = rng.standard_normal((n, d))
    c = rng.uniform(0.5, 2.0, size=(n, d))
    return bb, ad, X, Q, c


def quad_loss(F, Q, c):
    return float(np.sum(Q * F) + 0.5 * np.sum(c * F * F))


def quad_upstream(F, Q, c):
    return Q + c * F


def loss_of_params(bb, ad, X, Q, c, which):
    """Scalarised loss as a function of one flattened parameter block."""
    d, h = ad.w_down.shape

    def f(theta):
        wd, wu, wb = ad.w_down, ad.w_up, bb.weight
        if which == "down":
            wd = theta.reshape(d, h)
        elif which == "up":
            wu = theta.reshape(h, d)
        else:
            wb = theta.reshape(d, d)
        F, _ = forward(FrozenBackbone(wb, bb.bias), LowRankAdaptor(wd, wu, ad.r), X)
        return quad_loss(F, Q, c)
    return f


def pipeline(seed, d=5, C=3, B=4, n_obj=9):
    """Previous trackers plus a batch; the loss is a function of raw batch features."""
    rng = make_rng(seed, "pipeline")
    train = GaussianStats(rng.standard_normal(d), rng.uniform(0.5, 2.0, d), 100)
    cls = [GaussianStats(rng.standard_normal(d), rng.uniform(0.5, 2.0, d), 50) for _ in range(C)]
    bank = ClassBank.from_train_stats(cls, 0.05)
    bank.counts[:] = rng.integers(1, 40, size=C)
    bank.emas = [EmaMeanTracker(s.mean + 0.3 * rng.standard_normal(d), 0.05) for s in cls]
    prev_img = EmaMeanTracker(train.mean + 0.5 * rng.standard_normal(d), 0.05)
    F_img = rng.standard_normal((B, d))
    F_obj = rng.standard_normal((n_obj, d))
    labels = rng.integers(0, C, size=n_obj)

    def loss(theta):
        Fi = theta[:B * d].reshape(B, d)
        Fo = theta[B * d:].reshape(n_obj, d)
        img = ema_update(prev_img, Fi.mean(axis=0))
        b = update_class_bank(bank, split_by_label(Fo, labels))
        return image_loss(train, img) + object_loss(b)

    def analytic():
        img = ema_update(prev_img, F_img.mean(axis=0))
        b = update_class_bank(bank, split_by_label(F_obj, labels))
        return total_loss_and_grads(train, b, img, F_img, F_obj, labels)

    return loss, analytic, np.concatenate([F_img.ravel(), F_obj.ravel()])
