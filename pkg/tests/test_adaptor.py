import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cta.adaptor import (AdaptorGradients, DivergenceError, FrozenBackbone, LowRankAdaptor,
                         backward, forward, full_finetune_backward, fused_sgd_step,
                         sgd_step, sgd_step_backbone)
from cta.numerics import ShapeError, finite_diff_grad, make_rng, relative_error

from helpers import loss_of_params, quad_upstream, random_instance


def test_zero_init_is_identity_on_random_backbone():
    rng = make_rng(5)
    bb = FrozenBackbone(rng.standard_normal((6, 6)), rng.standard_normal(6))
    ad = LowRankAdaptor.initialize(6, 2, rng)
    assert not np.any(ad.w_up)
    X = rng.standard_normal((20, 6))
    F, _ = forward(bb, ad, X)
    assert np.array_equal(F, X @ bb.weight.T + bb.bias)


def test_forward_hand_example():
    bb = FrozenBackbone.identity(2)
    ad = LowRankAdaptor(np.array([[1.0], [0.0]]), np.array([[0.5, 0.0]]), r=2)
    f, cache = forward(bb, ad, [2.0, 3.0])
    assert np.array_equal(f, [3.0, 3.0])
    assert cache.z.shape == (1, 1) and cache.a[0, 0] == 2.0


def test_identity_backbone_zero_up_passes_input_through():
    ad = LowRankAdaptor(np.eye(4)[:, :2], np.zeros((2, 4)), r=2)
    x = np.array([0.1, -2.0, 3.5, 0.0])
    assert np.array_equal(forward(FrozenBackbone.identity(4), ad, x)[0], x)


def test_forward_shape_error():
    ad = LowRankAdaptor.initialize(4, 2, make_rng(0))
    with pytest.raises(ShapeError):
        forward(FrozenBackbone.identity(4), ad, np.zeros(3))
    with pytest.raises(ShapeError):
        LowRankAdaptor.initialize(6, 4, make_rng(0))


def test_backward_special_cases():
    ad = LowRankAdaptor.initialize(8, 4, make_rng(1))
    X = make_rng(2).standard_normal((3, 8))
    _, cache = forward(FrozenBackbone.identity(8), ad, X)
    g = backward(cache, np.zeros((3, 8)))
    assert not np.any(g.g_down) and not np.any(g.g_up)
    up = make_rng(3).standard_normal((3, 8))
    g = backward(cache, up)
    assert not np.any(g.g_down)
    np.testing.assert_allclose(g.g_up, cache.a.T @ up)
    with pytest.raises(ShapeError):
        backward(cache, np.zeros((2, 8)))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("which", ["down", "up"])
def test_backward_matches_finite_differences(seed, which):
    bb, ad, X, Q, c = random_instance(seed, d=8, r=4)
    F, cache = forward(bb, ad, X)
    g = backward(cache, quad_upstream(F, Q, c))
    analytic = g.g_down if which == "down" else g.g_up
    theta = (ad.w_down if which == "down" else ad.w_up).ravel()
    numeric = finite_diff_grad(loss_of_params(bb, ad, X, Q, c, which), theta)
    assert relative_error(analytic.ravel(), numeric) <= 1e-5


def test_full_finetune_hand_example_and_fd():
    ad = LowRankAdaptor.initialize(2, 1, make_rng(0))
    _, cache = forward(FrozenBackbone.identity(2), ad, np.array([1.0, 0.0]))
    g = full_finetune_backward(cache, np.array([1.0, 0.0]))
    assert np.array_equal(g.g_backbone, [[1.0, 0.0], [0.0, 0.0]])
    assert not np.any(full_finetune_backward(cache, np.zeros(2)).g_backbone)

    bb, ad, X, Q, c = random_instance(9, d=6, r=2)
    F, cache = forward(bb, ad, X)
    g = full_finetune_backward(cache, quad_upstream(F, Q, c))
    numeric = finite_diff_grad(loss_of_params(bb, ad, X, Q, c, "backbone"), bb.weight.ravel())
    assert relative_error(g.g_backbone.ravel(), numeric) <= 1e-5


def test_sgd_step_semantics():
    ad = LowRankAdaptor.initialize(4, 2, make_rng(0))
    rng = make_rng(1)
    g = AdaptorGradients(rng.standard_normal(ad.w_down.shape), rng.standard_normal(ad.w_up.shape))
    same = sgd_step(ad, g, 0.0)
    assert np.array_equal(same.w_down, ad.w_down) and np.array_equal(same.w_up, ad.w_up)
    target = rng.standard_normal(ad.w_up.shape)
    lr = 0.01
    one = sgd_step(ad, AdaptorGradients(np.zeros_like(ad.w_down), target / lr), lr)
    np.testing.assert_allclose(one.w_up, -target, rtol=1e-15)
    two = sgd_step(sgd_step(ad, g, lr), g, lr)
    np.testing.assert_allclose(two.w_down, ad.w_down - 2 * lr * g.g_down, rtol=1e-12)


def test_sgd_step_rejects_nonfinite():
    ad = LowRankAdaptor.initialize(4, 2, make_rng(0))
    bad = AdaptorGradients(np.full(ad.w_down.shape, np.nan), np.zeros(ad.w_up.shape))
    with pytest.raises(DivergenceError):
        sgd_step(ad, bad, 0.1)
    bb = FrozenBackbone.identity(4)
    bad.g_backbone = np.full((4, 4), np.inf)
    with pytest.raises(DivergenceError):
        sgd_step_backbone(bb, bad, 0.1)


def test_adaptor_updates_leave_backbone_untouched():
    bb = FrozenBackbone.identity(8)
    before = bb.weight.tobytes() + bb.bias.tobytes()
    ad = LowRankAdaptor.initialize(8, 4, make_rng(0))
    rng = make_rng(1)
    for _ in range(20):
        F, cache = forward(bb, ad, rng.standard_normal((5, 8)))
        ad = sgd_step(ad, backward(cache, F - 1.0), 0.01)
    assert bb.weight.tobytes() + bb.bias.tobytes() == before


def test_parameter_count_ratio():
    bb = FrozenBackbone.identity(64)
    counts = [LowRankAdaptor.initialize(64, r, make_rng(0)).n_params for r in (1, 2, 4, 8, 16, 32, 64)]
    assert counts == [2 * 64 * 64 // r for r in (1, 2, 4, 8, 16, 32, 64)]
    assert counts[5] == 256 and bb.n_params == 4160
    assert all(a > b for a, b in zip(counts, counts[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), arrays(float, (7, 8), elements=st.floats(-50, 50)))
def test_zero_init_identity_property(seed, X):
    ad = LowRankAdaptor.initialize(8, 2, make_rng(seed))
    assert np.array_equal(forward(FrozenBackbone.identity(8), ad, X)[0], X)


@pytest.mark.parametrize("with_backbone", [False, True])
def test_fused_step_matches_two_stage_update(with_backbone):
    rng = np.random.default_rng(7)
    d, r = 16, 2
    bb = FrozenBackbone(np.eye(d) + 0.1 * rng.standard_normal((d, d)), rng.standard_normal(d))
    ad = LowRankAdaptor(rng.uniform(-0.3, 0.3, (d, d // r)), rng.standard_normal((d // r, d)), r)
    X = rng.standard_normal((5, d))
    G = rng.standard_normal((5, d))
    _, cache = forward(bb, ad, X)
    if with_backbone:
        grads = full_finetune_backward(cache, G)
        bb_ref = sgd_step_backbone(bb, grads, 0.05)
    else:
        grads = backward(cache, G)
    ad_ref = sgd_step(ad, grads, 0.05)
    fused_sgd_step(cache, G, ad, 0.05, bb if with_backbone else None)
    np.testing.assert_allclose(ad.w_down, ad_ref.w_down, rtol=0, atol=1e-13)
    np.testing.assert_allclose(ad.w_up, ad_ref.w_up, rtol=0, atol=1e-13)
    if with_backbone:
        np.testing.assert_allclose(bb.weight, bb_ref.weight, rtol=0, atol=1e-13)


def test_fused_step_flags_divergence():
    d = 8
    ad = LowRankAdaptor.initialize(d, 2, np.random.default_rng(0))
    _, cache = forward(FrozenBackbone.identity(d), ad, np.ones((2, d)))
    with pytest.raises(DivergenceError):
        fused_sgd_step(cache, np.full((2, d), np.inf), ad, 1.0)
