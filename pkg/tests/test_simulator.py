import numpy as np
import pytest

from cta.adaptor import FrozenBackbone, LowRankAdaptor, forward
from cta.numerics import make_rng
from cta.simulator import (DomainSchedule, DomainTransform, class_frequencies, evaluate_accuracy,
                           generate_source_model, head_predict, head_probs, plane_rotation,
                           sample_batch, sample_scene, scene_stream, transform_at)


@pytest.fixture(scope="module")
def source():
    return generate_source_model(make_rng(0, "source"))


def test_two_class_separation():
    s = generate_source_model(make_rng(1), n_classes=2, d=2, separation=6.0)
    assert np.linalg.norm(s.prototypes[0] - s.prototypes[1]) >= 6.0


def test_infeasible_separation_raises():
    with pytest.raises(ValueError):
        generate_source_model(make_rng(1), n_classes=8, d=2, separation=50.0, max_tries=20)


def test_source_model_deterministic():
    a = generate_source_model(make_rng(3))
    b = generate_source_model(make_rng(3))
    assert np.array_equal(a.prototypes, b.prototypes) and a.bg_bias == b.bg_bias


def test_clean_accuracy_ceiling(source):
    batch = sample_batch(source, DomainTransform.identity(source.dim), make_rng(0, "eval"), 2000)
    assert evaluate_accuracy(head_probs(batch.object_features, source), batch.object_classes) >= 0.95


def test_head_examples(source):
    for k in range(source.n_classes):
        pred = head_predict(source.prototypes[k], source)
        assert np.argmax(pred.probs[:-1]) == k and pred.probs[-1] < 0.5
    zero = head_predict(np.zeros(source.dim), source)
    assert np.argmax(zero.probs) == source.n_classes
    assert abs(zero.probs.sum() - 1.0) < 1e-12


def test_accuracy_extremes():
    probs_bg = np.tile([0.1, 0.1, 0.8], (5, 1))
    assert evaluate_accuracy(probs_bg, np.zeros(5, int)) == 0.0
    oracle = np.tile([0.0, 0.9, 0.1], (5, 1))
    assert evaluate_accuracy(oracle, np.ones(5, int)) == 1.0


def test_transform_validation():
    with pytest.raises(ValueError):
        DomainTransform(np.zeros(3), scale=0.0)
    with pytest.raises(ValueError):
        DomainTransform(np.zeros(3), noise_std=-1.0)
    with pytest.raises(ValueError):
        DomainTransform(np.zeros(2), rotation=np.array([[1.0, 1.0], [0.0, 1.0]]))
    R = plane_rotation(make_rng(0), 10, 0.7, 3)
    np.testing.assert_allclose(R.T @ R, np.eye(10), atol=1e-12)


def test_schedule_discrete_and_continuous():
    t0, t1, t2 = (DomainTransform(np.full(2, v)) for v in (0.0, 2.0, 5.0))
    disc = DomainSchedule("discrete", [(t0, 10), (t1, 10), (t2, 10)])
    assert transform_at(disc, 25) is t2 and transform_at(disc, 10) is t1
    assert transform_at(disc, 1000) is t2
    cont = DomainSchedule("continuous", [(t0, 10), (t1, 10)])
    np.testing.assert_allclose(transform_at(cont, 5).shift, [1.0, 1.0])
    trip = DomainSchedule("continuous", [(t0, 10), (t1, 10), (t0, 1)])
    assert np.array_equal(transform_at(trip, trip.total_steps).shift, transform_at(trip, 0).shift)
    with pytest.raises(ValueError):
        DomainSchedule("discrete", [(t0, 0)])


def test_identity_scene_matches_source(source):
    rng = make_rng(5)
    batch = sample_batch(source, DomainTransform.identity(source.dim), rng, 3000, (4, 4))
    k0 = batch.object_features[batch.object_classes == 0]
    se = 1.0 / np.sqrt(len(k0))
    assert np.max(np.abs(k0.mean(axis=0) - source.prototypes[0])) < 5 * se
    scene = sample_scene(source, DomainTransform.identity(source.dim), rng, (1, 3))
    assert 1 <= len(scene.objects) <= 3
    mean_obj = np.mean([f for f, _ in scene.objects], axis=0)
    np.testing.assert_allclose(scene.image_feature, mean_obj, atol=1e-12)


def test_pure_shift_moves_class_means(source):
    shift = make_rng(6).standard_normal(source.dim)
    T = DomainTransform(shift)
    batch = sample_batch(source, T, make_rng(7), 2500, (4, 4))
    err = batch.object_features - source.prototypes[batch.object_classes] - shift
    se = 1.0 / np.sqrt(len(err))
    assert np.all(np.abs(err.mean(axis=0)) < 3.5 * se)


def test_imbalanced_frequencies_recount():
    s = generate_source_model(make_rng(2), n_classes=2, d=16, imbalance=10.0)
    np.testing.assert_allclose(s.class_probs, [10 / 11, 1 / 11])
    batch = sample_batch(s, DomainTransform.identity(16), make_rng(3), 4000)
    counts = np.bincount(batch.object_classes)
    assert abs(counts[0] / counts[1] - 10.0) < 1.0
    assert class_frequencies(4, 1.0).tolist() == [0.25] * 4


def test_n_obj_range_validation(source):
    with pytest.raises(ValueError):
        sample_batch(source, DomainTransform.identity(source.dim), make_rng(0), 1, (0, 3))
    with pytest.raises(ValueError):
        sample_batch(source, DomainTransform.identity(source.dim), make_rng(0), 1, (2, 33))


def test_stream_is_pure_in_seed_and_step(source):
    sched = DomainSchedule("discrete", [(DomainTransform.identity(source.dim), 5)])
    a = [b.object_features for _, b in scene_stream(4, source, sched, 2)]
    b = [b.object_features for _, b in scene_stream(4, source, sched, 2)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    later = dict(scene_stream(4, source, sched, 2))[3]
    assert np.array_equal(later.object_features, a[3])


def test_end_to_end_zero_init_identity(source):
    X = sample_batch(source, DomainTransform.identity(source.dim), make_rng(8), 20).object_features
    F, _ = forward(FrozenBackbone.identity(source.dim), LowRankAdaptor.initialize(source.dim, 32, make_rng(9)), X)
    assert np.array_equal(head_probs(F, source), head_probs(X, source))
    for x, f in zip(X, F):
        assert np.array_equal(head_predict(f, source).probs, head_predict(x, source).probs)


def test_pure_shift_admits_exact_correction():
    # with every hidden unit active, W_up = mean(a) (x) (-shift) / |mean(a)|^2 moves the mean
    # of the adapted features back onto the clean mean, so the alignment loss vanishes
    from cta.alignment import image_loss
    from cta.stats import EmaMeanTracker, compute_stats
    d, r = 16, 4
    rng = make_rng(10)
    clean = 5.0 + rng.standard_normal((400, d))
    shift = rng.standard_normal(d)
    w_down = np.abs(rng.standard_normal((d, d // r))) / np.sqrt(d)
    A = np.maximum((clean + shift) @ w_down, 0)
    assert np.all(A > 0)
    a_bar = A.mean(axis=0)
    w_up = np.outer(a_bar, -shift) / (a_bar @ a_bar)
    F, _ = forward(FrozenBackbone.identity(d), LowRankAdaptor(w_down, w_up, r), clean + shift)
    train = compute_stats(clean)
    shifted_loss = image_loss(train, EmaMeanTracker((clean + shift).mean(axis=0), 1.0))
    assert image_loss(train, EmaMeanTracker(F.mean(axis=0), 1.0)) < 1e-20 * max(shifted_loss, 1)
