import numpy as np
import pytest

from fedgala.global_alignment import (
    aligned_aggregate,
    apply_global_update,
    client_updates,
    fedavg_aggregate,
)
from fedgala.params import LayeredParams, UpdateDelta


def upd(*values: float) -> UpdateDelta:
    return UpdateDelta((("w", np.array(values, dtype=float)),))


def random_updates(k: int, seed: int, d: int = 5) -> list[UpdateDelta]:
    gen = np.random.default_rng(seed)
    return [
        UpdateDelta((("fc0", gen.standard_normal(d)), ("fc1", gen.standard_normal(2))))
        for _ in range(k)
    ]


def test_client_updates():
    prev = LayeredParams((("w", np.array([1.0, 2.0])),))
    same, moved = client_updates([prev, LayeredParams((("w", np.array([0.0, 5.0])),))], prev, round=3)
    np.testing.assert_array_equal(same.flatten(), [0.0, 0.0])
    np.testing.assert_array_equal(moved.flatten(), [-1.0, 3.0])
    assert moved.round == 3


def test_orthogonal_pair_by_hand():
    report = aligned_aggregate([upd(1.0, 0.0), upd(0.0, 1.0)], iterations=1)
    np.testing.assert_allclose(report.weights_per_iteration[0], [0.5, 0.5])
    np.testing.assert_allclose(report.final_update.flatten(), [0.5, 0.5])
    assert not report.fallback_used


def test_antiparallel_pair_gives_zero_update():
    report = aligned_aggregate([upd(1.0, 2.0), upd(-1.0, -2.0)], iterations=1)
    np.testing.assert_allclose(report.weights_per_iteration[0], [0.5, 0.5])
    np.testing.assert_allclose(report.final_update.flatten(), [0.0, 0.0], atol=1e-15)


def test_identical_updates_are_a_fixed_point():
    u = upd(0.3, -1.0, 2.0)
    report = aligned_aggregate([u, u, u], iterations=3)
    np.testing.assert_allclose(report.final_update.flatten(), u.flatten())
    for w in report.weights_per_iteration:
        np.testing.assert_allclose(w, np.full(3, 1 / 3))


def test_zero_iterations_is_fedavg():
    updates = random_updates(4, 0)
    report = aligned_aggregate(updates, iterations=0)
    assert report.weights_per_iteration == []
    np.testing.assert_array_equal(report.final_update.flatten(), fedavg_aggregate(updates).flatten())


def test_weights_are_a_distribution():
    for seed in range(20):
        report = aligned_aggregate(random_updates(5, seed), iterations=3)
        assert len(report.weights_per_iteration) == 3
        for w in report.weights_per_iteration:
            assert abs(w.sum() - 1.0) <= 1e-12
            assert np.all((w >= 0.0) & (w <= 1.0))


def test_permutation_equivariant():
    updates = random_updates(4, 1)
    perm = [2, 0, 3, 1]
    a = aligned_aggregate(updates)
    b = aligned_aggregate([updates[i] for i in perm])
    np.testing.assert_allclose(a.final_update.flatten(), b.final_update.flatten(), atol=1e-12)
    np.testing.assert_allclose(a.weights_per_iteration[-1][perm], b.weights_per_iteration[-1], atol=1e-12)


def test_scale_equivariant():
    updates = random_updates(3, 2)
    a = aligned_aggregate(updates)
    b = aligned_aggregate([u.scaled(4.0) for u in updates])
    np.testing.assert_allclose(b.final_update.flatten(), 4.0 * a.final_update.flatten(), rtol=1e-10)


def test_outlier_gets_smallest_weight():
    gen = np.random.default_rng(3)
    base = gen.standard_normal(6)
    updates = [upd(*(base + 0.1 * gen.standard_normal(6))) for _ in range(4)]
    updates.append(upd(*(-base)))
    w = aligned_aggregate(updates).weights_per_iteration[-1]
    assert int(np.argmin(w)) == 4
    assert np.all(w[:4] > 1.0 / 5.0)


def test_final_update_is_convex_combination():
    updates = random_updates(3, 4)
    report = aligned_aggregate(updates)
    expected = sum(w * u.flatten() for w, u in zip(report.weights_per_iteration[-1], updates))
    np.testing.assert_allclose(report.final_update.flatten(), expected, atol=1e-12)


def test_fedavg_size_weighted():
    got = fedavg_aggregate([upd(1.0), upd(4.0)], sizes=[3, 1])
    np.testing.assert_allclose(got.flatten(), [1.75])
    with pytest.raises(ValueError):
        fedavg_aggregate([upd(1.0)], sizes=[0])
    with pytest.raises(ValueError):
        fedavg_aggregate([])


def test_single_client():
    report = aligned_aggregate([upd(2.0, -1.0)])
    np.testing.assert_allclose(report.final_update.flatten(), [2.0, -1.0])
    for w in report.weights_per_iteration:
        np.testing.assert_allclose(w, [1.0])


def test_negative_iterations():
    with pytest.raises(ValueError):
        aligned_aggregate([upd(1.0)], iterations=-1)


def test_apply_global_update():
    prev = LayeredParams((("w", np.array([1.0, 1.0])),))
    new = apply_global_update(prev, upd(0.5, -2.0))
    np.testing.assert_array_equal(new["w"], [1.5, -1.0])
