import math

import numpy as np
import pytest

from fedgala.domains import generate_family, paired_specs, sample_augmentation
from fedgala.encoder import MLPEncoder, OneLayerEncoder
from fedgala.errors import DimensionError
from fedgala.local_alignment import (
    BinaryContrastiveObjective,
    ClientState,
    DiscardStats,
    NTXentObjective,
    compute_reference,
    filtered_sgd_step,
    is_aligned,
    iter_batches,
    local_round,
)
from fedgala.losses import ContrastiveBatch
from fedgala.params import LayeredParams, UpdateDelta, params_sub
from fedgala.utils.rng import RngStream


def two_layer(a, b) -> LayeredParams:
    return LayeredParams((("fc0", np.asarray(a, dtype=float)), ("fc1", np.asarray(b, dtype=float))))


def delta(a, b) -> UpdateDelta:
    return UpdateDelta((("fc0", np.asarray(a, dtype=float)), ("fc1", np.asarray(b, dtype=float))))


def make_client(params: LayeredParams, lr: float = 0.1, n: int = 40, features: int = 4, seed: int = 0) -> ClientState:
    data, _ = generate_family(paired_specs([0.5] * features), n, RngStream(seed))
    return ClientState(0, params, data, RngStream(seed).child("client"), lr)


# --------------------------------------------------------------------------
# compute_reference
# --------------------------------------------------------------------------


def test_reference_examples():
    p = two_layer([1.0, 2.0], [3.0])
    np.testing.assert_array_equal(compute_reference(p, p).flatten(), np.zeros(3))
    np.testing.assert_array_equal(compute_reference(p, p.zeros_like()).flatten(), p.flatten())
    gen = np.random.default_rng(0)
    a = two_layer(gen.standard_normal(2), gen.standard_normal(1))
    b = two_layer(gen.standard_normal(2), gen.standard_normal(1))
    np.testing.assert_array_equal(compute_reference(a, b).flatten(), a.flatten() - b.flatten())


def test_reference_shape_mismatch():
    with pytest.raises(DimensionError):
        compute_reference(two_layer([1.0], [2.0]), two_layer([1.0, 2.0], [3.0]))


# --------------------------------------------------------------------------
# filtered_sgd_step
# --------------------------------------------------------------------------


def test_first_round_bypass_updates_everything():
    client = make_client(two_layer([1.0, 1.0], [1.0]))
    new, stats = filtered_sgd_step(client, delta([1.0, 0.0], [2.0]), None, tau=0.0)
    np.testing.assert_allclose(new.flatten(), [0.9, 1.0, 0.8])
    assert (stats.considered, stats.discarded) == (2, 0)


def test_zero_reference_discards_at_tau_zero():
    client = make_client(two_layer([1.0, 1.0], [1.0]))
    _, stats = filtered_sgd_step(client, delta([1.0, 0.0], [2.0]), delta([0.0, 0.0], [0.0]), tau=0.0)
    assert stats.discarded == 2


def test_opposite_layer_is_discarded():
    client = make_client(two_layer([1.0, 1.0], [1.0]))
    grad = delta([1.0, 0.0], [2.0])
    ref = delta([1.0, 0.0], [-1.0])
    new, stats = filtered_sgd_step(client, grad, ref, tau=0.0)
    np.testing.assert_allclose(new["fc0"], [0.9, 1.0])
    np.testing.assert_array_equal(new["fc1"], [1.0])
    assert stats.per_layer == {"fc0": (1, 0), "fc1": (1, 1)}
    assert stats.ratio == 0.5


def test_tau_minus_one_keeps_everything():
    client = make_client(two_layer([1.0, 1.0], [1.0]))
    grad = delta([1.0, 0.0], [2.0])
    ref = delta([-1.0, 0.0], [-1.0])
    new, stats = filtered_sgd_step(client, grad, ref, tau=-1.0)
    np.testing.assert_allclose(new.flatten(), [0.9, 1.0, 0.8])
    assert stats.discarded == 0
    assert is_aligned(-1.0, -1.0)
    assert not is_aligned(0.0, 0.0)


def test_filter_only_removes():
    gen = np.random.default_rng(1)
    for _ in range(50):
        params = two_layer(gen.standard_normal(3), gen.standard_normal(2))
        grad = delta(gen.standard_normal(3), gen.standard_normal(2))
        ref = delta(gen.standard_normal(3), gen.standard_normal(2))
        client = make_client(params, lr=0.05)
        new, _ = filtered_sgd_step(client, grad, ref, tau=float(gen.uniform(-1, 1)))
        for (name, w), (_, g) in zip(params.layers, grad.layers):
            assert np.array_equal(new[name], w) or np.array_equal(new[name], w - 0.05 * g)


def test_discard_monotone_in_tau():
    gen = np.random.default_rng(2)
    params = two_layer(np.zeros(3), np.zeros(2))
    client = make_client(params)
    for _ in range(30):
        grad = delta(gen.standard_normal(3), gen.standard_normal(2))
        ref = delta(gen.standard_normal(3), gen.standard_normal(2))
        counts = [filtered_sgd_step(client, grad, ref, tau)[1].discarded for tau in np.linspace(-1, 1, 9)]
        assert counts == sorted(counts)


def test_discard_stats_merge():
    a, b = DiscardStats(), DiscardStats()
    a.record("fc0", True, False)
    b.record("fc0", False, False)
    b.record("fc1", False, True)
    m = a.merge(b)
    assert (m.considered, m.discarded, m.reweighted) == (3, 1, 1)
    assert m.per_layer == {"fc0": (2, 1), "fc1": (1, 1)}
    assert m.unaligned <= m.considered
    assert DiscardStats().ratio == 0.0


# --------------------------------------------------------------------------
# local_round
# --------------------------------------------------------------------------


def one_layer_setup(seed: int = 0):
    enc = OneLayerEncoder(4)
    start = enc.init_params(RngStream(seed).child("init"))
    prev = start.map(lambda w: w - 0.01)
    aug = sample_augmentation(RngStream(seed).child("aug"), 4)
    return start, prev, aug


def test_iter_batches_cover_and_merge_tail():
    batches = iter_batches(10, 4, RngStream(0), min_batch=3)
    assert [len(b) for b in batches] == [4, 6]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))
    assert [len(b) for b in iter_batches(10, 4, RngStream(0))] == [4, 4, 2]


def test_iter_batches_tail_merge_warns(caplog):
    with caplog.at_level("WARNING"):
        batches = iter_batches(65, 16, RngStream(2), min_batch=2)
    assert [len(b) for b in batches] == [16, 16, 16, 17]
    assert "merged into previous batch" in caplog.text
    caplog.clear()
    with caplog.at_level("WARNING"):
        iter_batches(64, 16, RngStream(2), min_batch=2)
    assert "merged" not in caplog.text


def test_local_round_steps_match_epoch_accounting():
    enc = MLPEncoder([4, 5, 3], projection_dim=0)
    start = enc.init_params(RngStream(0))
    aug = sample_augmentation(RngStream(1), 4)
    client = make_client(start, n=64)
    epochs, batch_size = 3, 16
    _, stats, _ = local_round(client, start, None, epochs, batch_size, 0.0, aug, NTXentObjective(enc, 0.5))
    steps = stats.considered // len(start)
    assert steps == math.ceil(64 / batch_size) * epochs
    assert stats.discarded == 0


def test_local_round_zero_epochs():
    start, prev, aug = one_layer_setup()
    client = make_client(start)
    params, stats, loss = local_round(client, start, prev, 0, 8, 0.0, aug, BinaryContrastiveObjective())
    assert params.digest() == start.digest()
    assert (stats.considered, stats.discarded, loss) == (0, 0, 0.0)


def test_local_round_tau_minus_one_equals_plain_sgd():
    start, prev, aug = one_layer_setup(3)
    client = make_client(start, lr=0.01, seed=3)
    objective = BinaryContrastiveObjective()
    params, stats, _ = local_round(client, start, prev, 1, 8, -1.0, aug, objective)
    assert stats.discarded == 0

    # 不筛选的 SGD 对照, 使用同一个随机流
    expected = start
    for idx in iter_batches(client.data.n, 8, client.rng.child("epoch", 0)):
        batch = ContrastiveBatch.build(client.data.data[idx], aug, idx)
        _, grad = objective.loss_and_grad(expected, batch)
        expected = LayeredParams(params_sub(expected, grad.scaled(0.01)).layers)
    assert params.digest() == expected.digest()


def test_local_round_deterministic():
    start, prev, aug = one_layer_setup(4)
    outs = [
        local_round(make_client(start, seed=4), start, prev, 2, 8, 0.0, aug, BinaryContrastiveObjective())
        for _ in range(2)
    ]
    assert outs[0][0].digest() == outs[1][0].digest()
    assert outs[0][1] == outs[1][1]
    assert outs[0][2] == outs[1][2]


def test_local_round_clamps_batch_size(caplog):
    start, _, aug = one_layer_setup()
    client = make_client(start, n=10)
    with caplog.at_level("WARNING"):
        _, stats, _ = local_round(client, start, None, 1, 64, 0.0, aug, BinaryContrastiveObjective())
    assert "clamped" in caplog.text
    assert stats.considered == 1


def test_local_round_counts_every_layer_of_every_batch():
    enc = MLPEncoder([4, 5, 3], projection_dim=0)
    start = enc.init_params(RngStream(0))
    prev = start.map(lambda w: 0.9 * w)
    aug = sample_augmentation(RngStream(1), 4)
    client = make_client(start, n=40)
    _, stats, loss = local_round(client, start, prev, 2, 10, 0.0, aug, NTXentObjective(enc, 0.5))
    # 2 epochs × 4 batches × 2 layers
    assert stats.considered == 16
    assert set(stats.per_layer) == {"fc0", "fc1"}
    assert loss > 0.0


def test_client_state_rejects_bad_learning_rate():
    start, _, _ = one_layer_setup()
    with pytest.raises(ValueError):
        make_client(start, lr=0.0)
