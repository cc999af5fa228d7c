import math

import numpy as np
import pytest

from fedgala.domains import AffineAug, identity_augmentation, sample_augmentation
from fedgala.errors import BatchTooSmallError, DimensionError
from fedgala.losses import ContrastiveBatch, binary_contrastive_loss, binary_pair_count, ntxent_loss
from fedgala.utils.rng import RngStream

from .helpers import fd_gradient, rel_err


def random_batch(seed: int, b: int = 6, f: int = 4) -> ContrastiveBatch:
    x = np.random.default_rng(seed).standard_normal((b, f))
    return ContrastiveBatch.build(x, sample_augmentation(RngStream(seed), f), np.arange(b))


# --------------------------------------------------------------------------
# ContrastiveBatch
# --------------------------------------------------------------------------


def test_batch_positives_are_augmented_anchors():
    aug = sample_augmentation(RngStream(2), 3)
    x = np.random.default_rng(2).standard_normal((5, 3))
    batch = ContrastiveBatch.build(x, aug, np.arange(5))
    batch.verify(aug)
    assert batch.aug_digest == aug.digest()
    with pytest.raises(AssertionError):
        batch.verify(sample_augmentation(RngStream(3), 3))


def test_batch_interleaved_layout():
    batch = random_batch(1, b=3)
    inter = batch.interleaved()
    np.testing.assert_array_equal(inter[0::2], batch.anchors)
    np.testing.assert_array_equal(inter[1::2], batch.positives)


def test_batch_index_mismatch():
    with pytest.raises(DimensionError):
        ContrastiveBatch.build(np.zeros((3, 2)), identity_augmentation(2), [0, 1])


# --------------------------------------------------------------------------
# 二元对比损失
# --------------------------------------------------------------------------


def test_binary_loss_at_zero_weights():
    batch = random_batch(4, b=5)
    loss, grad = binary_contrastive_loss(np.zeros(4), batch)
    assert binary_pair_count(5) == 25
    assert loss == pytest.approx(25 * math.log(2.0), rel=1e-12)
    # 负样本对的 ±0.5 项成对抵消, 只剩正样本对
    expected = -0.5 * np.sum(batch.anchors - batch.positives, axis=0)
    np.testing.assert_allclose(grad, expected, atol=1e-12)


def test_binary_loss_single_sample_identity_aug():
    batch = ContrastiveBatch.build(np.array([[0.3, -1.2]]), identity_augmentation(2), [0])
    loss, grad = binary_contrastive_loss(np.array([0.7, 0.1]), batch)
    assert loss == pytest.approx(math.log(2.0), abs=1e-15)
    np.testing.assert_array_equal(grad, np.zeros(2))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_binary_loss_grad_matches_fd(seed):
    batch = random_batch(seed)
    w = np.random.default_rng(100 + seed).standard_normal(4)
    _, grad = binary_contrastive_loss(w, batch)
    fd = fd_gradient(lambda v: binary_contrastive_loss(v, batch)[0], w)
    assert rel_err(grad, fd) < 1e-6


def test_binary_loss_clamps_instead_of_overflowing():
    x = np.array([[100.0, 0.0], [-100.0, 0.0]])
    batch = ContrastiveBatch.build(x, AffineAug(-np.eye(2), np.zeros(2)), [0, 1])
    loss, grad = binary_contrastive_loss(np.array([50.0, 0.0]), batch)
    assert math.isfinite(loss) and loss >= 0.0
    assert np.all(np.isfinite(grad))


def test_binary_loss_descends():
    decreased = 0
    for seed in range(100):
        batch = random_batch(seed, b=8)
        w = np.random.default_rng(seed).uniform(-0.5, 0.5, 4)
        loss, grad = binary_contrastive_loss(w, batch)
        after, _ = binary_contrastive_loss(w - 1e-3 * grad, batch)
        decreased += after < loss
    assert decreased >= 95


def test_binary_loss_permutation_invariant():
    batch = random_batch(5)
    perm = np.random.default_rng(5).permutation(batch.size)
    shuffled = ContrastiveBatch(batch.anchors[perm], batch.positives[perm], batch.batch_indices[perm])
    w = np.array([0.2, -0.4, 0.1, 0.3])
    l1, g1 = binary_contrastive_loss(w, batch)
    l2, g2 = binary_contrastive_loss(w, shuffled)
    assert l1 == pytest.approx(l2, rel=1e-12)
    np.testing.assert_allclose(g1, g2, atol=1e-12)


# --------------------------------------------------------------------------
# NT-Xent
# --------------------------------------------------------------------------


def test_ntxent_identical_embeddings():
    loss, _ = ntxent_loss(np.ones((4, 3)), 0.5)
    assert loss == pytest.approx(2.0 * math.log(3.0), rel=1e-12)


def test_ntxent_orthogonal_negatives_lower():
    z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    loss, _ = ntxent_loss(z, 0.5)
    assert loss == pytest.approx(2.0 * math.log1p(2.0 * math.exp(-2.0)), rel=1e-12)
    assert loss < ntxent_loss(np.ones((4, 2)), 0.5)[0]


def test_ntxent_grad_matches_fd():
    z = np.random.default_rng(7).standard_normal((6, 3))
    _, grad = ntxent_loss(z, 0.5)
    fd = fd_gradient(lambda v: ntxent_loss(v.reshape(6, 3), 0.5)[0], z.ravel())
    assert rel_err(grad.ravel(), fd) < 1e-5


def test_ntxent_rotation_invariant():
    gen = np.random.default_rng(8)
    z = gen.standard_normal((8, 4))
    q, _ = np.linalg.qr(gen.standard_normal((4, 4)))
    assert ntxent_loss(z @ q, 0.5)[0] == pytest.approx(ntxent_loss(z, 0.5)[0], abs=1e-10)


def test_ntxent_pair_permutation_equivariant():
    z = np.random.default_rng(9).standard_normal((8, 3))
    pair_perm = np.array([2, 0, 3, 1])
    rows = np.stack([2 * pair_perm, 2 * pair_perm + 1], axis=1).ravel()
    l1, g1 = ntxent_loss(z, 0.5)
    l2, g2 = ntxent_loss(z[rows], 0.5)
    assert l1 == pytest.approx(l2, rel=1e-12)
    np.testing.assert_allclose(g2, g1[rows], atol=1e-12)


def test_ntxent_errors():
    with pytest.raises(BatchTooSmallError):
        ntxent_loss(np.ones((2, 3)))
    with pytest.raises(BatchTooSmallError):
        ntxent_loss(np.ones((4, 0)))
    with pytest.raises(DimensionError):
        ntxent_loss(np.ones((5, 3)))
    with pytest.raises(ValueError):
        ntxent_loss(np.ones((4, 3)), temperature=0.0)
