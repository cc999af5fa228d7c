import numpy as np
import pytest

from fedgala.domains import (
    AffineAug,
    DomainSpec,
    apply_augmentation,
    augment_batch,
    generate_family,
    identity_augmentation,
    label_rule_calls,
    make_family_specs,
    mutual_information_closed_form,
    mutual_information_empirical,
    paired_specs,
    sample_augmentation,
    sample_correlation,
)
from fedgala.errors import DimensionError, DivergenceError, EmptyRequestError
from fedgala.utils.rng import RngStream


def sample_cov(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.mean((a - a.mean(axis=0)) * (b - b.mean(axis=0)), axis=0)


# --------------------------------------------------------------------------
# generate_family
# --------------------------------------------------------------------------


def test_identical_loadings_give_identical_domains():
    a, b = generate_family(paired_specs([1.0, 1.0]), 500, RngStream(1))
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_allclose(sample_cov(a.data, b.data), a.data.var(axis=0))


def test_zero_loading_is_independent():
    n = 20000
    specs = [DomainSpec(3, np.zeros(3)), DomainSpec(3, np.full(3, 0.7))]
    a, b = generate_family(specs, n, RngStream(2))
    # 每个特征的 sqrt(N)·cov 近似 N(0, 1), 合并后仍是标准正态
    z = sample_cov(a.data, b.data) * np.sqrt(n)
    assert abs(z.sum()) / np.sqrt(z.size) < 3.0


def test_product_covariance():
    specs = [DomainSpec(1, [0.8]), DomainSpec(1, [0.5])]
    a, b = generate_family(specs, 100_000, RngStream(3))
    assert sample_cov(a.data, b.data)[0] == pytest.approx(0.40, abs=0.01)


def test_domains_are_standardized():
    specs = make_family_specs(3, 5, 0.3, 0.95, RngStream(4))
    for s in generate_family(specs, 5000, RngStream(5)):
        assert s.n == 5000 and s.feature_count == 5
        assert np.all(np.abs(s.data.mean(axis=0)) < 0.1)
        assert np.all(np.abs(s.data.var(axis=0) - 1.0) < 0.1)


def test_family_is_reproducible_and_read_only():
    specs = paired_specs([0.5, 0.2])
    a1, _ = generate_family(specs, 100, RngStream(6))
    a2, _ = generate_family(specs, 100, RngStream(6))
    np.testing.assert_array_equal(a1.data, a2.data)
    with pytest.raises(ValueError):
        a1.data[0, 0] = 1.0


def test_family_errors():
    with pytest.raises(DimensionError):
        generate_family([DomainSpec(2, [0.1, 0.2]), DomainSpec(3, [0.1, 0.2, 0.3])], 10, RngStream(0))
    with pytest.raises(EmptyRequestError):
        generate_family(paired_specs([0.5]), 0, RngStream(0))
    with pytest.raises(ValueError):
        DomainSpec(1, [1.5])
    assert generate_family([], 10, RngStream(0)) == []


def test_family_specs_share_label_rule():
    specs = make_family_specs(4, 3, 0.3, 0.9, RngStream(9))
    assert len({id(s.label_rule) for s in specs}) == 1
    for s in specs:
        assert np.all((s.rho >= 0.3) & (s.rho <= 0.9))


def test_label_rule_counts_calls():
    specs = make_family_specs(2, 3, 0.3, 0.9, RngStream(9))
    target = generate_family(specs, 50, RngStream(10))[0]
    before = label_rule_calls()
    labels = specs[0].label_rule.labels(target)
    assert label_rule_calls() == before + 1
    assert set(np.unique(labels)) <= {0, 1}


# --------------------------------------------------------------------------
# 互信息
# --------------------------------------------------------------------------


def test_mi_closed_form_examples():
    assert mutual_information_closed_form([0.0]) == 0.0
    assert mutual_information_closed_form([0.5]) == pytest.approx(0.14384, abs=1e-5)
    assert mutual_information_closed_form([0.5, 0.5]) == pytest.approx(0.28768, abs=1e-5)


def test_mi_closed_form_monotone():
    grid = np.linspace(0.0, 0.95, 20)
    values = [mutual_information_closed_form([c, 0.3]) for c in grid]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_mi_diverges():
    with pytest.raises(DivergenceError):
        mutual_information_closed_form([1.0])
    with pytest.raises(DivergenceError):
        mutual_information_closed_form([0.2, -1.0])


def test_mi_empirical_self_diverges():
    a, _ = generate_family(paired_specs([0.5]), 100, RngStream(0))
    with pytest.raises(DivergenceError):
        mutual_information_empirical(a, a)


@pytest.mark.parametrize("cov", [0.1, 0.5, 0.9])
def test_mi_empirical_matches_closed_form(cov):
    a, b = generate_family(paired_specs([cov]), 100_000, RngStream(12))
    closed = mutual_information_closed_form([cov])
    assert abs(mutual_information_empirical(a, b) - closed) <= 0.01


def test_mi_empirical_independent():
    a, b = generate_family(paired_specs([0.0]), 100_000, RngStream(13))
    assert abs(mutual_information_empirical(a, b)) <= 0.005
    assert sample_correlation(a, b).shape == (1,)


# --------------------------------------------------------------------------
# 增强
# --------------------------------------------------------------------------


def test_augmentation_examples():
    x = np.array([1.0, 1.0])
    np.testing.assert_array_equal(apply_augmentation(x, identity_augmentation(2)), x)
    np.testing.assert_array_equal(apply_augmentation(x, AffineAug(2.0 * np.eye(2), np.zeros(2))), [2.0, 2.0])
    np.testing.assert_array_equal(
        apply_augmentation(np.zeros(2), AffineAug(np.eye(2), [1.0, 0.0])), [1.0, 0.0]
    )
    with pytest.raises(DimensionError):
        apply_augmentation([1.0, 2.0, 3.0], identity_augmentation(2))


def test_augment_batch_matches_rowwise():
    aug = sample_augmentation(RngStream(1), 4)
    x = np.random.default_rng(0).standard_normal((6, 4))
    rows = np.stack([apply_augmentation(r, aug) for r in x])
    np.testing.assert_allclose(augment_batch(x, aug), rows, atol=1e-14)


def test_sampled_augmentation_well_conditioned():
    for k in range(50):
        aug = sample_augmentation(RngStream(k), 8, scale=0.5)
        assert aug.condition_number() < 100.0


def test_augmentation_digest_identifies_broadcast():
    a = sample_augmentation(RngStream(3).child("aug", 1), 4)
    b = sample_augmentation(RngStream(3).child("aug", 1), 4)
    c = sample_augmentation(RngStream(3).child("aug", 2), 4)
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()
