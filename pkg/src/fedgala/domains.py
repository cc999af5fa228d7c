"""
domains.py

合成的多域高斯数据: 每个特征都对一个跨域共享的隐变量 z^f 有载荷 rho,

    x_i^f = rho_i[f] · z^f + sqrt(1 - rho_i[f]^2) · eps_i^f

因此每个域都是标准化的 (均值 0, 方差 1), 域内特征相互独立,
两个域对应特征的总体协方差恰为 rho_i[f] · rho_j[f]。

另外包括每轮广播给所有客户端的仿射增强 (A x + B) 和高斯互信息。
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from logging import getLogger

import numpy as np
from numpy.typing import ArrayLike

from fedgala.errors import DimensionError, DivergenceError, EmptyRequestError
from fedgala.typ import IndexVec, Matrix, RealVec
from fedgala.utils.numeric import as_vec
from fedgala.utils.rng import RngStream

logger = getLogger(__name__)

MAX_AUG_CONDITION = 100.0
EMPIRICAL_CORR_LIMIT = 1.0 - 1e-9

# 训练路径上标签规则被求值的次数; 评估以外的任何代码都不应该让它增长
_label_rule_calls = 0


def label_rule_calls() -> int:
    return _label_rule_calls


# --------------------------------------------------------------------------
# 数据类型
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelRule:
    """隐变量 z 上的线性分类超平面: y = [z · weight > threshold]。"""

    weight: RealVec
    threshold: float = 0.0

    def labels(self, sample: DomainSample) -> IndexVec:
        global _label_rule_calls
        _label_rule_calls += 1
        if sample.latent.shape[1] != self.weight.size:
            raise DimensionError(
                f"label rule has {self.weight.size} weights, sample has "
                f"{sample.latent.shape[1]} latent features"
            )
        return (sample.latent @ self.weight > self.threshold).astype(np.int64)


@dataclass(frozen=True)
class DomainSpec:
    feature_count: int
    rho: RealVec
    label_rule: LabelRule | None = None

    def __post_init__(self) -> None:
        rho = as_vec(self.rho)
        if self.feature_count < 1:
            raise DimensionError(f"feature_count must be >= 1, got {self.feature_count}")
        if rho.size != self.feature_count:
            raise DimensionError(
                f"rho has {rho.size} entries, feature_count is {self.feature_count}"
            )
        if np.any(rho < 0.0) or np.any(rho > 1.0):
            raise ValueError(f"rho entries must lie in [0, 1], got {rho}")
        object.__setattr__(self, "rho", rho)


@dataclass(frozen=True)
class DomainSample:
    data: Matrix
    domain_id: int
    # 仅供 LabelRule 使用
    latent: Matrix = field(repr=False)

    @property
    def n(self) -> int:
        return int(self.data.shape[0])

    @property
    def feature_count(self) -> int:
        return int(self.data.shape[1])


@dataclass(frozen=True)
class AffineAug:
    A: Matrix
    B: RealVec

    def __post_init__(self) -> None:
        a = np.asarray(self.A, dtype=np.float64)
        b = as_vec(self.B)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] != b.size:
            raise DimensionError(f"affine augmentation with A {a.shape} and B {b.shape}")
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "B", b)

    @property
    def feature_count(self) -> int:
        return int(self.B.size)

    def condition_number(self) -> float:
        return float(np.linalg.cond(self.A))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.A, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.B, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# 生成
# --------------------------------------------------------------------------


def generate_family(
    specs: list[DomainSpec],
    n_per_domain: int,
    rng: RngStream,
) -> list[DomainSample]:
    """按共享隐变量的乘积构造生成一族域, 第 i 个结果的 domain_id 为 i。"""
    if not specs:
        return []
    if n_per_domain < 1:
        raise EmptyRequestError(f"n_per_domain must be >= 1, got {n_per_domain}")
    feature_count = specs[0].feature_count
    for ds in specs:
        if ds.feature_count != feature_count:
            raise DimensionError(
                f"family mixes feature counts {feature_count} and {ds.feature_count}"
            )

    latent = rng.child("latent").generator().standard_normal((n_per_domain, feature_count))
    latent.flags.writeable = False
    samples: list[DomainSample] = []
    for idx, ds in enumerate(specs):
        noise = rng.child("domain", idx).generator().standard_normal(
            (n_per_domain, feature_count)
        )
        data = ds.rho * latent + np.sqrt(1.0 - ds.rho**2) * noise
        data.flags.writeable = False
        samples.append(DomainSample(data=data, domain_id=idx, latent=latent))
    logger.debug(
        f"generated {len(specs)} domains, N={n_per_domain}, F={feature_count}"
    )
    return samples


def make_family_specs(
    domains: int,
    features: int,
    rho_low: float,
    rho_high: float,
    rng: RngStream,
) -> list[DomainSpec]:
    """桌面规模的默认域族: 每个域每个特征的 rho 在 [rho_low, rho_high] 内均匀抽取,
    所有域共享同一条 (z 上的) 标签规则。"""
    if not 0.0 <= rho_low <= rho_high <= 1.0:
        raise ValueError(f"need 0 <= rho_low <= rho_high <= 1, got {rho_low}, {rho_high}")
    weight = rng.child("label").generator().standard_normal(features)
    weight /= np.linalg.norm(weight)
    rule = LabelRule(weight=weight, threshold=0.0)
    specs: list[DomainSpec] = []
    for d in range(domains):
        rho = rng.child("rho", d).generator().uniform(rho_low, rho_high, size=features)
        specs.append(DomainSpec(feature_count=features, rho=rho, label_rule=rule))
    return specs


def paired_specs(cov: ArrayLike) -> list[DomainSpec]:
    """两域的域族, 使得每个特征的跨域协方差恰为 cov[f] (rho_i = rho_j = sqrt(cov))。"""
    c = as_vec(cov)
    if np.any(c < 0.0) or np.any(c > 1.0):
        raise ValueError(f"per-feature covariance must lie in [0, 1], got {c}")
    rho = np.sqrt(c)
    return [DomainSpec(c.size, rho), DomainSpec(c.size, rho)]


# --------------------------------------------------------------------------
# 增强
# --------------------------------------------------------------------------


def identity_augmentation(feature_count: int) -> AffineAug:
    return AffineAug(np.eye(feature_count), np.zeros(feature_count))


def sample_augmentation(
    rng: RngStream,
    feature_count: int,
    scale: float = 0.1,
) -> AffineAug:
    """A = I + scale · sym(G), B ~ scale · N(0, I); 特征值裁剪到条件数 < 100。"""
    gen = rng.generator()
    g = gen.standard_normal((feature_count, feature_count))
    a = np.eye(feature_count) + scale * 0.5 * (g + g.T)
    eigval, eigvec = np.linalg.eigh(a)
    magnitude = np.abs(eigval)
    floor = magnitude.max() / (MAX_AUG_CONDITION * 0.99)
    if np.any(magnitude < floor):
        sign = np.where(eigval < 0.0, -1.0, 1.0)
        eigval = sign * np.maximum(magnitude, floor)
        a = (eigvec * eigval) @ eigvec.T
        logger.debug(f"clipped augmentation spectrum to condition < {MAX_AUG_CONDITION}")
    b = scale * gen.standard_normal(feature_count)
    return AffineAug(a, b)


def apply_augmentation(x: ArrayLike, aug: AffineAug) -> RealVec:
    vec = as_vec(x)
    if vec.size != aug.feature_count:
        raise DimensionError(
            f"sample has {vec.size} features, augmentation expects {aug.feature_count}"
        )
    out: RealVec = aug.A @ vec + aug.B
    return out


def augment_batch(x: Matrix, aug: AffineAug) -> Matrix:
    """对矩阵的每一行做 A x + B。"""
    if x.ndim != 2 or x.shape[1] != aug.feature_count:
        raise DimensionError(
            f"batch of shape {x.shape}, augmentation expects {aug.feature_count} features"
        )
    out: Matrix = x @ aug.A.T + aug.B
    return out


# --------------------------------------------------------------------------
# 互信息
# --------------------------------------------------------------------------


def mutual_information_closed_form(cov: ArrayLike) -> float:
    """标准化二元高斯特征对的互信息 (nats): -1/2 Σ_f ln(1 - cov_f^2)。"""
    c = as_vec(cov)
    if np.any(np.abs(c) >= 1.0):
        raise DivergenceError(
            f"mutual information diverges for |cov| >= 1 (got max |cov| = {np.abs(c).max()})"
        )
    return float(-0.5 * np.sum(np.log1p(-(c**2))))


def sample_correlation(a: DomainSample, b: DomainSample) -> RealVec:
    """逐特征的样本 Pearson 相关系数 (要求行一一配对)。"""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"domains of shape {a.data.shape} and {b.data.shape}")
    da = a.data - a.data.mean(axis=0)
    db = b.data - b.data.mean(axis=0)
    num = np.sum(da * db, axis=0)
    den = np.sqrt(np.sum(da * da, axis=0) * np.sum(db * db, axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        corr: RealVec = np.where(den > 0.0, num / den, 0.0)
    return corr


def mutual_information_empirical(a: DomainSample, b: DomainSample) -> float:
    corr = sample_correlation(a, b)
    if np.any(np.abs(corr) >= EMPIRICAL_CORR_LIMIT):
        raise DivergenceError(
            f"sample correlation {np.abs(corr).max()!r} too close to 1, "
            "mutual information diverges"
        )
    return mutual_information_closed_form(corr)
