"""
covariance.py

梯度协方差相关的数值工具:

- 经验互协方差 Cov(g_i, g_j) 与方差;
- 一阶 Taylor 近似 Cov(g_i, g_j)_mn ≈ Σ_f σ_f J_i[m, f] J_j[n, f]
  (雅可比在特征均值处求值, 标准化后即 x = 0);
- 方差的同类近似 Var(g)_m ≈ Σ_f σ_f² J[m, f]²;
- 闭式互信息与样本估计的对比。
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from logging import getLogger

import numpy as np
from numpy.typing import ArrayLike

from fedgala.config import SummaryKind
from fedgala.domains import (
    generate_family,
    mutual_information_closed_form,
    mutual_information_empirical,
    paired_specs,
)
from fedgala.errors import DimensionError, PreconditionError
from fedgala.typ import Matrix, RealVec
from fedgala.utils.numeric import as_vec, check_finite
from fedgala.utils.rng import RngStream

logger = getLogger(__name__)


@dataclass(frozen=True)
class GradientSample:
    """M 个梯度样本 (每行对应一次数据抽取), 行与行之间按隐变量配对。"""

    vectors: Matrix
    source_domain: int = 0

    def __post_init__(self) -> None:
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionError(f"gradient sample must be 2-D, got shape {v.shape}")
        check_finite(v, f"gradients of domain {self.source_domain}")
        object.__setattr__(self, "vectors", v)

    @property
    def m(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def d(self) -> int:
        return int(self.vectors.shape[1])


# --------------------------------------------------------------------------
# 协方差
# --------------------------------------------------------------------------


def empirical_grad_cov(a: GradientSample, b: GradientSample) -> Matrix:
    """样本互协方差 (无偏, 除以 M - 1)。"""
    if a.vectors.shape != b.vectors.shape:
        raise DimensionError(
            f"gradient samples of shape {a.vectors.shape} and {b.vectors.shape}"
        )
    if a.m < 2:
        raise PreconditionError(f"covariance needs M >= 2 paired gradients, got {a.m}")
    da = a.vectors - a.vectors.mean(axis=0)
    db = b.vectors - b.vectors.mean(axis=0)
    cov: Matrix = da.T @ db / (a.m - 1)
    return cov


def taylor_cov_estimate(jac_i: Matrix, jac_j: Matrix, feature_cov: ArrayLike) -> Matrix:
    ji = np.asarray(jac_i, dtype=np.float64)
    jj = np.asarray(jac_j, dtype=np.float64)
    c = as_vec(feature_cov)
    if ji.ndim != 2 or ji.shape != jj.shape or ji.shape[1] != c.size:
        raise DimensionError(
            f"jacobians {ji.shape} / {jj.shape} with {c.size} feature covariances"
        )
    est: Matrix = (ji * c) @ jj.T
    return est


def taylor_var_estimate(jac: Matrix, feature_var: ArrayLike) -> RealVec:
    """Var(g)_m 的一阶近似 (只取对角线)。"""
    j = np.asarray(jac, dtype=np.float64)
    v = as_vec(feature_var)
    if j.ndim != 2 or j.shape[1] != v.size:
        raise DimensionError(f"jacobian {j.shape} with {v.size} feature variances")
    out: RealVec = (j**2) @ v
    return out


def summarize(cov: Matrix, kind: SummaryKind = "mean_diag") -> float:
    """把协方差矩阵压成一个标量。"""
    m = np.asarray(cov, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"covariance summary needs a square matrix, got {m.shape}")
    if kind == "mean_diag":
        return float(np.trace(m) / m.shape[0])
    if kind == "trace":
        return float(np.trace(m))
    if kind == "frobenius":
        return float(np.linalg.norm(0.5 * (m + m.T)))
    raise ValueError(f"unknown summary kind {kind!r}")


# --------------------------------------------------------------------------
# 互信息: 闭式 vs 样本
# --------------------------------------------------------------------------


@dataclass
class MutualInfoReport:
    # (F, cov, 闭式, 样本估计)
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    @property
    def max_abs_error(self) -> float:
        return max((abs(closed - emp) for _, _, closed, emp in self.rows), default=0.0)


def lemma1_vs_estimator(
    rng: RngStream,
    grid: Sequence[float] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
    feature_counts: Sequence[int] = (1, 4),
    n: int = 100_000,
) -> MutualInfoReport:
    report = MutualInfoReport()
    for f in feature_counts:
        for idx, c in enumerate(grid):
            a, b = generate_family(paired_specs([c] * f), n, rng.child("lemma1", f, idx))
            closed = mutual_information_closed_form([c] * f)
            emp = mutual_information_empirical(a, b)
            report.rows.append((f, float(c), closed, emp))
            logger.debug(f"lemma1 F={f} cov={c}: closed={closed:.5f} empirical={emp:.5f}")
    logger.info(f"mutual information estimator: max abs error {report.max_abs_error:.5f}")
    return report


# --------------------------------------------------------------------------
# 线性 g 下的 Taylor 近似
# --------------------------------------------------------------------------


@dataclass
class LinearTaylorReport:
    estimate: Matrix
    empirical: Matrix

    @property
    def relative_error(self) -> float:
        return float(
            np.linalg.norm(self.empirical - self.estimate) / np.linalg.norm(self.estimate)
        )


def linear_taylor_check(
    rng: RngStream,
    feature_cov: ArrayLike,
    d: int = 3,
    m: int = 1_000_000,
) -> LinearTaylorReport:
    """g(x) = J x 时一阶近似是精确的: 用 M 对配对样本的经验互协方差与之比较。"""
    c = as_vec(feature_cov)
    gen = rng.child("jacobian").generator()
    jac_i = gen.standard_normal((d, c.size))
    jac_j = gen.standard_normal((d, c.size))
    a, b = generate_family(paired_specs(c), m, rng.child("samples"))
    gi = GradientSample(a.data @ jac_i.T, a.domain_id)
    gj = GradientSample(b.data @ jac_j.T, b.domain_id)
    report = LinearTaylorReport(
        estimate=taylor_cov_estimate(jac_i, jac_j, c),
        empirical=empirical_grad_cov(gi, gj),
    )
    logger.info(f"linear taylor check (M={m}): relative error {report.relative_error:.5f}")
    return report
