"""
claims.py

两类数值检查:

- 符号检查: 两个共享 W (以及增强 A, B) 的客户端, 在 x = 0 处
  ∂g_f/∂x_f 的乘积是否在每个特征上都为正。导数用中心差分在闭式梯度上求。
- 丢弃检查: 从 g_j 中去掉唯一一个与 g_est 余弦为负的向量 (连同它在 g_i
  中配对的那一行) 之后, 两组梯度的互协方差 (对角线均值) 是否变大。
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass
from logging import getLogger
from typing import Literal

import numpy as np
from scipy.special import expit

from fedgala.domains import (
    AffineAug,
    generate_family,
    identity_augmentation,
    paired_specs,
    sample_augmentation,
)
from fedgala.errors import PreconditionError
from fedgala.theory.covariance import GradientSample, empirical_grad_cov, summarize
from fedgala.typ import RealVec
from fedgala.utils.numeric import as_vec, cosine
from fedgala.utils.rng import RngStream

logger = getLogger(__name__)

SignMode = Literal["ssl_positive", "ssl_negative", "supervised_logistic"]

FD_STEP = 1e-5
DEGENERATE_TOL = 1e-14
MIN_NEGATIVES = 1000


# --------------------------------------------------------------------------
# 符号检查
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SignCheckResult:
    mode: SignMode
    fraction: float
    # 所有乘积都 (数值上) 为 0
    degenerate: bool
    products: RealVec


def positive_pair_gradient(w: RealVec, x: RealVec, aug: AffineAug) -> RealVec:
    """(σ(W(x - Ax - B)) - 1)(x - Ax - B)。"""
    v = x - (aug.A @ x + aug.B)
    out: RealVec = (expit(v @ w) - 1.0) * v
    return out


def negative_pairs_gradient(w: RealVec, x: RealVec, negatives: np.ndarray) -> RealVec:
    """x 对 ``negatives`` 中所有样本的负样本项均值 Σ σ(W(x - x_m))(x - x_m) / N。"""
    diff = x[None, :] - negatives
    out: RealVec = expit(diff @ w) @ diff / negatives.shape[0]
    return out


def logistic_gradient(w: RealVec, b: float, x: RealVec, y: float) -> RealVec:
    """逻辑回归对 W 的梯度 (σ(Wx + b) - y) x。"""
    out: RealVec = (expit(x @ w + b) - y) * x
    return out


def diagonal_derivative(fn: Callable[[RealVec], RealVec], features: int) -> RealVec:
    """∂fn_f/∂x_f 在 x = 0 处的中心差分。"""
    out = np.empty(features)
    for f in range(features):
        e = np.zeros(features)
        e[f] = FD_STEP
        out[f] = (fn(e)[f] - fn(-e)[f]) / (2.0 * FD_STEP)
    return out


def claim1_sign_check(
    mode: SignMode,
    rng: RngStream,
    *,
    features: int = 8,
    aug: AffineAug | None = None,
    negatives: int = MIN_NEGATIVES,
    label: float = 1.0,
) -> SignCheckResult:
    """两个客户端 x = 0 处对角导数乘积为正的特征比例。

    - ``ssl_positive``: 只看正样本项, 增强默认随机抽取 (传 ``aug`` 可指定);
    - ``ssl_negative``: 只看对整个数据集求和的负样本项, 两个客户端各自的数据集
      来自一对协方差 0.5 的域, 要求 ``negatives >= 1000``;
    - ``supervised_logistic``: 逻辑回归梯度, 两个客户端共享 W, b 和标签 ``label``。
    """
    gen = rng.child("weights").generator()
    w = gen.uniform(-1.0 / np.sqrt(features), 1.0 / np.sqrt(features), features)

    if mode == "ssl_positive":
        aug = aug if aug is not None else sample_augmentation(rng.child("aug"), features)
        shared_aug = aug
        fns = [lambda x: positive_pair_gradient(w, x, shared_aug)] * 2
    elif mode == "ssl_negative":
        if negatives < MIN_NEGATIVES:
            raise PreconditionError(
                f"negative-pair sign check needs >= {MIN_NEGATIVES} samples, got {negatives}"
            )
        a, b = generate_family(paired_specs([0.5] * features), negatives, rng.child("data"))
        fns = [
            lambda x: negative_pairs_gradient(w, x, a.data),
            lambda x: negative_pairs_gradient(w, x, b.data),
        ]
    elif mode == "supervised_logistic":
        bias = float(gen.standard_normal())
        fns = [lambda x: logistic_gradient(w, bias, x, label)] * 2
    else:
        raise ValueError(f"unknown sign check mode {mode!r}")

    d_i = diagonal_derivative(fns[0], features)
    d_j = diagonal_derivative(fns[1], features)
    products = d_i * d_j
    degenerate = bool(np.all(np.abs(products) <= DEGENERATE_TOL))
    fraction = 0.0 if degenerate else float(np.mean(products > DEGENERATE_TOL))
    logger.debug(f"sign check {mode}: fraction={fraction} degenerate={degenerate}")
    return SignCheckResult(mode, fraction, degenerate, products)


def identity_sign_check(features: int = 8) -> SignCheckResult:
    """恒等增强下正样本项处处为 0, 结果应为退化。"""
    return claim1_sign_check(
        "ssl_positive", RngStream(0), features=features, aug=identity_augmentation(features)
    )


def sign_check_over_augmentations(
    rng: RngStream, count: int = 100, features: int = 8
) -> list[SignCheckResult]:
    return [
        claim1_sign_check(
            "ssl_positive",
            rng.child("trial", k),
            features=features,
            aug=sample_augmentation(rng.child("aug", k), features),
        )
        for k in range(count)
    ]


# --------------------------------------------------------------------------
# 丢弃检查
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscardCheckResult:
    before: float
    after: float
    removed: int

    @property
    def holds(self) -> bool:
        return self.after > self.before


def proposition1_check(
    g_i: GradientSample,
    g_j: GradientSample,
    g_est: RealVec,
    remove_index: int | None = None,
) -> DiscardCheckResult:
    """前置条件: g_i 全部与 g_est 余弦为正; g_j 恰有一个为负, 其余为正。
    ``remove_index`` 给定时必须指向那个为负的向量。"""
    est = as_vec(g_est)
    if g_i.vectors.shape != g_j.vectors.shape or g_i.d != est.size:
        raise PreconditionError(
            f"gradient sets {g_i.vectors.shape} / {g_j.vectors.shape} with |g_est|={est.size}"
        )
    if g_i.m < 3:
        raise PreconditionError(f"need >= 3 paired vectors, got {g_i.m}")
    cos_i = np.array([cosine(v, est) for v in g_i.vectors])
    cos_j = np.array([cosine(v, est) for v in g_j.vectors])
    if np.any(cos_i <= 0.0):
        raise PreconditionError(
            f"g_i vectors {np.flatnonzero(cos_i <= 0.0).tolist()} are not aligned with g_est"
        )
    negative = np.flatnonzero(cos_j < 0.0)
    if negative.size != 1 or np.any(np.delete(cos_j, negative) <= 0.0):
        raise PreconditionError(
            f"g_j must hold exactly one vector with negative cosine and the rest positive, "
            f"got cosines {np.round(cos_j, 4).tolist()}"
        )
    k = int(negative[0])
    if remove_index is not None and remove_index != k:
        raise PreconditionError(
            f"vector {remove_index} of g_j is aligned with g_est (cos={cos_j[remove_index]:.4f}); "
            f"only the misaligned vector {k} may be removed"
        )

    before = summarize(empirical_grad_cov(g_i, g_j), "mean_diag")
    keep = np.arange(g_i.m) != k
    after = summarize(
        empirical_grad_cov(
            GradientSample(g_i.vectors[keep], g_i.source_domain),
            GradientSample(g_j.vectors[keep], g_j.source_domain),
        ),
        "mean_diag",
    )
    return DiscardCheckResult(before, after, k)


def constructed_discard_example(
    d: int = 8, vectors: int = 20
) -> tuple[GradientSample, GradientSample, RealVec]:
    """g_j 全是同一个向量 m, 只有最后一个是 -m; g_i 第 k 行为 (1 + k/M) m。

    去掉最后一对之后 g_j 方差为 0, 互协方差从负数变成 0。
    """
    m = np.ones(d) / np.sqrt(d)
    scales = 1.0 + np.arange(vectors) / vectors
    gi = scales[:, None] * m
    gj = np.tile(m, (vectors, 1))
    gj[-1] = -m
    est = np.concatenate([gi, gj]).mean(axis=0)
    return GradientSample(gi, 0), GradientSample(gj, 1), est


def random_discard_instance(
    rng: RngStream, d: int = 8, vectors: int = 20, noise: float = 0.05
) -> tuple[GradientSample, GradientSample, RealVec]:
    """随机的满足前置条件的实例。

    成对行 g_i,k = s_k e + ε, g_j,k = s_k e + ε', s_k ~ U(0.5, 1.5);
    最后一对中 g_i 取最大的 s, g_j 取 -e (加噪声)。g_est 为两组的均值。
    """
    gen = rng.generator()
    e = gen.standard_normal(d)
    e /= np.linalg.norm(e)
    s = np.sort(gen.uniform(0.5, 1.5, vectors))
    gi = s[:, None] * e + noise * gen.standard_normal((vectors, d))
    gj = s[:, None] * e + noise * gen.standard_normal((vectors, d))
    gj[-1] = -e + noise * gen.standard_normal(d)
    est = np.concatenate([gi, gj]).mean(axis=0)
    return GradientSample(gi, 0), GradientSample(gj, 1), est


@dataclass(frozen=True)
class DiscardMonteCarlo:
    trials: int
    holds: int
    # 不满足前置条件而被跳过的实例数
    skipped: int

    @property
    def holds_rate(self) -> float:
        return self.holds / self.trials if self.trials else 0.0


def proposition1_monte_carlo(
    rng: RngStream, trials: int = 1000, d: int = 8, vectors: int = 20
) -> DiscardMonteCarlo:
    holds = 0
    skipped = 0
    done = 0
    attempt = 0
    while done < trials:
        gi, gj, est = random_discard_instance(rng.child("instance", attempt), d, vectors)
        attempt += 1
        try:
            result = proposition1_check(gi, gj, est)
        except PreconditionError:
            skipped += 1
            if skipped > 10 * trials:
                raise
            continue
        done += 1
        holds += result.holds
    logger.info(
        f"discard check: holds in {holds}/{trials} instances ({skipped} resampled)"
    )
    return DiscardMonteCarlo(trials, holds, skipped)
