"""
trends.py

"域偏移越大, 客户端梯度的协方差越小" 的经验验证。

每个网格点 c 生成一对逐特征协方差为 c 的域, 在单层 sigmoid 编码器上按下面的
设定训练一轮:

- 两个客户端从同一个 W 出发, 使用同一个仿射增强;
- 每个客户端在自己的整个数据集上做 ``local_steps`` 步全批量梯度下降,
  负样本是数据集中的所有其他样本, 步长按样本对数归一化;
- 之后 FedAVG 得到共享的 W。

然后在共享的 W 上计算每个样本的梯度 (按隐变量配对), 汇总它们的互协方差。
"""

from __future__ import annotations

from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from logging import getLogger

import numpy as np
from scipy.special import expit
from scipy.stats import spearmanr

from fedgala.config import SummaryKind
from fedgala.domains import (
    AffineAug,
    augment_batch,
    generate_family,
    mutual_information_closed_form,
    paired_specs,
    sample_augmentation,
)
from fedgala.encoder.one_layer import LAYER_NAME, OneLayerEncoder
from fedgala.errors import NonFiniteError, PreconditionError
from fedgala.losses import ContrastiveBatch, binary_contrastive_loss, binary_pair_count
from fedgala.theory.covariance import (
    GradientSample,
    empirical_grad_cov,
    summarize,
    taylor_cov_estimate,
    taylor_var_estimate,
)
from fedgala.typ import Matrix, RealVec
from fedgala.utils.numeric import central_jacobian
from fedgala.utils.rng import RngStream

logger = getLogger(__name__)

MIN_TREND_POINTS = 3


@dataclass(frozen=True)
class TrendProtocol:
    features: int = 8
    samples: int = 2000
    seeds: int = 5
    local_steps: int = 10
    learning_rate: float = 1.0
    summary: SummaryKind = "mean_diag"
    jobs: int = 1


@dataclass(frozen=True)
class TrendPoint:
    domain_cov: float
    grad_cov_summary: float
    mi: float
    var_diff: float
    predicted_var_diff: float


@dataclass(frozen=True)
class TheoremTrend:
    points: list[TrendPoint]
    spearman_rho: float


@dataclass(frozen=True)
class CorollaryTrend:
    # (mi, var_diff)
    rows: list[tuple[float, float]]
    spearman_rho: float


# --------------------------------------------------------------------------
# 训练与逐样本梯度
# --------------------------------------------------------------------------


def theory_round(
    w0: RealVec,
    datasets: Sequence[Matrix],
    aug: AffineAug,
    steps: int,
    learning_rate: float,
) -> RealVec:
    """每个客户端 ``steps`` 步全数据集梯度下降, 之后均匀平均。"""
    local: list[RealVec] = []
    for idx, x in enumerate(datasets):
        batch = ContrastiveBatch.build(x, aug, np.arange(x.shape[0]))
        scale = learning_rate / binary_pair_count(batch.size)
        w = np.array(w0, dtype=np.float64)
        for step in range(steps):
            loss, grad = binary_contrastive_loss(w, batch)
            w = w - scale * grad
            if not (np.isfinite(loss) and np.all(np.isfinite(w))):
                raise NonFiniteError(
                    f"theory training diverged: client {idx}, step {step}, loss={loss}"
                )
        local.append(w)
    avg: RealVec = np.mean(local, axis=0)
    return avg


def per_sample_gradients(w: RealVec, x: Matrix, aug: AffineAug) -> Matrix:
    """每行是一个样本作为 anchor 时的梯度: 正样本项加上对其余样本的平均负样本项。"""
    n = x.shape[0]
    v = x - augment_batch(x, aug)
    pos = (expit(v @ w) - 1.0)[:, None] * v
    u = x @ w
    p = expit(u[:, None] - u[None, :])
    np.fill_diagonal(p, 0.0)
    neg = (p.sum(axis=1)[:, None] * x - p @ x) / max(n - 1, 1)
    out: Matrix = pos + neg
    return out


def sample_gradient(w: RealVec, x: RealVec, aug: AffineAug, negatives: Matrix) -> RealVec:
    """单个 (不在数据集里的) 样本 x 的梯度, 负样本取 ``negatives`` 的全部行。"""
    v = x - (aug.A @ x + aug.B)
    pos = (expit(v @ w) - 1.0) * v
    diff = x[None, :] - negatives
    neg = expit(diff @ w) @ diff / negatives.shape[0]
    out: RealVec = pos + neg
    return out


# --------------------------------------------------------------------------
# 网格
# --------------------------------------------------------------------------


def _grid_point(
    c: float,
    seed_idx: int,
    rng: RngStream,
    features: int,
    samples: int,
    local_steps: int,
    learning_rate: float,
    summary: SummaryKind,
) -> tuple[float, float, float]:
    # 同一个 seed 的所有网格点共用初值、增强和随机数
    seed_rng = rng.child("seed", seed_idx)
    w0 = OneLayerEncoder(features).init_params(seed_rng.child("init"))[LAYER_NAME]
    aug = sample_augmentation(seed_rng.child("aug"), features)
    a, b = generate_family(paired_specs([c] * features), samples, seed_rng.child("data"))

    w = theory_round(w0, [a.data, b.data], aug, local_steps, learning_rate)
    gi = GradientSample(per_sample_gradients(w, a.data, aug), 0)
    gj = GradientSample(per_sample_gradients(w, b.data, aug), 1)
    cov_summary = summarize(empirical_grad_cov(gi, gj), summary)
    diff = GradientSample(gi.vectors - gj.vectors)
    var_diff = summarize(empirical_grad_cov(diff, diff), "mean_diag")

    zero = np.zeros(features)
    ji = central_jacobian(lambda x: sample_gradient(w, x, aug, a.data), zero)
    jj = central_jacobian(lambda x: sample_gradient(w, x, aug, b.data), zero)
    ones = np.ones(features)
    predicted = float(
        np.mean(
            taylor_var_estimate(ji, ones)
            + taylor_var_estimate(jj, ones)
            - 2.0 * np.diag(taylor_cov_estimate(ji, jj, [c] * features))
        )
    )
    return cov_summary, var_diff, predicted


def collect_trend_points(
    grid: Sequence[float],
    rng: RngStream,
    protocol: TrendProtocol = TrendProtocol(),
) -> list[TrendPoint]:
    """对每个网格点跑 ``seeds`` 次并取均值, 结果按 domain_cov 排序。"""
    values = sorted(float(c) for c in grid)
    for c in values:
        if not 0.0 < c <= 1.0:
            raise ValueError(f"domain covariance must lie in (0, 1], got {c}")
    p = protocol
    seeds = p.seeds
    tasks = [(c, s) for c in values for s in range(seeds)]

    def run(task: tuple[float, int]) -> tuple[float, float, float]:
        c, s = task
        return _grid_point(
            c, s, rng, p.features, p.samples, p.local_steps, p.learning_rate, p.summary
        )

    with ThreadPoolExecutor(max_workers=p.jobs) as pool:
        results = list(pool.map(run, tasks))

    points: list[TrendPoint] = []
    for idx, c in enumerate(values):
        chunk = np.array(results[idx * seeds : (idx + 1) * seeds])
        cov_summary, var_diff, predicted = chunk.mean(axis=0)
        mi = mutual_information_closed_form([c] * p.features) if c < 1.0 else float("inf")
        points.append(TrendPoint(c, float(cov_summary), mi, float(var_diff), float(predicted)))
        logger.info(
            f"trend cov={c}: grad_cov={cov_summary:.6g} var_diff={var_diff:.6g} "
            f"(taylor {predicted:.6g}) mi={mi:.4f}"
        )
    return points


def _spearman(x: Sequence[float], y: Sequence[float]) -> float:
    rho = spearmanr(x, y).statistic
    return float(rho)


def theorem1_experiment(
    grid: Sequence[float],
    rng: RngStream,
    *,
    protocol: TrendProtocol = TrendProtocol(),
    points: list[TrendPoint] | None = None,
) -> TheoremTrend:
    """梯度协方差汇总值与域协方差之间的 Spearman 秩相关 (期望为正)。

    ``points`` 给定时直接复用 (与 corollary1_check 共用同一批训练), 否则重新计算。
    """
    if len(grid) < MIN_TREND_POINTS:
        raise PreconditionError(
            f"rank correlation needs >= {MIN_TREND_POINTS} grid points, got {len(grid)}"
        )
    if points is None:
        points = collect_trend_points(grid, rng, protocol)
    rho = _spearman([p.domain_cov for p in points], [p.grad_cov_summary for p in points])
    logger.info(f"gradient covariance trend: spearman={rho:.4f}")
    return TheoremTrend(points, rho)


def corollary1_check(
    grid: Sequence[float],
    rng: RngStream,
    *,
    protocol: TrendProtocol = TrendProtocol(),
    points: list[TrendPoint] | None = None,
) -> CorollaryTrend:
    """Var(g_i - g_j) 的汇总值与互信息之间的 Spearman 秩相关 (期望为负)。"""
    if len(grid) < MIN_TREND_POINTS:
        raise PreconditionError(
            f"rank correlation needs >= {MIN_TREND_POINTS} grid points, got {len(grid)}"
        )
    if points is None:
        points = collect_trend_points(grid, rng, protocol)
    rows = [(p.mi, p.var_diff) for p in points]
    rho = _spearman([m for m, _ in rows], [v for _, v in rows])
    logger.info(f"gradient difference variance trend: spearman={rho:.4f}")
    return CorollaryTrend(rows, rho)
