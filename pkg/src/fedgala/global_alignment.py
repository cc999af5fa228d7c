"""
global_alignment.py

服务端聚合。以 FedAvg 的均值作为初值, 之后迭代地按

    w_i = (cos(g_i, g) + 1) / 2,   w <- w / Σw,   g <- Σ w_i g_i

重新加权客户端更新。余弦在所有层拼接后的整个更新向量上计算,
每个客户端只有一个标量权重。
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from logging import getLogger

import numpy as np

from fedgala.params import (
    LayeredParams,
    UpdateDelta,
    delta_sum,
    params_add,
    params_sub,
)
from fedgala.typ import RealVec
from fedgala.utils.numeric import cosine

logger = getLogger(__name__)

DEFAULT_ITERATIONS = 3


@dataclass
class AggregationReport:
    final_update: UpdateDelta
    weights_per_iteration: list[RealVec] = field(default_factory=list)
    fallback_used: bool = False


def client_updates(
    client_params: Sequence[LayeredParams], global_prev: LayeredParams, round: int = 0
) -> list[UpdateDelta]:
    """g_i = Θ_i - Θ^(t-1)。"""
    return [params_sub(p, global_prev, round) for p in client_params]


def fedavg_aggregate(
    updates: Sequence[UpdateDelta], sizes: Sequence[int] | None = None
) -> UpdateDelta:
    """均匀平均; 给定 ``sizes`` 时按数据量加权。"""
    if not updates:
        raise ValueError("cannot aggregate zero client updates")
    k = len(updates)
    if sizes is None:
        weights = [1.0 / k] * k
    else:
        if len(sizes) != k or any(s <= 0 for s in sizes):
            raise ValueError(f"bad client sizes {list(sizes)} for {k} updates")
        total = float(sum(sizes))
        weights = [s / total for s in sizes]
    return delta_sum(updates, weights)


def aligned_aggregate(
    updates: Sequence[UpdateDelta],
    iterations: int = DEFAULT_ITERATIONS,
    sizes: Sequence[int] | None = None,
) -> AggregationReport:
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    g = fedavg_aggregate(updates, sizes)
    report = AggregationReport(final_update=g)
    flats = [u.flatten() for u in updates]
    for it in range(iterations):
        g_flat = g.flatten()
        raw = np.array([(cosine(f, g_flat) + 1.0) / 2.0 for f in flats])
        total = float(raw.sum())
        if total <= 0.0:
            # 所有客户端都与 g 完全反向
            weights = np.full(len(updates), 1.0 / len(updates))
            report.fallback_used = True
            logger.warning(f"aggregation iteration {it + 1}: all weights zero, using uniform")
        else:
            weights = raw / total
        g = delta_sum(updates, weights.tolist())
        report.weights_per_iteration.append(weights)
        logger.debug(f"aggregation iteration {it + 1}: weights={np.round(weights, 4).tolist()}")
    report.final_update = g
    return report


def apply_global_update(global_prev: LayeredParams, update: UpdateDelta) -> LayeredParams:
    """Θ^(t+1) = Θ^(t) + ĝ。"""
    return params_add(global_prev, update)
