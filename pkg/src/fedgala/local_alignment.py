"""
local_alignment.py

客户端的逐层梯度筛选: 每个 batch 的梯度在每一层上与参考方向
(全局模型相邻两轮之差) 比较余弦相似度, 只有 cos > tau 的层才执行 SGD 更新。

第一轮没有上一轮的全局模型, 参考方向无定义, 此时不做筛选 (``reference=None``)。
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from logging import getLogger

import numpy as np
from typing_extensions import override

from fedgala.domains import AffineAug, DomainSample
from fedgala.encoder.mlp import MLPEncoder
from fedgala.encoder.one_layer import LAYER_NAME
from fedgala.errors import NonFiniteError
from fedgala.losses import ContrastiveBatch, binary_contrastive_loss, ntxent_loss
from fedgala.params import LayeredParams, UpdateDelta, params_add, params_sub
from fedgala.utils.numeric import cosine
from fedgala.utils.rng import RngStream

logger = getLogger(__name__)

GradHook = Callable[[LayeredParams], UpdateDelta]


# --------------------------------------------------------------------------
# 数据类型
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClientState:
    id: int
    params: LayeredParams
    data: DomainSample
    rng: RngStream
    learning_rate: float

    def __post_init__(self) -> None:
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass
class DiscardStats:
    considered: int = 0
    discarded: int = 0
    # 重加权模式下未对齐的层不丢弃, 而是计入这里
    reweighted: int = 0
    per_layer: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def unaligned(self) -> int:
        return self.discarded + self.reweighted

    @property
    def ratio(self) -> float:
        return self.unaligned / self.considered if self.considered else 0.0

    def record(self, layer: str, aligned: bool, reweight: bool) -> None:
        self.considered += 1
        c, d = self.per_layer.get(layer, (0, 0))
        if not aligned:
            d += 1
            if reweight:
                self.reweighted += 1
            else:
                self.discarded += 1
        self.per_layer[layer] = (c + 1, d)

    def merge(self, other: DiscardStats) -> DiscardStats:
        per_layer = dict(self.per_layer)
        for name, (c, d) in other.per_layer.items():
            c0, d0 = per_layer.get(name, (0, 0))
            per_layer[name] = (c0 + c, d0 + d)
        return DiscardStats(
            considered=self.considered + other.considered,
            discarded=self.discarded + other.discarded,
            reweighted=self.reweighted + other.reweighted,
            per_layer=per_layer,
        )


# --------------------------------------------------------------------------
# 本地目标函数
# --------------------------------------------------------------------------


class Objective(ABC):
    """把 (参数, 对比 batch) 映射到 (损失, 逐层梯度)。"""

    MIN_BATCH: int = 1

    @abstractmethod
    def loss_and_grad(
        self, params: LayeredParams, batch: ContrastiveBatch
    ) -> tuple[float, UpdateDelta]:
        raise NotImplementedError


class BinaryContrastiveObjective(Objective):
    @override
    def loss_and_grad(
        self, params: LayeredParams, batch: ContrastiveBatch
    ) -> tuple[float, UpdateDelta]:
        loss, grad = binary_contrastive_loss(params[LAYER_NAME], batch)
        return loss, UpdateDelta(((LAYER_NAME, grad),))


class NTXentObjective(Objective):
    MIN_BATCH = 2

    def __init__(self, encoder: MLPEncoder, temperature: float) -> None:
        self._encoder = encoder
        self._temperature = temperature

    @override
    def loss_and_grad(
        self, params: LayeredParams, batch: ContrastiveBatch
    ) -> tuple[float, UpdateDelta]:
        x = batch.interleaved()
        cache = self._encoder.forward(params, x)
        loss, g_emb = ntxent_loss(cache.output, self._temperature)
        return loss, self._encoder.backward(params, x, g_emb, cache)


# --------------------------------------------------------------------------
# 单步 / 单轮
# --------------------------------------------------------------------------


def compute_reference(global_now: LayeredParams, global_prev: LayeredParams) -> UpdateDelta:
    """g_est = θ^(t) - θ^(t-1), 逐层。"""
    return params_sub(global_now, global_prev)


def is_aligned(c: float, tau: float) -> bool:
    # tau = -1 时保留所有梯度, 包括 cos 恰好为 -1 的情况
    return c > tau or tau <= -1.0


def aligned_sgd_step(
    client: ClientState,
    batch_grad: UpdateDelta,
    reference: UpdateDelta | None,
    tau: float,
    unaligned_factor: float = 0.0,
) -> tuple[LayeredParams, DiscardStats]:
    """逐层筛选后的 SGD 步。``unaligned_factor = 0`` 为丢弃, > 0 为按比例缩小。"""
    params = client.params
    params.check_shape(batch_grad, "batch gradient")
    if reference is not None:
        params.check_shape(reference, "reference")
    lr = client.learning_rate
    reweight = unaligned_factor > 0.0
    stats = DiscardStats()
    layers = []
    for idx, (name, p) in enumerate(params.layers):
        g = batch_grad.layers[idx][1]
        aligned = reference is None or is_aligned(cosine(g, reference.layers[idx][1]), tau)
        stats.record(name, aligned, reweight)
        if aligned:
            layers.append((name, p - lr * g))
        elif reweight:
            layers.append((name, p - (lr * unaligned_factor) * g))
        else:
            layers.append((name, p))
    return LayeredParams(tuple(layers)), stats


def filtered_sgd_step(
    client: ClientState,
    batch_grad: UpdateDelta,
    reference: UpdateDelta | None,
    tau: float = 0.0,
) -> tuple[LayeredParams, DiscardStats]:
    return aligned_sgd_step(client, batch_grad, reference, tau, 0.0)


def iter_batches(
    n: int, batch_size: int, rng: RngStream, min_batch: int = 1
) -> list[np.ndarray]:
    """一个 epoch 的乱序 batch 索引; 末尾不足 min_batch 的残余并入前一个 batch。"""
    order = rng.generator().permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < min_batch:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
        logger.warning(
            f"batch tail of {len(tail)} < {min_batch} merged into previous batch, "
            f"{len(batches)} steps this epoch instead of {len(batches) + 1}"
        )
    return batches


def local_round(
    client: ClientState,
    global_now: LayeredParams,
    global_prev: LayeredParams | None,
    epochs: int,
    batch_size: int,
    tau: float,
    round_aug: AffineAug,
    objective: Objective,
    *,
    grad_hooks: Sequence[GradHook] = (),
    unaligned_factor: float = 0.0,
    filtering: bool = True,
) -> tuple[LayeredParams, DiscardStats, float]:
    """客户端一轮本地训练: E 个 epoch, 每个 batch 计算 SSL 梯度后做筛选更新。

    Args:
        client: 客户端状态, ``client.params`` 应等于 ``global_now``
        global_now: 本轮下发的全局模型 θ^(t)
        global_prev: 上一轮全局模型 θ^(t-1), 第一轮为 None (不筛选)
        epochs: 本地 epoch 数 E
        batch_size: batch 大小, 超过数据量时截断
        tau: 余弦阈值
        round_aug: 本轮广播的仿射增强
        objective: SSL 目标函数
        grad_hooks: 附加到 SSL 梯度上的正则项梯度 (在筛选之前相加)
        unaligned_factor: 未对齐层的缩放因子, 0 表示丢弃
        filtering: False 时退化为普通 SGD (FedAvg 基线)

    Returns:
        (本地参数, 筛选统计, 平均 batch 损失)
    """
    n = client.data.n
    if batch_size > n:
        logger.warning(
            f"client {client.id}: batch_size {batch_size} > dataset size {n}, clamped"
        )
        batch_size = n
    reference = None
    if filtering and global_prev is not None:
        reference = compute_reference(global_now, global_prev)

    params = client.params
    stats = DiscardStats()
    losses: list[float] = []
    for epoch in range(epochs):
        for idx in iter_batches(n, batch_size, client.rng.child("epoch", epoch), objective.MIN_BATCH):
            batch = ContrastiveBatch.build(client.data.data[idx], round_aug, idx)
            loss, grad = objective.loss_and_grad(params, batch)
            if not math.isfinite(loss):
                raise NonFiniteError(
                    f"client {client.id}: non-finite loss {loss} in epoch {epoch}"
                )
            for hook in grad_hooks:
                grad = UpdateDelta(params_add(grad, hook(params)).layers, grad.round)
            step_client = ClientState(
                client.id, params, client.data, client.rng, client.learning_rate
            )
            params, step_stats = aligned_sgd_step(
                step_client, grad, reference, tau, unaligned_factor
            )
            stats = stats.merge(step_stats)
            losses.append(loss)
        logger.debug(
            f"client {client.id} epoch {epoch}: "
            f"loss={np.mean(losses) if losses else 0.0:.4f} discard={stats.ratio:.3f}"
        )
    mean_loss = float(np.mean(losses)) if losses else 0.0
    return params, stats, mean_loss
