"""
variants.py

消融变体:

- 重加权: 未对齐的层不丢弃, 而是乘以一个 re-weight factor 后照常更新;
- L2 正则: L_total = L_ssl + λ ||Θ_i||²;
- 近端项: L_total = L_ssl + μ ||Θ_i - Θ_g||²。

正则项的梯度在对齐筛选之前加到 SSL 梯度上。
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

from fedgala.local_alignment import (
    ClientState,
    DiscardStats,
    GradHook,
    aligned_sgd_step,
)
from fedgala.params import LayeredParams, UpdateDelta, params_sub


@dataclass(frozen=True)
class VariantConfig:
    local_mode: Literal["discard", "reweight"] = "discard"
    reweight_factor: float = 0.01
    l2_lambda: float = 0.0
    prox_mu: float = 0.0

    def __post_init__(self) -> None:
        if self.local_mode == "reweight" and not 0.0 < self.reweight_factor <= 1.0:
            raise ValueError(f"reweight factor must lie in (0, 1], got {self.reweight_factor}")
        for name, value in (("l2_lambda", self.l2_lambda), ("prox_mu", self.prox_mu)):
            if not math.isfinite(value) or value < 0.0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")

    @property
    def unaligned_factor(self) -> float:
        return self.reweight_factor if self.local_mode == "reweight" else 0.0

    def grad_hooks(self, global_params: LayeredParams) -> list[GradHook]:
        hooks: list[GradHook] = []
        if self.l2_lambda > 0.0:
            lam = self.l2_lambda
            hooks.append(lambda p: l2_grad_term(p, lam))
        if self.prox_mu > 0.0:
            mu = self.prox_mu
            hooks.append(lambda p: prox_grad_term(p, global_params, mu))
        return hooks


def reweight_sgd_step(
    client: ClientState,
    batch_grad: UpdateDelta,
    reference: UpdateDelta | None,
    tau: float,
    factor: float,
) -> tuple[LayeredParams, DiscardStats]:
    if not 0.0 < factor <= 1.0:
        raise ValueError(f"reweight factor must lie in (0, 1], got {factor}")
    return aligned_sgd_step(client, batch_grad, reference, tau, factor)


def l2_grad_term(params: LayeredParams, lam: float) -> UpdateDelta:
    """∇ λ||Θ||² = 2λΘ。"""
    if lam < 0.0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return UpdateDelta(tuple((n, (2.0 * lam) * w) for n, w in params.layers))


def prox_grad_term(
    params: LayeredParams, global_params: LayeredParams, mu: float
) -> UpdateDelta:
    """∇ μ||Θ - Θ_g||² = 2μ(Θ - Θ_g)。"""
    if mu < 0.0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    return params_sub(params, global_params).scaled(2.0 * mu)
