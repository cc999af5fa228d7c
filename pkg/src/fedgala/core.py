from __future__ import annotations

from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from logging import getLogger

import numpy as np

from fedgala.config import ExperimentConfig
from fedgala.debug import CheckpointDumper
from fedgala.domains import (
    AffineAug,
    DomainSample,
    DomainSpec,
    generate_family,
    make_family_specs,
    sample_augmentation,
)
from fedgala.encoder import AbstractEncoder, MLPEncoder, OneLayerEncoder
from fedgala.errors import NonFiniteError
from fedgala.global_alignment import (
    aligned_aggregate,
    apply_global_update,
    client_updates,
    fedavg_aggregate,
)
from fedgala.local_alignment import (
    BinaryContrastiveObjective,
    ClientState,
    DiscardStats,
    NTXentObjective,
    Objective,
    local_round,
)
from fedgala.params import LayeredParams, UpdateDelta, delta_sum
from fedgala.typ import RealVec
from fedgala.utils.rng import RngStream
from fedgala.variants import VariantConfig

logger = getLogger(__name__)

# 每轮结束时调用 (round, 当前全局参数), 返回探测准确率或 None
RoundCallback = Callable[[int, LayeredParams], float | None]


# --------------------------------------------------------------------------
# 记录
# --------------------------------------------------------------------------


@dataclass
class ClientRoundStats:
    client_id: int
    stats: DiscardStats
    mean_loss: float
    aug_digest: str


@dataclass
class RoundRecord:
    round: int
    clients: list[ClientRoundStats]
    # 每次聚合迭代一个长度为 K 的权重向量
    weight_history: list[RealVec] = field(default_factory=list)
    global_param_norm: float = 0.0
    probe_accuracy: float | None = None

    @property
    def discard_ratio(self) -> float:
        """本轮所有客户端合并后的丢弃比例。"""
        total = DiscardStats()
        for c in self.clients:
            total = total.merge(c.stats)
        return total.ratio

    def rows(self, weight_columns: int) -> list[list[object]]:
        """rounds.csv 的行, 每个客户端一行。"""
        out: list[list[object]] = []
        for idx, c in enumerate(self.clients):
            weights: list[object] = [float(w[idx]) for w in self.weight_history]
            weights += [""] * (weight_columns - len(weights))
            out.append(
                [
                    self.round,
                    c.client_id,
                    c.stats.considered,
                    c.stats.unaligned,
                    c.stats.ratio,
                    c.mean_loss,
                    *weights,
                    self.global_param_norm,
                    "" if self.probe_accuracy is None else self.probe_accuracy,
                ]
            )
        return out


def rounds_header(weight_columns: int) -> list[str]:
    return [
        "round",
        "client_id",
        "considered",
        "discarded",
        "ratio",
        "mean_loss",
        *(f"weight_iter{i + 1}" for i in range(weight_columns)),
        "global_param_norm",
        "probe_accuracy",
    ]


def rounds_rows(records: Sequence[RoundRecord]) -> tuple[list[str], list[list[object]]]:
    columns = max((len(r.weight_history) for r in records), default=0)
    return rounds_header(columns), [row for r in records for row in r.rows(columns)]


# --------------------------------------------------------------------------
# 组装
# --------------------------------------------------------------------------


def build_family(config: ExperimentConfig) -> tuple[list[DomainSpec], list[DomainSample]]:
    rng = RngStream(config.run.seed)
    d = config.data
    specs = make_family_specs(d.domains, d.features, d.rho_low, d.rho_high, rng.child("family"))
    samples = generate_family(specs, d.samples_per_domain, rng.child("data"))
    return specs, samples


def build_encoder(config: ExperimentConfig) -> AbstractEncoder:
    if config.model.encoder == "one_layer":
        return OneLayerEncoder(config.data.features)
    return MLPEncoder(config.encoder_arch, config.model.projection_dim)


def build_objective(config: ExperimentConfig, encoder: AbstractEncoder) -> Objective:
    if config.model.loss == "binary_contrastive":
        return BinaryContrastiveObjective()
    assert isinstance(encoder, MLPEncoder)
    return NTXentObjective(encoder, config.model.temperature)


def build_variant(config: ExperimentConfig) -> VariantConfig:
    p = config.protocol
    return VariantConfig(
        local_mode="reweight" if p.algorithm == "fedgala_reweight" else "discard",
        reweight_factor=p.reweight_factor,
        l2_lambda=p.l2_lambda if p.algorithm == "fedgala_l2" else 0.0,
        prox_mu=p.prox_mu if p.algorithm == "fedgala_prox" else 0.0,
    )


# --------------------------------------------------------------------------
# 主循环
# --------------------------------------------------------------------------


def run_protocol(
    config: ExperimentConfig,
    *,
    train_domains: Sequence[DomainSample] | None = None,
    dumper: CheckpointDumper | None = None,
    on_round: RoundCallback | None = None,
    jobs: int | None = None,
) -> tuple[LayeredParams, list[RoundRecord]]:
    """运行联邦训练的完整轮次循环。

    每一轮: 下发全局模型 → 各客户端本地训练 (含本地对齐与变体的正则项)
    → 服务端计算客户端更新并聚合 → 更新全局模型 → 记录 RoundRecord。
    第一轮没有参考方向, 本地不做筛选。

    Args:
        config: 实验配置
        train_domains: 参与训练的域, 每个域一个客户端; None 时使用
            ``build_family(config)`` 中除 ``data.target`` 外的所有域
        dumper: 每轮结束后导出全局参数, None 时不导出
        on_round: 每轮结束后的回调, 返回值写入 ``RoundRecord.probe_accuracy``
        jobs: 并行训练客户端的线程数, None 时取 ``run.jobs``

    Returns:
        (最终全局模型, 每轮一条的 RoundRecord 列表)
    """
    if train_domains is None:
        _, family = build_family(config)
        target = config.target_domain
        train_domains = [s for s in family if s.domain_id != target]
    domains = list(train_domains)
    if not domains:
        raise ValueError("run_protocol needs at least one training domain")

    p = config.protocol
    rng = RngStream(config.run.seed)
    encoder = build_encoder(config)
    objective = build_objective(config, encoder)
    variant = build_variant(config)
    dumper = dumper if dumper is not None else CheckpointDumper(None)
    jobs = jobs if jobs is not None else config.run.jobs
    filtering = p.algorithm not in ("fedavg_ssl", "local_only")
    k = len(domains)
    sizes = [s.n for s in domains] if p.size_weighted else None

    global_now = encoder.init_params(rng.child("init"))
    global_prev: LayeredParams | None = None
    local_models = [global_now] * k
    dumper.dump("round_000", global_now)
    logger.info(
        f"protocol start: algorithm={p.algorithm}, K={k}, T={p.rounds}, E={p.local_epochs}, "
        f"tau={p.tau}, iterations={p.agg_iterations}, params={global_now.dim}"
    )

    records: list[RoundRecord] = []
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        for t in range(1, p.rounds + 1):
            aug = sample_augmentation(rng.child("aug", t), config.data.features)

            def train(
                i: int,
                start: LayeredParams,
                t: int = t,
                aug: AffineAug = aug,
                prev: LayeredParams | None = global_prev,
            ) -> tuple[LayeredParams, DiscardStats, float]:
                client = ClientState(
                    id=i,
                    params=start,
                    data=domains[i],
                    rng=rng.child("client", i, "round", t),
                    learning_rate=p.learning_rate,
                )
                return local_round(
                    client,
                    start,
                    prev,
                    p.local_epochs,
                    p.batch_size,
                    p.tau,
                    aug,
                    objective,
                    grad_hooks=variant.grad_hooks(start),
                    unaligned_factor=variant.unaligned_factor,
                    filtering=filtering,
                )

            starts = local_models if p.algorithm == "local_only" else [global_now] * k
            # map 按提交顺序返回, 之后的归约都按客户端编号进行
            results = list(pool.map(train, range(k), starts))
            client_params = [params for params, _, _ in results]
            stats = [
                ClientRoundStats(i, s, loss, aug.digest())
                for i, (_, s, loss) in enumerate(results)
            ]
            _check_clients(t, client_params, stats)

            record = RoundRecord(round=t, clients=stats)
            if p.algorithm == "local_only":
                local_models = client_params
                new_global = _average(client_params)
            else:
                updates = client_updates(client_params, global_now, t)
                if p.algorithm == "fedavg_ssl":
                    update = fedavg_aggregate(updates, sizes)
                else:
                    report = aligned_aggregate(updates, p.agg_iterations, sizes)
                    update = report.final_update
                    record.weight_history = report.weights_per_iteration
                    if report.fallback_used:
                        logger.warning(f"round {t}: aggregation fell back to uniform weights")
                new_global = apply_global_update(global_now, update)
                if not new_global.is_finite():
                    raise NonFiniteError(
                        f"round {t}: global model became non-finite; update norms per client: "
                        f"{[round(u.norm(), 6) for u in updates]}"
                    )

            global_prev, global_now = global_now, new_global
            record.global_param_norm = global_now.norm()
            if on_round is not None:
                record.probe_accuracy = on_round(t, global_now)
            records.append(record)
            dumper.dump(f"round_{t:03d}", global_now)
            logger.info(
                f"round {t}/{p.rounds}: discard={record.discard_ratio:.3f} "
                f"loss={np.mean([c.mean_loss for c in stats]):.4f} "
                f"|theta|={record.global_param_norm:.4f}"
            )
    return global_now, records


def _check_clients(
    t: int, client_params: Sequence[LayeredParams], stats: Sequence[ClientRoundStats]
) -> None:
    for params, s in zip(client_params, stats, strict=True):
        if not params.is_finite():
            raise NonFiniteError(
                f"round {t}: client {s.client_id} returned non-finite params "
                f"(mean_loss={s.mean_loss}, discarded={s.stats.unaligned}/{s.stats.considered})"
            )


def _average(models: Sequence[LayeredParams]) -> LayeredParams:
    """local_only 的一次性平均。"""
    deltas = [UpdateDelta(m.layers) for m in models]
    return LayeredParams(delta_sum(deltas, [1.0 / len(models)] * len(models)).layers)
