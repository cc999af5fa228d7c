"""
evaluation.py

线性探测: 冻结编码器, 在目标域的一小部分有标签数据上训练一个 linear + softmax
分类器, 在剩余数据上报告准确率。标签只在这里通过 ``LabelRule`` 求值,
联邦训练路径从不接触标签。
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from logging import getLogger

import numpy as np
from scipy.special import softmax

from fedgala.config import ExperimentConfig
from fedgala.core import RoundCallback, build_encoder, build_family, run_protocol
from fedgala.domains import DomainSample, LabelRule
from fedgala.encoder import AbstractEncoder
from fedgala.errors import DegenerateSplitError, DimensionError
from fedgala.params import LayeredParams
from fedgala.typ import IndexVec, Matrix
from fedgala.utils.rng import RngStream

logger = getLogger(__name__)

DEFAULT_PROBE_LR = 0.1
DEFAULT_PROBE_EPOCHS = 100
MAX_RESHUFFLES = 10


@dataclass(frozen=True)
class ProbeResult:
    target_domain: int
    labeled_fraction: float
    accuracy: float
    seed: int
    algorithm: str = ""

    def row(self) -> list[object]:
        return [self.target_domain, self.labeled_fraction, self.accuracy, self.seed, self.algorithm]


PROBE_HEADER = ["target_domain", "labeled_fraction", "accuracy", "seed", "algorithm"]


def probe_split(
    labels: IndexVec,
    labeled_fraction: float,
    rng: RngStream,
    max_reshuffles: int = MAX_RESHUFFLES,
) -> tuple[IndexVec, IndexVec]:
    """按比例划分 (探针训练集, 测试集), 训练集少于两个类别时换下一个种子重抽。"""
    if not 0.0 < labeled_fraction < 1.0:
        raise ValueError(f"labeled_fraction must lie in (0, 1), got {labeled_fraction}")
    n = labels.size
    n_train = min(max(1, round(labeled_fraction * n)), n - 1)
    for attempt in range(max_reshuffles):
        order = rng.child("split", attempt).generator().permutation(n)
        train, test = np.sort(order[:n_train]), np.sort(order[n_train:])
        if np.unique(labels[train]).size >= 2:
            return train, test
        logger.warning(
            f"probe split attempt {attempt} has a single class "
            f"({n_train} labeled samples), reshuffling"
        )
    raise DegenerateSplitError(
        f"no split with >= 2 classes after {max_reshuffles} attempts "
        f"(n={n}, labeled_fraction={labeled_fraction})"
    )


def train_softmax_probe(
    features: Matrix,
    labels: IndexVec,
    epochs: int = DEFAULT_PROBE_EPOCHS,
    learning_rate: float = DEFAULT_PROBE_LR,
) -> tuple[Matrix, np.ndarray]:
    """全批量梯度下降训练 linear + softmax, 交叉熵取样本均值。返回 (W, b)。"""
    n, d = features.shape
    classes = int(labels.max()) + 1
    onehot = np.eye(classes)[labels]
    w = np.zeros((d, classes))
    b = np.zeros(classes)
    for _ in range(epochs):
        prob = softmax(features @ w + b, axis=1)
        err = (prob - onehot) / n
        w -= learning_rate * (features.T @ err)
        b -= learning_rate * err.sum(axis=0)
    return w, b


def linear_probe(
    params: LayeredParams,
    target: DomainSample,
    labels: IndexVec,
    labeled_fraction: float,
    epochs: int,
    rng: RngStream,
    *,
    encoder: AbstractEncoder,
    learning_rate: float = DEFAULT_PROBE_LR,
    algorithm: str = "",
) -> ProbeResult:
    if labels.shape != (target.n,):
        raise DimensionError(f"{labels.size} labels for {target.n} target samples")
    feats = encoder.embed(params, target.data)
    train, test = probe_split(labels, labeled_fraction, rng)

    # 用训练部分的统计量标准化
    mean = feats[train].mean(axis=0)
    std = feats[train].std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    z = (feats - mean) / std

    w, b = train_softmax_probe(z[train], labels[train], epochs, learning_rate)
    pred = np.argmax(z[test] @ w + b, axis=1)
    accuracy = float(np.mean(pred == labels[test]))
    logger.debug(
        f"probe domain {target.domain_id} fraction={labeled_fraction}: "
        f"train={train.size} test={test.size} acc={accuracy:.4f}"
    )
    return ProbeResult(target.domain_id, labeled_fraction, accuracy, rng.seed, algorithm)


def probe_rng(config: ExperimentConfig, target: int, fraction_idx: int) -> RngStream:
    return RngStream(config.run.seed).child("probe", target, fraction_idx)


def probe_all_fractions(
    config: ExperimentConfig,
    params: LayeredParams,
    target: DomainSample,
    rule: LabelRule,
) -> list[ProbeResult]:
    encoder = build_encoder(config)
    labels = rule.labels(target)
    return [
        linear_probe(
            params,
            target,
            labels,
            frac,
            config.eval.probe_epochs,
            probe_rng(config, target.domain_id, idx),
            encoder=encoder,
            learning_rate=config.eval.probe_lr,
            algorithm=config.protocol.algorithm,
        )
        for idx, frac in enumerate(config.eval.labeled_fractions)
    ]


def round_prober(
    config: ExperimentConfig, target: DomainSample, rule: LabelRule
) -> RoundCallback | None:
    """``eval.probe_every > 0`` 时给 run_protocol 用的每轮回调。"""
    every = config.eval.probe_every
    if every <= 0:
        return None
    encoder = build_encoder(config)
    labels = rule.labels(target)
    frac = config.eval.labeled_fractions[0]

    def on_round(t: int, params: LayeredParams) -> float | None:
        if t % every:
            return None
        return linear_probe(
            params,
            target,
            labels,
            frac,
            config.eval.probe_epochs,
            probe_rng(config, target.domain_id, 0),
            encoder=encoder,
            learning_rate=config.eval.probe_lr,
        ).accuracy

    return on_round


def leave_one_domain_out(config: ExperimentConfig) -> list[ProbeResult]:
    """依次留出每个域作为目标, 在其余域上 (每域一个客户端) 跑完整协议后探测。

    目标域之间用 ``run.jobs`` 个线程并行, 单次协议内部不再并行。
    结果按 (目标域, labeled_fraction) 排序。
    """
    specs, family = build_family(config)
    if len(family) < 2:
        raise ValueError(f"leave-one-domain-out needs >= 2 domains, got {len(family)}")

    def one_target(target: int) -> list[ProbeResult]:
        rule = specs[target].label_rule
        assert rule is not None
        train = [s for s in family if s.domain_id != target]
        logger.info(f"lodo: target domain {target}, {len(train)} clients")
        final, _ = run_protocol(
            config,
            train_domains=train,
            on_round=round_prober(config, family[target], rule),
            jobs=1,
        )
        return probe_all_fractions(config, final, family[target], rule)

    with ThreadPoolExecutor(max_workers=config.run.jobs) as pool:
        per_target = list(pool.map(one_target, range(len(family))))
    results = [r for rs in per_target for r in rs]
    for r in results:
        logger.info(
            f"lodo target={r.target_domain} fraction={r.labeled_fraction}: acc={r.accuracy:.4f}"
        )
    return results
