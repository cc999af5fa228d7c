"""
config.py

实验配置。文件格式是扁平的 ``key = value`` 文本::

    # 注释
    protocol.tau = 0
    protocol.algorithm = fedgala
    eval.labeled_fractions = 0.1, 0.3

键名带点号分节 (``protocol.*``, ``model.*``, ``data.*``, ``eval.*``,
``theory.*``, ``sweep.*``, ``run.*``), 列表值用逗号分隔。解析后交给 pydantic
校验, 所有节都是 ``extra="forbid"``。
"""

from __future__ import annotations

import types
import typing
from collections.abc import Mapping
from logging import getLogger
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from fedgala.errors import ConfigError

logger = getLogger(__name__)

Algorithm = Literal[
    "fedgala",
    "fedavg_ssl",
    "fedgala_reweight",
    "fedgala_l2",
    "fedgala_prox",
    "local_only",
]
EncoderKind = Literal["one_layer", "mlp"]
LossKind = Literal["binary_contrastive", "ntxent"]
SummaryKind = Literal["mean_diag", "trace", "frobenius"]
SweepParameter = Literal["tau", "local_epochs", "agg_iterations", "batch_size", "comm_frequency"]

DEFAULT_GRID = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# --------------------------------------------------------------------------
# 各节
# --------------------------------------------------------------------------


class ProtocolConfig(_Section):
    rounds: int = Field(100, ge=0)  # T
    local_epochs: int = Field(7, ge=1)  # E
    batch_size: int = Field(128, ge=1)
    tau: float = Field(0.0, ge=-1.0, le=1.0)
    agg_iterations: int = Field(3, ge=0)
    learning_rate: float = Field(0.05, gt=0.0)  # η
    algorithm: Algorithm = "fedgala"

    # ---------- 变体参数 ----------
    reweight_factor: float = Field(0.01, gt=0.0, le=1.0)
    l2_lambda: float = Field(0.0, ge=0.0)
    prox_mu: float = Field(0.0, ge=0.0)

    # FedAVG 按数据量加权
    size_weighted: bool = False


class ModelConfig(_Section):
    encoder: EncoderKind = "mlp"
    # None 表示 [data.features, 32, 16]
    arch: list[int] | None = None
    projection_dim: int = Field(16, ge=0)
    loss: LossKind = "ntxent"
    temperature: float = Field(0.5, gt=0.0)


class DataConfig(_Section):
    domains: int = Field(4, ge=2)
    features: int = Field(8, ge=1, le=256)
    samples_per_domain: int = Field(2000, ge=1)
    rho_low: float = Field(0.3, ge=0.0, le=1.0)
    rho_high: float = Field(0.95, ge=0.0, le=1.0)
    # run 子命令留出的目标域, -1 为最后一个
    target: int = -1


class EvalConfig(_Section):
    labeled_fractions: list[float] = Field(default_factory=lambda: [0.1, 0.3])
    probe_epochs: int = Field(100, ge=1)
    probe_lr: float = Field(0.1, gt=0.0)
    # 每隔 k 轮在目标域上做一次线性探测, 0 为关闭
    probe_every: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_fractions(self) -> EvalConfig:
        if not self.labeled_fractions:
            raise ValueError("labeled_fractions must not be empty")
        for frac in self.labeled_fractions:
            if not 0.0 < frac < 1.0:
                raise ValueError(f"labeled fraction must lie in (0, 1), got {frac}")
        return self


class TheoryConfig(_Section):
    summary: SummaryKind = "mean_diag"
    grid: list[float] = Field(default_factory=lambda: list(DEFAULT_GRID))
    seeds: int = Field(5, ge=1)
    samples: int = Field(2000, ge=2)
    local_steps: int = Field(10, ge=1)
    learning_rate: float = Field(1.0, gt=0.0)
    lemma_samples: int = Field(100_000, ge=2)
    taylor_samples: int = Field(1_000_000, ge=2)
    prop1_trials: int = Field(1000, ge=1)
    claim_augmentations: int = Field(100, ge=1)
    claim_negatives: int = Field(1000, ge=1)

    @model_validator(mode="after")
    def _check_grid(self) -> TheoryConfig:
        for c in self.grid:
            if not 0.0 < c < 1.0:
                raise ValueError(f"theory grid values must lie in (0, 1), got {c}")
        return self


class SweepConfig(_Section):
    parameter: SweepParameter = "tau"
    values: list[float] = Field(default_factory=lambda: [-1.0, -0.5, 0.0, 0.5])
    total_local_epochs: int = Field(9, ge=1)
    seeds: int = Field(1, ge=1)


class RunConfig(_Section):
    seed: int = Field(0, ge=0, lt=2**64)
    jobs: int = Field(1, ge=1)


SECTIONS: dict[str, type[_Section]] = {
    "protocol": ProtocolConfig,
    "model": ModelConfig,
    "data": DataConfig,
    "eval": EvalConfig,
    "theory": TheoryConfig,
    "sweep": SweepConfig,
    "run": RunConfig,
}


# --------------------------------------------------------------------------
# 顶层配置
# --------------------------------------------------------------------------


class ExperimentConfig(_Section):
    protocol: ProtocolConfig = Field(default_factory=ProtocolConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    theory: TheoryConfig = Field(default_factory=TheoryConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    run: RunConfig = Field(default_factory=RunConfig)

    @model_validator(mode="after")
    def _check_consistency(self) -> ExperimentConfig:
        pairing = {"one_layer": "binary_contrastive", "mlp": "ntxent"}
        if pairing[self.model.encoder] != self.model.loss:
            raise ValueError(
                f"encoder {self.model.encoder!r} trains with loss "
                f"{pairing[self.model.encoder]!r}, got {self.model.loss!r}"
            )
        arch = self.encoder_arch
        if self.model.encoder == "mlp":
            if len(arch) < 2 or any(w < 1 for w in arch):
                raise ValueError(f"mlp arch needs >= 2 positive widths, got {arch}")
            if arch[0] != self.data.features:
                raise ValueError(
                    f"mlp arch starts with {arch[0]}, data.features is {self.data.features}"
                )
        if not -self.data.domains <= self.data.target < self.data.domains:
            raise ValueError(
                f"data.target {self.data.target} out of range for {self.data.domains} domains"
            )
        if self.data.rho_low > self.data.rho_high:
            raise ValueError(
                f"data.rho_low {self.data.rho_low} > data.rho_high {self.data.rho_high}"
            )
        return self

    # ---------- 派生量 ----------

    @property
    def clients(self) -> int:
        """K: 每个训练域一个客户端 (cross-silo)。"""
        return self.data.domains - 1

    @property
    def target_domain(self) -> int:
        return self.data.target % self.data.domains

    @property
    def encoder_arch(self) -> list[int]:
        if self.model.arch is not None:
            return list(self.model.arch)
        return [self.data.features, 32, 16]

    # ---------- 覆盖 / 序列化 ----------

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        for section in SECTIONS:
            values = getattr(self, section).model_dump()
            for key, value in values.items():
                flat[f"{section}.{key}"] = value
        return flat

    def updated(self, overrides: Mapping[str, Any]) -> ExperimentConfig:
        """返回应用了 ``{"protocol.tau": 0.5, ...}`` 覆盖后的新配置。"""
        flat = self.to_flat()
        for key in overrides:
            if key not in flat:
                raise ConfigError(_unknown_key_message(key))
        flat.update(overrides)
        return _validate(_nest(flat), {})

    def dumps(self) -> str:
        """规范化的完整配置 (包括默认值), 键按字母序。"""
        lines = ["# resolved fedgala config"]
        flat = self.to_flat()
        # 只在输出时展开默认结构, 覆盖 data.features 后仍按新值推导
        flat["model.arch"] = self.encoder_arch
        for key, value in sorted(flat.items()):
            lines.append(f"{key} = {_format_value(value)}")
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# 解析
# --------------------------------------------------------------------------


def valid_keys() -> list[str]:
    return sorted(
        f"{section}.{key}" for section, model in SECTIONS.items() for key in model.model_fields
    )


def _unknown_key_message(key: str) -> str:
    return f"unknown key {key!r}; valid keys: {', '.join(valid_keys())}"


def _is_list_field(section: str, key: str) -> bool:
    annotation = SECTIONS[section].model_fields[key].annotation
    candidates = [annotation]
    if isinstance(annotation, types.UnionType) or typing.get_origin(annotation) is typing.Union:
        candidates = list(typing.get_args(annotation))
    return any(typing.get_origin(c) is list for c in candidates)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.17g}"
    if isinstance(value, list):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def _nest(flat: Mapping[str, Any]) -> dict[str, dict[str, Any]]:
    nested: dict[str, dict[str, Any]] = {}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        nested.setdefault(section, {})[name] = value
    return nested


def _validate(nested: dict[str, dict[str, Any]], lines: Mapping[str, int]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(nested)
    except ValidationError as e:
        err = e.errors()[0]
        loc = ".".join(str(part) for part in err["loc"])
        where = f"line {lines[loc]}: " if loc in lines else ""
        raise ConfigError(f"{where}{loc or 'config'}: {err['msg']}") from e


def parse_config(text: str) -> ExperimentConfig:
    values: dict[str, Any] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        section, dot, name = key.partition(".")
        if not dot or section not in SECTIONS or name not in SECTIONS[section].model_fields:
            raise ConfigError(f"line {lineno}: {_unknown_key_message(key)}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first on line {lines[key]})")
        if not value:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        if _is_list_field(section, name):
            values[key] = [item.strip() for item in value.split(",") if item.strip()]
        else:
            values[key] = value
        lines[key] = lineno
    return _validate(_nest(values), lines)


def load_config(path: str | Path | None) -> ExperimentConfig:
    """读取配置文件; ``None`` 返回全默认配置。文件不存在时抛 FileNotFoundError。"""
    if path is None:
        return ExperimentConfig()
    with open(path, encoding="utf-8") as fp:
        text = fp.read()
    logger.debug(f"loaded config from {path}")
    return parse_config(text)
