"""测试共用的小工具: 有限差分与小规模配置。"""

from __future__ import annotations

from collections.abc import Callable
from typing import Any

import numpy as np

from fedgala.config import ExperimentConfig


def fd_gradient(fn: Callable[[np.ndarray], float], x0: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """标量函数的中心差分梯度。"""
    x0 = np.asarray(x0, dtype=np.float64)
    out = np.empty_like(x0)
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = h
        out[i] = (fn(x0 + e) - fn(x0 - e)) / (2.0 * h)
    return out


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def tiny_config(**overrides: Any) -> ExperimentConfig:
    """几秒内能跑完的配置; ``overrides`` 用 ``protocol__tau=0.5`` 的形式给出。"""
    flat: dict[str, Any] = {
        "protocol.rounds": 2,
        "protocol.local_epochs": 1,
        "protocol.batch_size": 16,
        "data.domains": 3,
        "data.features": 4,
        "data.samples_per_domain": 64,
        "model.arch": [4, 6, 3],
        "model.projection_dim": 3,
        "eval.probe_epochs": 20,
        "eval.labeled_fractions": [0.5],
    }
    flat.update({k.replace("__", "."): v for k, v in overrides.items()})
    return ExperimentConfig().updated(flat)
