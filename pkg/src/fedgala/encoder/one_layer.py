"""
one_layer.py

理论分析所用的单层 sigmoid 编码器: W 是一个行向量, 对一对样本给出

    y_hat = sigmoid(W x1 - W x2)

没有偏置项。对比损失是二元交叉熵, 正样本对 y = 1, 负样本对 y = 0。
"""

from __future__ import annotations

import numpy as np
from numpy.typing import ArrayLike
from scipy.special import expit
from typing_extensions import override

from fedgala.errors import DimensionError
from fedgala.params import LayeredParams
from fedgala.typ import Matrix, RealVec
from fedgala.utils.numeric import as_vec
from fedgala.utils.rng import RngStream

from .abc import AbstractEncoder

LAYER_NAME = "w"


def _check(w: RealVec, x1: RealVec, x2: RealVec) -> None:
    if not (w.size == x1.size == x2.size):
        raise DimensionError(
            f"one-layer encoder with |W|={w.size}, |x1|={x1.size}, |x2|={x2.size}"
        )


def one_layer_forward(W: ArrayLike, x1: ArrayLike, x2: ArrayLike) -> float:
    w, a, b = as_vec(W), as_vec(x1), as_vec(x2)
    _check(w, a, b)
    return float(expit(np.dot(w, a) - np.dot(w, b)))


def one_layer_contrastive_grad(
    W: ArrayLike,
    x1: ArrayLike,
    x2: ArrayLike,
    is_positive: bool,
) -> RealVec:
    """BCE 对比损失对 W 的梯度: 正样本对 (y_hat - 1)(x1 - x2), 负样本对 y_hat (x1 - x2)。"""
    w, a, b = as_vec(W), as_vec(x1), as_vec(x2)
    _check(w, a, b)
    diff = a - b
    y_hat = float(expit(np.dot(w, diff)))
    coeff = y_hat - 1.0 if is_positive else y_hat
    out: RealVec = coeff * diff
    return out


class OneLayerEncoder(AbstractEncoder):
    NAME = "one_layer"

    def __init__(self, feature_count: int) -> None:
        if feature_count < 1:
            raise DimensionError(f"feature_count must be >= 1, got {feature_count}")
        self._features = feature_count

    @property
    @override
    def feature_count(self) -> int:
        return self._features

    @override
    def init_params(self, rng: RngStream) -> LayeredParams:
        bound = 1.0 / np.sqrt(self._features)
        w = rng.child("init", LAYER_NAME).generator().uniform(-bound, bound, self._features)
        return LayeredParams(((LAYER_NAME, w),))

    @override
    def embed(self, params: LayeredParams, x: Matrix) -> Matrix:
        w = params[LAYER_NAME]
        if x.ndim != 2 or x.shape[1] != w.size:
            raise DimensionError(f"batch of shape {x.shape} for |W|={w.size}")
        out: Matrix = (x @ w)[:, None]
        return out
