"""
mlp.py

小型全连接编码器 (tanh 激活, 线性输出) 与手写的反向传播。

每一层的权重矩阵 (out x in, 行主序展开) 与偏置拼成 ``LayeredParams`` 中的
一层, 名为 ``fc{l}``, 这样本地梯度对齐可以逐层筛选。
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike
from typing_extensions import override

from fedgala.errors import DimensionError
from fedgala.params import LayeredParams, UpdateDelta
from fedgala.typ import Matrix, RealVec
from fedgala.utils.numeric import as_vec
from fedgala.utils.rng import RngStream

from .abc import AbstractEncoder

DEFAULT_HIDDEN = (32, 16)


def layer_name(idx: int) -> str:
    return f"fc{idx}"


def layer_shapes(arch: list[int]) -> list[tuple[int, int]]:
    """每层的 (out, in)。"""
    if len(arch) < 2 or any(w < 1 for w in arch):
        raise DimensionError(f"arch needs >= 2 positive widths, got {arch}")
    return [(arch[i + 1], arch[i]) for i in range(len(arch) - 1)]


def unpack(params: LayeredParams, arch: list[int]) -> list[tuple[Matrix, RealVec]]:
    shapes = layer_shapes(arch)
    expected = [(layer_name(i), o * n + o) for i, (o, n) in enumerate(shapes)]
    if params.widths != expected:
        raise DimensionError(f"params layout {params.widths} does not match arch {arch}")
    out: list[tuple[Matrix, RealVec]] = []
    for (o, n), (_, flat) in zip(shapes, params.layers):
        out.append((flat[: o * n].reshape(o, n), flat[o * n :]))
    return out


def pack(
    layers: list[tuple[Matrix, RealVec]], round: int = 0
) -> UpdateDelta:
    return UpdateDelta(
        tuple(
            (layer_name(i), np.concatenate([w.ravel(), b]))
            for i, (w, b) in enumerate(layers)
        ),
        round,
    )


@dataclass
class ForwardCache:
    # activations[0] 是输入, activations[l] 是第 l 层的输入
    activations: list[Matrix]
    output: Matrix


def mlp_forward_batch(
    params: LayeredParams,
    x: Matrix,
    arch: list[int],
    depth: int | None = None,
    activate_last: bool = False,
) -> ForwardCache:
    """前向传播。``depth`` 只走前 depth 层; ``activate_last`` 对最后一层也取 tanh。"""
    layers = unpack(params, arch)
    if x.ndim != 2 or x.shape[1] != arch[0]:
        raise DimensionError(f"batch of shape {x.shape}, arch expects {arch[0]} inputs")
    n_layers = len(layers) if depth is None else depth
    if not 1 <= n_layers <= len(layers):
        raise DimensionError(f"depth {depth} outside 1..{len(layers)}")
    h = x
    activations = [h]
    for idx in range(n_layers):
        w, b = layers[idx]
        z = h @ w.T + b
        last = idx == n_layers - 1
        h = np.tanh(z) if (not last or activate_last) else z
        if not last:
            activations.append(h)
    return ForwardCache(activations=activations, output=h)


def mlp_forward(params: LayeredParams, x: ArrayLike, arch: list[int]) -> RealVec:
    vec = as_vec(x)
    out: RealVec = mlp_forward_batch(params, vec[None, :], arch).output[0]
    return out


def mlp_backward(
    params: LayeredParams,
    batch: Matrix,
    loss_grad_at_embeddings: Matrix,
    arch: list[int],
    cache: ForwardCache | None = None,
) -> UpdateDelta:
    """由嵌入处的上游梯度反传得到逐层参数梯度 (与 params 同形)。"""
    layers = unpack(params, arch)
    if cache is None:
        cache = mlp_forward_batch(params, batch, arch)
    g = np.asarray(loss_grad_at_embeddings, dtype=np.float64)
    if g.shape != cache.output.shape:
        raise DimensionError(
            f"upstream gradient of shape {g.shape}, embeddings are {cache.output.shape}"
        )
    grads: list[tuple[Matrix, RealVec]] = [None] * len(layers)  # type: ignore[list-item]
    for idx in range(len(layers) - 1, -1, -1):
        h_in = cache.activations[idx]
        grads[idx] = (g.T @ h_in, g.sum(axis=0))
        if idx > 0:
            w, _ = layers[idx]
            # h_in 是上一层 tanh 的输出
            g = (g @ w) * (1.0 - h_in**2)
    return pack(grads)


class MLPEncoder(AbstractEncoder):
    """``arch`` 是编码器部分, ``projection_dim > 0`` 时再接一层线性投影头;
    训练作用在整个网络上, 探针只看编码器输出。"""

    NAME = "mlp"

    def __init__(self, arch: list[int], projection_dim: int = 16) -> None:
        layer_shapes(arch)
        if projection_dim < 0:
            raise ValueError(f"projection_dim must be >= 0, got {projection_dim}")
        self._encoder_arch = list(arch)
        self._projection_dim = projection_dim

    @property
    def arch(self) -> list[int]:
        """训练用的完整网络宽度。"""
        if self._projection_dim:
            return [*self._encoder_arch, self._projection_dim]
        return list(self._encoder_arch)

    @property
    @override
    def feature_count(self) -> int:
        return self._encoder_arch[0]

    @override
    def init_params(self, rng: RngStream) -> LayeredParams:
        layers: list[tuple[str, RealVec]] = []
        for idx, (o, n) in enumerate(layer_shapes(self.arch)):
            bound = 1.0 / np.sqrt(n)
            flat = rng.child("init", layer_name(idx)).generator().uniform(
                -bound, bound, o * n + o
            )
            layers.append((layer_name(idx), flat))
        return LayeredParams(tuple(layers))

    def forward(self, params: LayeredParams, x: Matrix) -> ForwardCache:
        return mlp_forward_batch(params, x, self.arch)

    def backward(
        self, params: LayeredParams, x: Matrix, grad: Matrix, cache: ForwardCache
    ) -> UpdateDelta:
        return mlp_backward(params, x, grad, self.arch, cache)

    @override
    def embed(self, params: LayeredParams, x: Matrix) -> Matrix:
        depth = len(self._encoder_arch) - 1
        cache = mlp_forward_batch(
            params, x, self.arch, depth=depth, activate_last=bool(self._projection_dim)
        )
        return cache.output
