"""
params.py

模型参数的分层表示。``LayeredParams`` 是通信的基本单位 (客户端模型与全局模型
都是它), ``UpdateDelta`` 是两份参数的逐层差, 用来承载客户端更新 g_i、
聚合后的全局更新和本地对齐使用的参考方向。

两者都是不可变值: 构造时拷贝并冻结底层数组, 所有运算返回新对象。
"""

from __future__ import annotations

import hashlib
from collections.abc import Callable, Iterable, Iterator, Mapping
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from fedgala.errors import DimensionError
from fedgala.typ import RealVec


def _frozen(values: ArrayLike) -> RealVec:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != 1:
        raise DimensionError(f"layer values must be 1-D, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class LayeredParams:
    layers: tuple[tuple[str, RealVec], ...]

    def __post_init__(self) -> None:
        names = [name for name, _ in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names: {names}")
        object.__setattr__(
            self, "layers", tuple((name, _frozen(w)) for name, w in self.layers)
        )

    # ---------- 构造 ----------

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, ArrayLike]) -> LayeredParams:
        return cls(tuple((k, np.asarray(v, dtype=np.float64)) for k, v in mapping.items()))

    @classmethod
    def from_flat(cls, template: LayeredParams, flat: ArrayLike) -> LayeredParams:
        vec = np.asarray(flat, dtype=np.float64)
        if vec.shape != (template.dim,):
            raise DimensionError(f"flat vector of length {vec.size}, expected {template.dim}")
        layers: list[tuple[str, RealVec]] = []
        offset = 0
        for name, width in template.widths:
            layers.append((name, vec[offset : offset + width]))
            offset += width
        return cls(tuple(layers))

    def zeros_like(self) -> LayeredParams:
        return type(self)(tuple((n, np.zeros_like(w)) for n, w in self.layers))

    # ---------- 结构 ----------

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.layers]

    @property
    def widths(self) -> list[tuple[str, int]]:
        return [(name, int(w.size)) for name, w in self.layers]

    @property
    def dim(self) -> int:
        return sum(int(w.size) for _, w in self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self) -> Iterator[tuple[str, RealVec]]:
        return iter(self.layers)

    def __getitem__(self, name: str) -> RealVec:
        for n, w in self.layers:
            if n == name:
                return w
        raise KeyError(name)

    def same_shape(self, other: LayeredParams) -> bool:
        return self.widths == other.widths

    def check_shape(self, other: LayeredParams, what: str = "params") -> None:
        if not self.same_shape(other):
            raise DimensionError(
                f"{what}: layer layout {self.widths} != {other.widths}"
            )

    # ---------- 运算 ----------

    def flatten(self) -> RealVec:
        if not self.layers:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate([w for _, w in self.layers])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flatten()))

    def map(self, fn: Callable[[RealVec], ArrayLike]) -> LayeredParams:
        return type(self)(tuple((n, np.asarray(fn(w))) for n, w in self.layers))

    def scaled(self, c: float) -> LayeredParams:
        return self.map(lambda w: c * w)

    def with_layer(self, name: str, values: ArrayLike) -> LayeredParams:
        if name not in self.names:
            raise KeyError(name)
        new = np.asarray(values, dtype=np.float64)
        if new.shape != self[name].shape:
            raise DimensionError(f"layer {name!r}: {new.shape} != {self[name].shape}")
        return type(self)(tuple((n, new if n == name else w) for n, w in self.layers))

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(w))) for _, w in self.layers)

    def digest(self) -> str:
        """参数内容 (含层名) 的 sha256, 用于断言"探针不修改编码器"之类的不变量。"""
        h = hashlib.sha256()
        for name, w in self.layers:
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
        return h.hexdigest()

    def allclose(self, other: LayeredParams, atol: float = 0.0) -> bool:
        if not self.same_shape(other):
            return False
        return all(
            bool(np.allclose(a, b, rtol=0.0, atol=atol))
            for (_, a), (_, b) in zip(self.layers, other.layers)
        )


@dataclass(frozen=True, eq=False)
class UpdateDelta(LayeredParams):
    round: int = 0

    def zeros_like(self) -> UpdateDelta:
        return UpdateDelta(tuple((n, np.zeros_like(w)) for n, w in self.layers), self.round)

    def map(self, fn: Callable[[RealVec], ArrayLike]) -> UpdateDelta:
        return UpdateDelta(
            tuple((n, np.asarray(fn(w))) for n, w in self.layers), self.round
        )

    def scaled(self, c: float) -> UpdateDelta:
        return self.map(lambda w: c * w)

    def with_layer(self, name: str, values: ArrayLike) -> UpdateDelta:
        base = LayeredParams.with_layer(self, name, values)
        return UpdateDelta(base.layers, self.round)


def params_sub(a: LayeredParams, b: LayeredParams, round: int = 0) -> UpdateDelta:
    """逐层 a - b。"""
    a.check_shape(b, "subtract")
    return UpdateDelta(
        tuple((n, wa - wb) for (n, wa), (_, wb) in zip(a.layers, b.layers)), round
    )


def params_add(a: LayeredParams, delta: LayeredParams) -> LayeredParams:
    """逐层 a + delta, 结果是 ``LayeredParams``。"""
    a.check_shape(delta, "add")
    return LayeredParams(
        tuple((n, wa + wd) for (n, wa), (_, wd) in zip(a.layers, delta.layers))
    )


def delta_sum(deltas: Iterable[UpdateDelta], weights: Iterable[float]) -> UpdateDelta:
    """Σ w_k · delta_k, 按给定顺序逐层累加 (调用方保证顺序固定)。"""
    pairs = list(zip(deltas, weights, strict=True))
    if not pairs:
        raise ValueError("delta_sum of an empty list")
    first = pairs[0][0]
    acc = [np.zeros_like(w) for _, w in first.layers]
    for delta, weight in pairs:
        first.check_shape(delta, "aggregate")
        for idx, (_, w) in enumerate(delta.layers):
            acc[idx] = acc[idx] + weight * w
    return UpdateDelta(
        tuple((n, a) for (n, _), a in zip(first.layers, acc)), first.round
    )
