from __future__ import annotations

from collections.abc import Callable

import numpy as np
from numpy.typing import ArrayLike

from fedgala.errors import DimensionError, NonFiniteError
from fedgala.typ import Matrix, RealVec

ZERO_NORM_EPS = 1e-12


def as_vec(x: ArrayLike) -> RealVec:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {arr.shape}")
    return arr


def cosine(u: ArrayLike, v: ArrayLike) -> float:
    """余弦相似度; 任一向量范数低于 1e-12 时返回 0 (视为"不对齐")。"""
    a = as_vec(u)
    b = as_vec(v)
    if a.shape != b.shape:
        raise DimensionError(f"cosine of vectors with length {len(a)} and {len(b)}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        return 0.0
    c = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, c))


def check_finite(arr: ArrayLike, what: str) -> None:
    if not np.all(np.isfinite(np.asarray(arr))):
        raise NonFiniteError(f"non-finite values in {what}")


def central_jacobian(
    fn: Callable[[RealVec], ArrayLike], x0: ArrayLike, step: float = 1e-5
) -> Matrix:
    """中心差分雅可比, 第 f 列为 (fn(x0 + h e_f) - fn(x0 - h e_f)) / 2h。"""
    x = as_vec(x0)
    cols = []
    for f in range(x.size):
        e = np.zeros_like(x)
        e[f] = step
        cols.append((as_vec(fn(x + e)) - as_vec(fn(x - e))) / (2.0 * step))
    jac: Matrix = np.stack(cols, axis=1)
    return jac
