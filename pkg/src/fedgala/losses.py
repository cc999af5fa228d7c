"""
losses.py

自监督目标函数:

- ``binary_contrastive_loss``: 单层编码器的二元交叉熵对比损失。每个样本与它自己的
  增强构成正样本对, 与 batch 中其余每个样本构成负样本对。
- ``ntxent_loss``: MLP 编码器使用的 NT-Xent (归一化温度交叉熵)。

两者都返回 (loss, 精确梯度), 损失按样本对求和, 不取平均。
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike
from scipy.special import expit, log_expit, logsumexp

from fedgala.domains import AffineAug, augment_batch
from fedgala.errors import BatchTooSmallError, DimensionError
from fedgala.typ import IndexVec, Matrix, RealVec
from fedgala.utils.numeric import as_vec

PROB_CLAMP = 1e-12
DEFAULT_TEMPERATURE = 0.5

_LOG_LO = float(np.log(PROB_CLAMP))
_LOG_HI = float(np.log1p(-PROB_CLAMP))


@dataclass(frozen=True)
class ContrastiveBatch:
    anchors: Matrix
    positives: Matrix
    batch_indices: IndexVec
    aug_digest: str = ""

    @classmethod
    def build(cls, anchors: Matrix, aug: AffineAug, indices: ArrayLike) -> ContrastiveBatch:
        idx = np.asarray(indices, dtype=np.int64)
        if anchors.ndim != 2 or idx.shape != (anchors.shape[0],):
            raise DimensionError(
                f"anchors of shape {anchors.shape} with {idx.size} indices"
            )
        return cls(anchors, augment_batch(anchors, aug), idx, aug.digest())

    @property
    def size(self) -> int:
        return int(self.anchors.shape[0])

    def verify(self, aug: AffineAug) -> None:
        """断言 positives[i] == A anchors[i] + B, 且记录的增强就是这一轮广播的那个。"""
        assert self.aug_digest == aug.digest(), (
            f"batch built with augmentation {self.aug_digest}, round uses {aug.digest()}"
        )
        assert np.array_equal(self.positives, augment_batch(self.anchors, aug))

    def interleaved(self) -> Matrix:
        """按 (anchor_0, positive_0, anchor_1, positive_1, ...) 交错排列的 2B 行。"""
        out = np.empty((2 * self.size, self.anchors.shape[1]), dtype=np.float64)
        out[0::2] = self.anchors
        out[1::2] = self.positives
        return out


# --------------------------------------------------------------------------
# 单层编码器的二元对比损失
# --------------------------------------------------------------------------


def binary_contrastive_loss(W: ArrayLike, batch: ContrastiveBatch) -> tuple[float, RealVec]:
    w = as_vec(W)
    x = batch.anchors
    if x.shape[1] != w.size:
        raise DimensionError(f"batch has {x.shape[1]} features, |W| = {w.size}")

    # 正样本对: (x_i, A x_i + B), y = 1
    diff_pos = x - batch.positives
    s_pos = diff_pos @ w
    loss = -float(np.sum(np.clip(log_expit(s_pos), _LOG_LO, _LOG_HI)))
    grad = (expit(s_pos) - 1.0) @ diff_pos

    # 负样本对: 所有有序对 (x_i, x_j), i != j, y = 0
    if batch.size > 1:
        u = x @ w
        s_neg = u[:, None] - u[None, :]
        off_diag = ~np.eye(batch.size, dtype=bool)
        log_one_minus = np.clip(log_expit(-s_neg), _LOG_LO, _LOG_HI)
        loss -= float(np.sum(log_one_minus[off_diag]))
        p = np.where(off_diag, expit(s_neg), 0.0)
        # Σ_ij p_ij (x_i - x_j)
        grad = grad + (p.sum(axis=1) - p.sum(axis=0)) @ x
    return loss, grad


def binary_pair_count(batch_size: int) -> int:
    return batch_size + batch_size * (batch_size - 1)


# --------------------------------------------------------------------------
# NT-Xent
# --------------------------------------------------------------------------


def ntxent_loss(
    embeddings: Matrix,
    temperature: float = DEFAULT_TEMPERATURE,
) -> tuple[float, Matrix]:
    """第 2k 与 2k+1 行互为正样本对, 其余行都是负样本。

    损失 = Σ_k [l(2k, 2k+1) + l(2k+1, 2k)] / 2, 即对每个正样本对求和。
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2:
        raise DimensionError(f"embeddings must be 2-D, got shape {z.shape}")
    n, d = z.shape
    if n % 2:
        raise DimensionError(f"need an even number of rows (pairs), got {n}")
    if d == 0 or n < 4:
        raise BatchTooSmallError(
            f"NT-Xent needs >= 2 pairs and a non-empty embedding, got {n // 2} pairs, d={d}"
        )

    norms = np.maximum(np.linalg.norm(z, axis=1), 1e-12)
    u = z / norms[:, None]
    sim = (u @ u.T) / temperature
    np.fill_diagonal(sim, -np.inf)
    partner = np.arange(n) ^ 1

    lse = logsumexp(sim, axis=1)
    loss = 0.5 * float(np.sum(lse - sim[np.arange(n), partner]))

    prob = np.exp(sim - lse[:, None])
    prob[np.arange(n), partner] -= 1.0
    g_sim = 0.5 * prob
    g_u = (g_sim + g_sim.T) @ u / temperature
    # 通过归一化 u = z / |z| 回传
    radial = np.sum(g_u * u, axis=1)
    grad: Matrix = (g_u - radial[:, None] * u) / norms[:, None]
    return loss, grad
