"""
rng.py

可复现的随机数流。``RngStream`` 是一个值对象: 相同的 (seed, stream_id)
在任何平台上都得到相同的采样序列 (PCG64 + SeedSequence)。

并行的 worker 各自通过 :meth:`RngStream.child` 派生独立的 stream_id,
不共享任何可变的 Generator 状态。
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from fedgala.errors import EmptyRequestError
from fedgala.typ import RealVec

_U64 = 1 << 64


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.seed < _U64:
            raise ValueError(f"seed must be a 64-bit unsigned int, got {self.seed}")
        if not 0 <= self.stream_id < _U64:
            raise ValueError(
                f"stream_id must be a 64-bit unsigned int, got {self.stream_id}"
            )

    def generator(self) -> np.random.Generator:
        """返回一个从头开始的 Generator; 每次调用都重新开始同一序列。"""
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, *path: int | str) -> RngStream:
        """按路径派生子流, 例如 ``rng.child("client", 2, "round", 7)``。"""
        h = hashlib.blake2b(digest_size=8)
        h.update(self.stream_id.to_bytes(8, "little"))
        for part in path:
            h.update(repr(part).encode("utf-8"))
            h.update(b"/")
        return RngStream(self.seed, int.from_bytes(h.digest(), "little"))


def sample_standard_normal(rng: RngStream, n: int) -> RealVec:
    if n < 1:
        raise EmptyRequestError(f"requested {n} normal draws, need at least 1")
    return rng.generator().standard_normal(n)
