"""
debug.py

每轮全局模型的检查点。目录里除了 ``<name>.params`` 之外还有一个
``index.csv``, 记录每个检查点的层数、维度和 digest, 方便核对两次运行是否一致。
"""

from __future__ import annotations

from dataclasses import dataclass
from logging import getLogger
from pathlib import Path

from fedgala.params import LayeredParams
from fedgala.utils.io import read_params, save_params, write_csv

logger = getLogger(__name__)

INDEX_FILE = "index.csv"


@dataclass(frozen=True, slots=True)
class CheckpointEntry:
    name: str
    layers: int
    dim: int
    digest: str


class CheckpointDumper:
    """``CheckpointDumper(None)`` 时所有操作都是空操作。

    >>> dumper = CheckpointDumper("out/checkpoints")
    >>> dumper.dump("round_000", init_params)
    """

    def __init__(self, dump_dir: str | Path | None) -> None:
        self._root = None if dump_dir is None else Path(dump_dir)
        self._entries: list[CheckpointEntry] = []
        if self._root is not None:
            self._root.mkdir(parents=True, exist_ok=True)
            logger.info(f"checkpoints -> {self._root}")

    @property
    def enabled(self) -> bool:
        return self._root is not None

    @property
    def entries(self) -> tuple[CheckpointEntry, ...]:
        return tuple(self._entries)

    def dump(self, name: str, params: LayeredParams) -> Path | None:
        if self._root is None:
            return None
        path = self._root / f"{name}.params"
        save_params(path, params)
        # 同名重复导出时覆盖旧记录
        self._entries = [e for e in self._entries if e.name != name]
        self._entries.append(CheckpointEntry(name, len(params), params.dim, params.digest()))
        write_csv(
            self._root / INDEX_FILE,
            ["name", "layers", "dim", "digest"],
            [[e.name, e.layers, e.dim, e.digest] for e in self._entries],
        )
        logger.debug(f"checkpoint {name}: {len(params)} layers, dim={params.dim}")
        return path

    def load(self, name: str) -> LayeredParams:
        if self._root is None:
            raise FileNotFoundError(f"checkpointing disabled, cannot load {name!r}")
        return read_params(self._root / f"{name}.params")

    def latest(self) -> tuple[str, LayeredParams] | None:
        """最后一次导出的检查点; 还没导出过则返回 None。"""
        if not self._entries:
            return None
        name = self._entries[-1].name
        params = self.load(name)
        if params.digest() != self._entries[-1].digest:
            raise ValueError(f"checkpoint {name} changed on disk since it was written")
        return name, params
