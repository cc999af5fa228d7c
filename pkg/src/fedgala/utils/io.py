"""
io.py

文件格式:

- 参数 (检查点): 小端二进制。头部为 层数 (u32), 之后每层 名字长度 (u32)、
  名字 (utf-8)、宽度 (u64); 头部之后依次是各层的 float64 原始数据。
- CSV: 第一行 ``# schema=1``, 第二行表头; UTF-8, LF 换行,
  实数统一用 17 位有效数字。
"""

from __future__ import annotations

import csv
import struct
from collections.abc import Iterable, Sequence
from io import BytesIO
from pathlib import Path
from typing import Any, BinaryIO

import numpy as np

from fedgala.domains import DomainSample
from fedgala.params import LayeredParams

CSV_SCHEMA = 1


def fmt_real(x: float) -> str:
    return f"{float(x):.17g}"


def _cell(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt_real(float(v))
    return str(v)


# --------------------------------------------------------------------------
# 参数二进制格式
# --------------------------------------------------------------------------


def dump_params(params: LayeredParams, fp: BinaryIO) -> None:
    fp.write(struct.pack("<I", len(params)))
    for name, w in params.layers:
        raw = name.encode("utf-8")
        fp.write(struct.pack("<I", len(raw)))
        fp.write(raw)
        fp.write(struct.pack("<Q", w.size))
    for _, w in params.layers:
        fp.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def load_params(fp: BinaryIO) -> LayeredParams:
    def read(n: int) -> bytes:
        chunk = fp.read(n)
        if len(chunk) != n:
            raise ValueError(f"truncated params file: wanted {n} bytes, got {len(chunk)}")
        return chunk

    (count,) = struct.unpack("<I", read(4))
    header: list[tuple[str, int]] = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", read(4))
        name = read(name_len).decode("utf-8")
        (width,) = struct.unpack("<Q", read(8))
        header.append((name, width))
    layers = []
    for name, width in header:
        layers.append((name, np.frombuffer(read(8 * width), dtype="<f8").astype(np.float64)))
    return LayeredParams(tuple(layers))


def save_params(dst: str | Path | BytesIO, params: LayeredParams) -> None:
    if isinstance(dst, BytesIO):
        dump_params(params, dst)
        return
    with open(dst, "wb") as fp:
        dump_params(params, fp)


def read_params(src: str | Path | BytesIO) -> LayeredParams:
    if isinstance(src, BytesIO):
        return load_params(src)
    with open(src, "rb") as fp:
        return load_params(fp)


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def write_csv(
    dst: str | Path,
    header: Sequence[str],
    rows: Iterable[Sequence[Any]],
) -> Path:
    path = Path(dst)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fp:
        fp.write(f"# schema={CSV_SCHEMA}\n")
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"row with {len(row)} cells for {len(header)} columns")
            writer.writerow([_cell(v) for v in row])
    return path


def read_csv(src: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(src, encoding="utf-8", newline="") as fp:
        lines = [line for line in fp if not line.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    return header, [row for row in reader]


def write_domain_family(dst: str | Path, samples: Sequence[DomainSample]) -> Path:
    """列式文本: 表头 ``domain_id,x0,...,x{F-1}``, 每个样本一行。"""
    if not samples:
        raise ValueError("empty domain family")
    f = samples[0].feature_count
    header = ["domain_id", *(f"x{i}" for i in range(f))]
    rows = (
        [s.domain_id, *row.tolist()] for s in samples for row in s.data
    )
    return write_csv(dst, header, rows)
