import struct
from io import BytesIO

import numpy as np
import pytest

from fedgala.debug import CheckpointDumper
from fedgala.domains import generate_family, paired_specs
from fedgala.params import LayeredParams
from fedgala.utils.io import read_csv, read_params, save_params, write_csv, write_domain_family
from fedgala.utils.rng import RngStream


def test_params_binary_layout():
    params = LayeredParams((("fc0", np.array([1.0, -2.5])), ("w", np.array([0.125]))))
    buf = BytesIO()
    save_params(buf, params)
    raw = buf.getvalue()
    assert struct.unpack_from("<I", raw, 0) == (2,)
    assert struct.unpack_from("<I", raw, 4) == (3,)
    assert raw[8:11] == b"fc0"
    assert struct.unpack_from("<Q", raw, 11) == (2,)
    assert np.frombuffer(raw[-24:], dtype="<f8").tolist() == [1.0, -2.5, 0.125]
    buf.seek(0)
    assert read_params(buf).digest() == params.digest()


def test_truncated_params():
    buf = BytesIO()
    save_params(buf, LayeredParams((("w", np.ones(4)),)))
    with pytest.raises(ValueError, match="truncated"):
        read_params(BytesIO(buf.getvalue()[:-8]))


def test_checkpoint_dumper(tmp_path):
    params = LayeredParams((("w", np.arange(3.0)),))
    assert CheckpointDumper(None).dump("round_000", params) is None
    dumper = CheckpointDumper(tmp_path / "ckpt")
    assert dumper.enabled
    path = dumper.dump("round_007", params)
    assert path == tmp_path / "ckpt" / "round_007.params"
    assert read_params(path).digest() == params.digest()

    later = LayeredParams((("w", np.array([5.0, 6.0, 7.0])),))
    dumper.dump("round_008", later)
    dumper.dump("round_008", later)
    assert [e.name for e in dumper.entries] == ["round_007", "round_008"]
    header, rows = read_csv(tmp_path / "ckpt" / "index.csv")
    assert header == ["name", "layers", "dim", "digest"]
    assert rows[1] == ["round_008", "1", "3", later.digest()]
    name, loaded = dumper.latest()
    assert name == "round_008"
    assert loaded.digest() == later.digest()
    assert dumper.load("round_007").digest() == params.digest()


def test_checkpoint_tamper_detected(tmp_path):
    dumper = CheckpointDumper(tmp_path)
    assert dumper.latest() is None
    dumper.dump("round_000", LayeredParams((("w", np.zeros(2)),)))
    save_params(tmp_path / "round_000.params", LayeredParams((("w", np.ones(2)),)))
    with pytest.raises(ValueError, match="changed on disk"):
        dumper.latest()
    with pytest.raises(FileNotFoundError):
        CheckpointDumper(None).load("round_000")


def test_csv_format(tmp_path):
    path = write_csv(tmp_path / "out" / "a.csv", ["a", "b", "c", "d"], [[1, 0.1, True, ""], [2, 1e20, False, "x"]])
    raw = path.read_bytes()
    assert b"\r" not in raw
    assert raw.decode("utf-8").splitlines() == [
        "# schema=1",
        "a,b,c,d",
        "1,0.10000000000000001,true,",
        "2,1e+20,false,x",
    ]
    header, rows = read_csv(path)
    assert header == ["a", "b", "c", "d"]
    assert float(rows[0][1]) == 0.1
    with pytest.raises(ValueError):
        write_csv(tmp_path / "b.csv", ["a", "b"], [[1]])


def test_domain_family_csv(tmp_path):
    family = generate_family(paired_specs([0.5, 0.5, 0.5]), 4, RngStream(0))
    header, rows = read_csv(write_domain_family(tmp_path / "domains.csv", family))
    assert header == ["domain_id", "x0", "x1", "x2"]
    assert len(rows) == 8
    assert [r[0] for r in rows] == ["0"] * 4 + ["1"] * 4
    assert float(rows[5][1]) == family[1].data[1, 0]
