import struct

import numpy as np
import pytest

from heightnerf import checkpoint as ck


def _tensors():
    g = np.random.default_rng(0)
    return {"a/W": g.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.int64),
            "c": np.float64(2.5) * np.ones((2, 2, 2))}


def test_round_trip(tmp_path):
    p = tmp_path / "x.bin"
    ck.save(p, {"step": 7, "config": {"m": 3}}, _tensors())
    header, tensors = ck.load(p)
    assert header["step"] == 7 and header["config"] == {"m": 3}
    assert header["format_version"] == ck.FORMAT_VERSION
    for k, v in _tensors().items():
        assert tensors[k].dtype == v.dtype
        np.testing.assert_array_equal(tensors[k], v)
    assert not (tmp_path / "x.bin.tmp").exists()


def test_byte_layout(tmp_path):
    p = tmp_path / "x.bin"
    ck.save(p, {}, {"t": np.array([1.0, 2.0], dtype="<f8")})
    raw = p.read_bytes()
    assert raw.startswith(ck.MAGIC)
    (hlen,) = struct.unpack("<Q", raw[len(ck.MAGIC):len(ck.MAGIC) + 8])
    body = raw[len(ck.MAGIC) + 8 + hlen:]
    assert body == np.array([1.0, 2.0], dtype="<f8").tobytes()


def test_deterministic_bytes(tmp_path):
    ck.save(tmp_path / "a", {"z": 1, "a": 2}, _tensors())
    ck.save(tmp_path / "b", {"a": 2, "z": 1}, _tensors())
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


@pytest.mark.parametrize("mangle", ["magic", "truncate", "header", "version"])
def test_corrupt_files(tmp_path, mangle):
    p = tmp_path / "x.bin"
    ck.save(p, {"k": 1}, _tensors())
    raw = bytearray(p.read_bytes())
    n = len(ck.MAGIC)
    if mangle == "magic":
        raw[:3] = b"XXX"
    elif mangle == "truncate":
        raw = raw[:-10]
    elif mangle == "header":
        raw[n + 8] = ord("!")
    else:
        raw = raw.replace(b'"format_version": 1', b'"format_version": 9')
    p.write_bytes(bytes(raw))
    with pytest.raises(ck.CheckpointError):
        ck.load(p)
