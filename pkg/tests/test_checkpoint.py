import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from vismem import checkpoint
from vismem.checkpoint import CheckpointError, decode, encode


@given(
    st.dictionaries(
        st.text(min_size=1, max_size=12),
        arrays(st.sampled_from([np.float32, np.float64]), array_shapes(min_dims=0, max_dims=4, max_side=4)),
        max_size=4,
    ),
    st.text(max_size=40),
)
def test_roundtrip_is_bitwise(tensors, text):
    cfg, back = decode(encode(tensors, text))
    assert cfg == text and list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == np.ascontiguousarray(v).tobytes()


def test_header_layout():
    buf = encode({"w": np.zeros((2, 3), np.float32)}, "a = 1")
    assert buf[:4] == b"CGRU"
    assert struct.unpack("<I", buf[4:8])[0] == 1
    assert len(buf) == 4 + 4 + (4 + 5) + 4 + (4 + 1) + 1 + 8 + 1 + 24 + 4


def test_corruption_detected():
    buf = bytearray(encode({"w": np.arange(6, dtype=np.float32)}, "x = 1"))
    bad = bytearray(buf)
    bad[-10] ^= 0x01
    with pytest.raises(CheckpointError, match="CRC"):
        decode(bytes(bad))
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"NOPE" + bytes(buf[4:]))
    with pytest.raises(CheckpointError):
        decode(bytes(buf[:-7]))


def _resign(body):
    return body + struct.pack("<I", zlib.crc32(body))


def test_structural_errors_with_valid_crc():
    body = encode({"w": np.zeros(2, np.float32)})[:-4]
    with pytest.raises(CheckpointError, match="trailing"):
        decode(_resign(body + b"\x00"))
    with pytest.raises(CheckpointError, match="truncated"):
        decode(_resign(body[:-3]))
    with pytest.raises(CheckpointError, match="version"):
        decode(_resign(body[:4] + struct.pack("<I", 9) + body[8:]))
    # empty config text: magic, version, length 0, then the u32 tensor count at byte 12
    entry = body[16:]
    dup = body[:12] + struct.pack("<I", 2) + entry + entry
    with pytest.raises(CheckpointError, match="duplicate"):
        decode(_resign(dup))


def test_unsupported_dtype_rejected():
    with pytest.raises(CheckpointError, match="dtype"):
        encode({"i": np.zeros(2, np.int32)})


def test_save_load(tmp_path, rng):
    t = {"a": rng.normal(size=(2, 2)), "b": rng.normal(size=3).astype(np.float32)}
    checkpoint.save(tmp_path / "c.ckpt", t, "k = v")
    cfg, back = checkpoint.load(tmp_path / "c.ckpt")
    assert cfg == "k = v" and all(np.array_equal(back[k], t[k]) for k in t)
