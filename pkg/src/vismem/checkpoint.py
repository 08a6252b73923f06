"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"CGRU"
    u32  format version
    u32  length, then UTF-8 config text (``key = value`` lines)
    u32  tensor count
    per tensor:
        u32 name length, UTF-8 name
        u8  rank, then rank x u32 dims
        u8  dtype tag (0 = float32, 1 = float64)
        payload, row-major little-endian
    u32  CRC-32 of every preceding byte
"""
import struct
import zlib

import numpy as np

MAGIC = b"CGRU"
VERSION = 1
DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def _string(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode(tensors, config_text=""):
    """Serialize ``{name: array}`` plus a config echo to bytes."""
    parts = [MAGIC, struct.pack("<I", VERSION), _string(config_text), struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in DTYPE_TAGS:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        if arr.ndim > 255:
            raise CheckpointError(f"tensor {name!r}: rank {arr.ndim} too large")
        tag = DTYPE_TAGS[arr.dtype]
        parts.append(_string(name))
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", tag))
        parts.append(np.ascontiguousarray(arr, dtype=TAG_DTYPES[tag]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what):
        return self.take(1, what)[0]

    def string(self, what):
        raw = self.take(self.u32(what), what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{what} is not valid UTF-8") from None


def decode(buf):
    """Inverse of :func:`encode`: returns ``(config_text, {name: array})``."""
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, stored = buf[:-4], struct.unpack("<I", buf[-4:])[0]
    actual = zlib.crc32(body)
    if stored != actual:
        raise CheckpointError(f"CRC mismatch: stored {stored:08x}, computed {actual:08x}")
    r = _Reader(body)
    r.take(4, "magic")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_text = r.string("config echo")
    tensors = {}
    for i in range(r.u32("tensor count")):
        name = r.string(f"tensor {i} name")
        rank = r.u8(f"tensor {name!r} rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"tensor {name!r} dims"))
        tag = r.u8(f"tensor {name!r} dtype")
        if tag not in TAG_DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype tag {tag}")
        dt = TAG_DTYPES[tag]
        count = int(np.prod(dims, dtype=np.int64))
        raw = r.take(count * dt.itemsize, f"tensor {name!r} payload")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} unexpected trailing bytes")
    return config_text, tensors


def save(path, tensors, config_text=""):
    with open(path, "wb") as f:
        f.write(encode(tensors, config_text))


def load(path):
    with open(path, "rb") as f:
        return decode(f.read())
