"""On-disk sequence directories: binary PPM/PGM images, Middlebury .flo flow.

Layout of one sequence directory::

    frame_00000.ppm   P6, 8-bit RGB
    mask_00000.pgm    P5, 8-bit, 0 background / 255 object
    flow_00000.flo    "PIEH", width, height (int32 LE), H*W*(dx, dy) float32 LE
    meta.txt          key = value lines: T, H, W, name
"""
import os
import re
import struct

import numpy as np

from .data import VideoSample

FLO_MAGIC = b"PIEH"
MANIFEST = "manifest.txt"


class FormatError(ValueError):
    """A file is missing, truncated or does not follow its format."""

    def __init__(self, path, problem):
        super().__init__(f"{path}: {problem}")
        self.path = path


# -- netpbm --------------------------------------------------------------------


def to_uint8(x):
    """[0,1] floats -> uint8 with round-half-up."""
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _write_netpbm(path, magic, data):
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(b"%s\n%d %d\n255\n" % (magic, w, h))
        f.write(np.ascontiguousarray(data, dtype=np.uint8).tobytes())


_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def _read_netpbm(path, magic, channels):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError:
        raise FormatError(path, "file not found") from None
    pos, vals = 0, []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if not m:
            raise FormatError(path, "truncated header")
        vals.append(m.group(2))
        pos = m.end()
    if vals[0] != magic:
        raise FormatError(path, f"expected magic {magic.decode()}, found {vals[0][:8]!r}")
    try:
        w, h, maxval = (int(v) for v in vals[1:])
    except ValueError:
        raise FormatError(path, "non-integer header field") from None
    if maxval != 255:
        raise FormatError(path, f"only 8-bit images are supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    n = w * h * channels
    if len(raw) - pos < n:
        raise FormatError(path, f"payload has {len(raw) - pos} bytes, expected {n}")
    data = np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos)
    return data.reshape(h, w, channels) if channels > 1 else data.reshape(h, w)


def write_ppm(path, rgb):
    """``rgb`` is ``[3,H,W]`` floats in [0,1] or ``[H,W,3]`` uint8."""
    if rgb.dtype != np.uint8:
        rgb = to_uint8(np.moveaxis(rgb, 0, -1))
    _write_netpbm(path, b"P6", rgb)


def read_ppm(path):
    """-> uint8 ``[H,W,3]``"""
    return _read_netpbm(path, b"P6", 3)


def write_pgm(path, gray):
    """``gray`` is ``[H,W]`` uint8, or floats in [0,1] (quantized round-half-up)."""
    if gray.dtype != np.uint8:
        gray = to_uint8(gray)
    _write_netpbm(path, b"P5", gray)


def read_pgm(path):
    """-> uint8 ``[H,W]``"""
    return _read_netpbm(path, b"P5", 1)


# -- Middlebury flow ---------------------------------------------------------------


def write_flo(path, flow):
    """``flow`` is ``[2,H,W]`` (dx, dy)."""
    _, h, w = flow.shape
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(struct.pack("<ii", w, h))
        f.write(np.moveaxis(flow, 0, -1).astype("<f4").tobytes())


def read_flo(path):
    """-> float32 ``[2,H,W]``"""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError:
        raise FormatError(path, "file not found") from None
    if len(raw) < 12 or raw[:4] != FLO_MAGIC:
        raise FormatError(path, "missing PIEH magic")
    w, h = struct.unpack("<ii", raw[4:12])
    if w <= 0 or h <= 0:
        raise FormatError(path, f"invalid dimensions {w}x{h}")
    n = w * h * 2 * 4
    if len(raw) - 12 != n:
        raise FormatError(path, f"payload has {len(raw) - 12} bytes, expected {n}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    return np.moveaxis(data, -1, 0).astype(np.float32)


# -- key = value text ----------------------------------------------------------------


def parse_key_values(text, source="<text>"):
    """``key = value`` lines; ``#`` starts a comment. Returns an ordered dict of strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(source, f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise FormatError(source, f"line {lineno}: empty key")
        if key in out:
            raise FormatError(source, f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_key_values(pairs):
    return "".join(f"{k} = {v}\n" for k, v in pairs.items())


# -- sequences ---------------------------------------------------------------------


def frame_path(d, kind, t):
    ext = {"frame": "ppm", "mask": "pgm", "flow": "flo"}[kind]
    return os.path.join(d, f"{kind}_{t:05d}.{ext}")


def save_sequence(sample, d):
    os.makedirs(d, exist_ok=True)
    T = sample.length
    H, W = sample.size
    for t in range(T):
        write_ppm(frame_path(d, "frame", t), sample.frames[t])
        write_pgm(frame_path(d, "mask", t), np.where(sample.masks[t, 0] > 0.5, 255, 0).astype(np.uint8))
        write_flo(frame_path(d, "flow", t), sample.flow[t])
    with open(os.path.join(d, "meta.txt"), "w") as f:
        f.write(format_key_values({"T": T, "H": H, "W": W, "name": sample.name}))


def read_meta(d):
    path = os.path.join(d, "meta.txt")
    try:
        with open(path) as f:
            meta = parse_key_values(f.read(), path)
    except FileNotFoundError:
        raise FormatError(path, "file not found") from None
    for key in ("T", "H", "W"):
        if key not in meta:
            raise FormatError(path, f"missing key {key!r}")
        try:
            meta[key] = int(meta[key])
        except ValueError:
            raise FormatError(path, f"{key} must be an integer, got {meta[key]!r}") from None
        if meta[key] < 1:
            raise FormatError(path, f"{key} must be positive, got {meta[key]}")
    meta.setdefault("name", os.path.basename(os.path.normpath(d)))
    return meta


def load_sequence(d):
    """Read a sequence directory, checking that every index and modality exists
    and that all dimensions agree with meta.txt."""
    meta = read_meta(d)
    T, H, W = meta["T"], meta["H"], meta["W"]
    frames = np.empty((T, 3, H, W), np.float32)
    masks = np.empty((T, 1, H, W), np.float32)
    flow = np.empty((T, 2, H, W), np.float32)
    for t in range(T):
        for kind in ("frame", "mask", "flow"):
            path = frame_path(d, kind, t)
            if not os.path.exists(path):
                raise FormatError(path, f"missing {kind} for index {t} (meta.txt declares T={T})")
        rgb = read_ppm(frame_path(d, "frame", t))
        m = read_pgm(frame_path(d, "mask", t))
        fl = read_flo(frame_path(d, "flow", t))
        for kind, shape in (("frame", rgb.shape[:2]), ("mask", m.shape), ("flow", fl.shape[1:])):
            if shape != (H, W):
                raise FormatError(frame_path(d, kind, t), f"size {shape[1]}x{shape[0]} != meta {W}x{H}")
        if not np.all((m == 0) | (m == 255)):
            raise FormatError(frame_path(d, "mask", t), "mask values must be 0 or 255")
        if not np.all(np.isfinite(fl)):
            raise FormatError(frame_path(d, "flow", t), "non-finite flow")
        frames[t] = np.moveaxis(rgb, -1, 0) / np.float32(255.0)
        masks[t, 0] = m == 255
        flow[t] = fl
    return VideoSample(frames, flow, masks, meta["name"])


def write_mask_dir(d, masks, name=""):
    """Binary masks ``[T,h,w]`` as ``mask_%05d.pgm`` plus a meta.txt."""
    os.makedirs(d, exist_ok=True)
    T, h, w = masks.shape
    for t in range(T):
        write_pgm(frame_path(d, "mask", t), np.where(masks[t], 255, 0).astype(np.uint8))
    with open(os.path.join(d, "meta.txt"), "w") as f:
        f.write(format_key_values({"T": T, "H": h, "W": w, "name": name}))


def read_mask_dir(d):
    """-> (bool masks ``[T,h,w]``, name) from a directory of ``mask_%05d.pgm``."""
    meta = read_meta(d)
    out = np.empty((meta["T"], meta["H"], meta["W"]), bool)
    for t in range(meta["T"]):
        path = frame_path(d, "mask", t)
        if not os.path.exists(path):
            raise FormatError(path, f"missing mask for index {t}")
        m = read_pgm(path)
        if m.shape != out.shape[1:]:
            raise FormatError(path, f"size {m.shape[1]}x{m.shape[0]} != meta {meta['W']}x{meta['H']}")
        out[t] = m > 127
    return out, meta["name"]


def write_manifest(root, names):
    with open(os.path.join(root, MANIFEST), "w") as f:
        f.write("".join(n + "\n" for n in names))


def read_manifest(root):
    """Sequence directory names listed in ``root/manifest.txt`` (one per line)."""
    path = os.path.join(root, MANIFEST)
    try:
        with open(path) as f:
            names = [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
    except FileNotFoundError:
        raise FormatError(path, "file not found") from None
    return names


def load_dataset(root):
    return [load_sequence(os.path.join(root, n)) for n in read_manifest(root)]
