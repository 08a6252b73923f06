"""Gate-activation heatmaps and mask overlays written as netpbm files.

Heatmaps use a fixed mapping, 0.0 -> 0 and 1.0 -> 255 with round-half-up, so
images of different frames can be compared directly. The state ``h`` lives in
[-1, 1] and is shown as ``(h + 1) / 2``.
"""
import os
from dataclasses import dataclass

import numpy as np

from .data import upsample_nearest
from .recurrent import GateRecord
from .seqio import to_uint8, write_pgm, write_ppm

SIGNALS = ("r", "1mz", "h")
HIGHLIGHT = (255, 40, 40)


@dataclass(frozen=True)
class HeatmapSpec:
    channels: tuple
    signals: tuple = ("r", "1mz")
    scale: int = 1
    direction: str = "forward"

    def __post_init__(self):
        bad = [s for s in self.signals if s not in SIGNALS]
        if bad:
            raise ValueError(f"unknown gate signals {bad}; choose from {SIGNALS}")
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")


def gate_signal(record, signal):
    """``[d_h,h,w]`` activation in [0,1] for one of ``r``, ``1mz`` (1 - z), ``h``."""
    if not isinstance(record, GateRecord):
        raise TypeError("gate heatmaps need ConvGRU records (plain RNN cells have no gates)")
    if signal == "r":
        return record.r
    if signal == "1mz":
        return 1.0 - record.z
    if signal == "h":
        return (record.h_new + 1.0) * 0.5
    raise ValueError(f"unknown gate signal {signal!r}")


def gate_filename(signal, channel, frame):
    return f"gate_{signal}_c{channel}_t{frame}.pgm"


def render_gates(records, spec, out_dir):
    """Write one PGM per (frame, channel, signal). ``records`` is either the
    dict returned by ``forward(..., record_gates=True)`` or a list of records.
    Returns the written paths."""
    if isinstance(records, dict):
        if spec.direction not in records:
            raise ValueError(f"no {spec.direction!r} records; have {sorted(records)}")
        records = records[spec.direction]
    if not records:
        return []
    d_h = records[0].z.shape[0] if isinstance(records[0], GateRecord) else records[0].h_new.shape[0]
    bad = [c for c in spec.channels if not 0 <= c < d_h]
    if bad:
        raise ValueError(f"channels {bad} out of range for d_h={d_h}")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for t, rec in enumerate(records):
        for signal in spec.signals:
            act = gate_signal(rec, signal)
            for c in spec.channels:
                img = act[c]
                if spec.scale > 1:
                    img = upsample_nearest(img, spec.scale)
                path = os.path.join(out_dir, gate_filename(signal, c, t))
                write_pgm(path, to_uint8(img))
                paths.append(path)
    return paths


def save_gate_records(records, out_dir):
    """Store recorded gates as ``gates_<direction>.npz`` (arrays ``[T,d_h,h,w]``)."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for direction, recs in records.items():
        if not recs or not isinstance(recs[0], GateRecord):
            raise TypeError("only ConvGRU gate records can be stored")
        path = os.path.join(out_dir, f"gates_{direction}.npz")
        np.savez(
            path,
            z=np.stack([r.z for r in recs]),
            r=np.stack([r.r for r in recs]),
            h_cand=np.stack([r.h_cand for r in recs]),
            h_new=np.stack([r.h_new for r in recs]),
            h_prev=np.stack([r.h_prev for r in recs]),
        )
        paths.append(path)
    return paths


def load_gate_records(d):
    """Inverse of :func:`save_gate_records`: ``{direction: [GateRecord]}``."""
    out = {}
    for fname in sorted(os.listdir(d)):
        if fname.startswith("gates_") and fname.endswith(".npz"):
            with np.load(os.path.join(d, fname)) as z:
                arrays = {k: z[k] for k in ("z", "r", "h_cand", "h_new", "h_prev")}
            T = arrays["z"].shape[0]
            out[fname[6:-4]] = [GateRecord(**{k: v[t] for k, v in arrays.items()}) for t in range(T)]
    if not out:
        raise FileNotFoundError(f"{d}: no gates_<direction>.npz files")
    return out


def overlay_mask(frame, mask, alpha=0.5, color=HIGHLIGHT):
    """Blend object pixels toward ``color``. ``frame`` is ``[3,H,W]`` in [0,1] or
    uint8 ``[H,W,3]``; ``mask`` is ``[H,W]`` or a coarser grid that divides it
    (upsampled nearest-neighbour). Returns uint8 ``[H,W,3]``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    img = frame if frame.dtype == np.uint8 else to_uint8(np.moveaxis(frame, 0, -1))
    H, W = img.shape[:2]
    mask = np.asarray(mask).astype(bool)
    if mask.shape != (H, W):
        f = H // mask.shape[0]
        if f < 1 or mask.shape[0] * f != H or mask.shape[1] * f != W:
            raise ValueError(f"mask {mask.shape} does not tile frame {(H, W)}")
        mask = upsample_nearest(mask, f)
    out = img.copy()
    c = np.asarray(color, dtype=np.float64)
    blend = np.floor((1.0 - alpha) * img[mask].astype(np.float64) + alpha * c + 0.5)
    out[mask] = np.clip(blend, 0, 255).astype(np.uint8)
    return out


def write_overlays(frames, masks, out_dir, alpha=0.5):
    """``overlay_t<frame>.ppm`` for every frame. Returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for t in range(len(frames)):
        path = os.path.join(out_dir, f"overlay_t{t}.ppm")
        write_ppm(path, overlay_mask(frames[t], masks[t], alpha))
        paths.append(path)
    return paths
