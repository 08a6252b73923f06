"""Mask evaluation: region IoU statistics, boundary F-measure, pixel P/R/F.

All functions take boolean (or 0/1) masks of equal shape. Empty-vs-empty is a
perfect score everywhere: predicting "nothing moves" on a frame where nothing
moves is correct.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from .tensor import ShapeError


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def iou(pred, gt):
    pred, gt = _pair(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def j_statistics(ious):
    """``(mean, recall, decay)`` of a per-frame IoU sequence.

    Recall counts frames with IoU > 0.5. Decay is the mean of the first temporal
    quartile minus the mean of the last; it is 0 for fewer than four frames.
    """
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise ValueError("j_statistics needs at least one frame")
    mean = float(ious.mean())
    recall = float(np.count_nonzero(ious > 0.5) / ious.size)
    decay = 0.0
    if ious.size >= 4:
        q = np.array_split(ious, 4)
        decay = float(q[0].mean() - q[-1].mean())
    return mean, recall, decay


def mask_boundary(mask):
    """Mask pixels with a background 4-neighbour; pixels on the image border count."""
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise ShapeError(f"mask_boundary takes a 2-D mask, got shape {mask.shape}")
    p = np.pad(mask, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return mask & ~interior


def boundary_radius(shape, tol_frac=0.008):
    return int(math.ceil(tol_frac * math.hypot(*shape)))


def _matched(src, dst, radius):
    """The ``src`` boundary pixels lying within ``radius`` of some ``dst`` pixel."""
    if not dst.any():
        return np.zeros_like(src)
    dist = distance_transform_edt(~dst)
    return src & (dist <= radius)


def boundary_f(pred, gt, tol_frac=0.008, radius=None):
    """Contour F-measure. ``radius`` (pixels, may be ``inf``) overrides ``tol_frac``."""
    pred, gt = _pair(pred, gt)
    if pred.ndim != 2:
        raise ShapeError(f"boundary_f takes 2-D masks, got shape {pred.shape}")
    if radius is None:
        radius = boundary_radius(pred.shape, tol_frac)
    bp, bg = mask_boundary(pred), mask_boundary(gt)
    n_p, n_g = np.count_nonzero(bp), np.count_nonzero(bg)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    precision = np.count_nonzero(_matched(bp, bg, radius)) / n_p
    recall = np.count_nonzero(_matched(bg, bp, radius)) / n_g
    return _harmonic(precision, recall)


def _harmonic(p, r):
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def prf(pred, gt):
    """Pixel precision, recall and F of ``pred`` against ``gt``."""
    pred, gt = _pair(pred, gt)
    n_p, n_g = np.count_nonzero(pred), np.count_nonzero(gt)
    if n_p == 0 and n_g == 0:
        return 1.0, 1.0, 1.0
    inter = np.count_nonzero(pred & gt)
    p = inter / n_p if n_p else 0.0
    r = inter / n_g if n_g else 0.0
    return p, r, _harmonic(p, r)


# -- reports -------------------------------------------------------------------


@dataclass
class FrameScore:
    frame: int
    iou: float
    boundary_f: float


@dataclass
class SequenceReport:
    name: str
    frames: list = field(default_factory=list)
    j_mean: float = 0.0
    j_recall: float = 0.0
    j_decay: float = 0.0
    f_mean: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    f_measure: float = 0.0

    def summary(self):
        return {k: getattr(self, k) for k in REPORT_KEYS}


REPORT_KEYS = ("j_mean", "j_recall", "j_decay", "f_mean", "precision", "recall", "f_measure")


def evaluate_sequence(pred, gt, name="", tol_frac=0.008, frames=None):
    """Score ``[T,h,w]`` predicted masks against ground truth.

    ``frames`` restricts the summary to a subset of frame indices (e.g. the
    frames where objects are static).
    """
    pred, gt = _pair(pred, gt)
    if pred.ndim != 3:
        raise ShapeError(f"evaluate_sequence takes [T,h,w] masks, got shape {pred.shape}")
    idx = range(pred.shape[0]) if frames is None else list(frames)
    scores, ps, rs = [], [], []
    for t in idx:
        scores.append(FrameScore(t, iou(pred[t], gt[t]), boundary_f(pred[t], gt[t], tol_frac)))
        p, r, _ = prf(pred[t], gt[t])
        ps.append(p)
        rs.append(r)
    jm, jr, jd = j_statistics([s.iou for s in scores])
    precision, recall = float(np.mean(ps)), float(np.mean(rs))
    return SequenceReport(
        name, scores, jm, jr, jd, float(np.mean([s.boundary_f for s in scores])),
        precision, recall, _harmonic(precision, recall),
    )


def aggregate(reports):
    """Average of the per-sequence summaries (each sequence weighted equally)."""
    if not reports:
        raise ValueError("no sequences to aggregate")
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in REPORT_KEYS}


def format_table(reports):
    """Aligned plain-text table, one row per sequence plus a mean row."""
    width = max([len("sequence")] + [len(r.name) for r in reports] + [len("mean")])
    head = "sequence".ljust(width) + "".join(f"{k:>11}" for k in REPORT_KEYS)
    lines = [head, "-" * len(head)]
    for r in reports:
        lines.append(r.name.ljust(width) + "".join(f"{getattr(r, k):>11.4f}" for k in REPORT_KEYS))
    if reports:
        mean = aggregate(reports)
        lines.append("-" * len(head))
        lines.append("mean".ljust(width) + "".join(f"{mean[k]:>11.4f}" for k in REPORT_KEYS))
    return "\n".join(lines) + "\n"


def format_records(reports):
    """``key=value`` lines: one per sequence, one per frame, one for the mean."""
    lines = []
    for r in reports:
        stats = " ".join(f"{k}={getattr(r, k):.6f}" for k in REPORT_KEYS)
        lines.append(f"seq={r.name} frames={len(r.frames)} {stats}")
        for s in r.frames:
            lines.append(f"seq={r.name} frame={s.frame} iou={s.iou:.6f} boundary_f={s.boundary_f:.6f}")
    if reports:
        mean = aggregate(reports)
        lines.append("seq=__mean__ sequences=%d " % len(reports) + " ".join(f"{k}={v:.6f}" for k, v in mean.items()))
    return "\n".join(lines) + "\n"


def parse_records(text):
    """Inverse of :func:`format_records` for the summary lines: ``{seq: {key: value}}``."""
    out = {}
    for line in text.splitlines():
        fields_ = dict(tok.split("=", 1) for tok in line.split())
        if "seq" not in fields_ or "frame" in fields_:
            continue
        name = fields_.pop("seq")
        out[name] = {k: float(v) for k, v in fields_.items()}
    return out
