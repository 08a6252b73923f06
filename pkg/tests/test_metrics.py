import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import boundary_f_brute, iou_brute, prf_brute
from vismem.metrics import (
    REPORT_KEYS,
    aggregate,
    boundary_f,
    boundary_radius,
    evaluate_sequence,
    format_records,
    format_table,
    iou,
    j_statistics,
    mask_boundary,
    parse_records,
    prf,
)
from vismem.tensor import ShapeError

masks = arrays(np.bool_, st.tuples(st.integers(1, 7), st.integers(1, 7)))


def all_masks(h, w):
    for bits in itertools.product((0, 1), repeat=h * w):
        yield np.array(bits, bool).reshape(h, w)


def test_iou_examples():
    a = np.zeros((4, 4), bool)
    b = a.copy()
    assert iou(a, b) == 1.0
    a[:2] = True
    assert iou(a, b) == 0.0
    b[1:3] = True
    assert iou(a, b) == pytest.approx(4 / 12)
    with pytest.raises(ShapeError):
        iou(a, np.zeros((4, 5)))


def test_iou_and_prf_exhaustive_3x3():
    """Every ordered pair of 3x3 masks against the counting oracle."""
    allm = np.array(list(all_masks(3, 3))).reshape(512, 9)
    tp = (allm[:, None] & allm[None]).sum(-1)
    n = allm.sum(-1)
    fp = n[:, None] - tp
    fn = n[None, :] - tp
    union = tp + fp + fn
    want_iou = np.where(union == 0, 1.0, tp / np.maximum(union, 1))
    rng = np.random.default_rng(0)
    for i, j in zip(rng.integers(512, size=3000), rng.integers(512, size=3000)):
        a, b = allm[i].reshape(3, 3), allm[j].reshape(3, 3)
        assert iou(a, b) == pytest.approx(want_iou[i, j], abs=1e-12)
        assert prf(a, b) == pytest.approx(prf_brute(a, b), abs=1e-12)
    # the vectorised table itself agrees with the loop oracle on a slice
    for i in range(0, 512, 37):
        for j in range(0, 512, 41):
            assert want_iou[i, j] == pytest.approx(iou_brute(allm[i], allm[j]))


def test_boundary_f_exhaustive_2x3():
    for a in all_masks(2, 3):
        for b in all_masks(2, 3):
            assert boundary_f(a, b, radius=1) == pytest.approx(boundary_f_brute(a, b, 1), abs=1e-12)


def test_boundary_f_sampled_3x3_and_5x5(rng):
    for shape in ((3, 3), (5, 5)):
        for _ in range(300):
            a = rng.uniform(size=shape) < 0.5
            b = rng.uniform(size=shape) < 0.5
            for r in (1, 2):
                assert boundary_f(a, b, radius=r) == pytest.approx(boundary_f_brute(a, b, r), abs=1e-12)


def test_mask_boundary_examples():
    m = np.zeros((5, 5), bool)
    m[1:4, 1:4] = True
    b = mask_boundary(m)
    assert b.sum() == 8 and not b[2, 2]
    full = np.ones((3, 3), bool)
    assert mask_boundary(full).sum() == 8
    with pytest.raises(ShapeError):
        mask_boundary(np.zeros((2, 2, 2)))


def test_boundary_radius():
    assert boundary_radius((480, 854)) == math.ceil(0.008 * math.hypot(480, 854))
    assert boundary_radius((16, 16)) == 1


def test_boundary_f_examples():
    e = np.zeros((8, 8), bool)
    m = e.copy()
    m[2:6, 2:6] = True
    assert boundary_f(e, e) == 1.0
    assert boundary_f(m, e) == 0.0 and boundary_f(e, m) == 0.0
    assert boundary_f(m, m) == 1.0
    shifted = np.roll(m, 3, axis=1)
    assert boundary_f(m, shifted, radius=math.inf) == 1.0
    assert boundary_f(m, shifted, radius=1) < 1.0


@given(masks, st.data())
def test_metric_properties(a, data):
    b = data.draw(arrays(np.bool_, a.shape))
    assert iou(a, b) == iou(b, a)
    assert boundary_f(a, b) == pytest.approx(boundary_f(b, a))
    assert iou(a, a) == 1.0 and boundary_f(a, a) == 1.0
    assert 0 <= iou(a, b) <= 1 and 0 <= boundary_f(a, b) <= 1
    p, r, f = prf(a, b)
    p2, r2, _ = prf(b, a)
    assert p == r2 and r == p2
    assert min(p, r) - 1e-12 <= f <= max(p, r) + 1e-12
    if a.any() and b.any():
        assert boundary_f(a, b, radius=math.inf) == 1.0


def test_prf_examples():
    a = np.array([[1, 1, 0, 0]], bool)
    b = np.array([[1, 0, 1, 1]], bool)
    p, r, f = prf(a, b)
    assert (p, r) == (0.5, 1 / 3) and f == pytest.approx(0.4)
    assert prf(np.zeros(3), np.zeros(3)) == (1.0, 1.0, 1.0)
    assert prf(np.ones(3), np.zeros(3)) == (0.0, 0.0, 0.0)


def test_j_statistics_examples():
    assert j_statistics([1.0]) == (1.0, 1.0, 0.0)
    mean, recall, decay = j_statistics([1.0, 1.0, 0.8, 0.6, 0.4, 0.2, 0.0, 0.0])
    assert mean == pytest.approx(0.5)
    assert recall == pytest.approx(4 / 8)
    assert decay == pytest.approx(1.0)
    assert j_statistics([0.9, 0.1, 0.5])[2] == 0.0
    assert j_statistics([0.5, 0.5000001])[1] == 0.5
    with pytest.raises(ValueError):
        j_statistics([])


def _seq(rng, T=6, size=8):
    gt = rng.uniform(size=(T, size, size)) < 0.3
    pred = gt.copy()
    pred[::2] = ~pred[::2]
    return pred, gt


def test_evaluate_sequence_perfect_and_subset(rng):
    pred, gt = _seq(rng)
    r = evaluate_sequence(gt, gt, "a")
    assert all(v == 1.0 for v in r.summary().values() if v != r.j_decay) and r.j_decay == 0.0
    r = evaluate_sequence(pred, gt, "b", frames=[1, 3, 5])
    assert [s.frame for s in r.frames] == [1, 3, 5] and r.j_mean == 1.0
    with pytest.raises(ShapeError):
        evaluate_sequence(gt[0], gt[0])


def test_sequence_precision_recall_are_frame_means(rng):
    pred, gt = _seq(rng)
    r = evaluate_sequence(pred, gt)
    ps = [prf_brute(pred[t], gt[t]) for t in range(len(gt))]
    assert r.precision == pytest.approx(np.mean([x[0] for x in ps]))
    assert r.recall == pytest.approx(np.mean([x[1] for x in ps]))
    assert r.f_measure == pytest.approx(2 * r.precision * r.recall / (r.precision + r.recall))


def test_report_formats_roundtrip(rng):
    reports = [evaluate_sequence(*_seq(rng), name=n) for n in ("one", "two")]
    text = format_records(reports)
    parsed = parse_records(text)
    assert set(parsed) == {"one", "two", "__mean__"}
    for r in reports:
        for k in REPORT_KEYS:
            assert parsed[r.name][k] == pytest.approx(getattr(r, k), abs=1e-6)
    mean = aggregate(reports)
    assert parsed["__mean__"]["j_mean"] == pytest.approx(mean["j_mean"], abs=1e-6)
    assert sum(line.startswith("seq=one frame=") for line in text.splitlines()) == 6
    table = format_table(reports).splitlines()
    assert table[0].split() == ["sequence", *REPORT_KEYS]
    assert table[-1].startswith("mean") and len(table) == 6
    with pytest.raises(ValueError):
        aggregate([])
