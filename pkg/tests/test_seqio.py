import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vismem.data import SceneSampler, make_dataset
from vismem.seqio import (
    FormatError,
    frame_path,
    load_dataset,
    load_sequence,
    parse_key_values,
    read_flo,
    read_manifest,
    read_mask_dir,
    read_pgm,
    read_ppm,
    save_sequence,
    to_uint8,
    write_flo,
    write_manifest,
    write_mask_dir,
    write_pgm,
    write_ppm,
)


def test_to_uint8_rounding():
    assert to_uint8(np.array([0.0, 0.5, 1.0, -1.0, 2.0])).tolist() == [0, 128, 255, 0, 255]
    assert to_uint8(np.array([0.5 / 255, 1.5 / 255])).tolist() == [1, 2]


def test_ppm_roundtrip_within_quantization(tmp_path, rng):
    rgb = rng.uniform(size=(3, 5, 7)).astype(np.float32)
    p = tmp_path / "a.ppm"
    write_ppm(p, rgb)
    back = read_ppm(p)
    assert back.shape == (5, 7, 3)
    assert np.max(np.abs(np.moveaxis(back, -1, 0) / 255.0 - rgb)) <= 0.5 / 255 + 1e-7
    assert p.read_bytes().startswith(b"P6\n7 5\n255\n")


@settings(max_examples=20)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_pgm_uint8_roundtrip_exact(tmp_path_factory, gray):
    p = tmp_path_factory.mktemp("pgm") / "m.pgm"
    write_pgm(p, gray)
    assert np.array_equal(read_pgm(p), gray)


def test_netpbm_header_comments_and_errors(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# a comment\n2 1\n255\n\x00\xff")
    assert read_pgm(p).tolist() == [[0, 255]]
    with pytest.raises(FormatError, match="magic"):
        read_ppm(p)
    p.write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(FormatError, match="payload"):
        read_pgm(p)
    p.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(FormatError, match="8-bit"):
        read_pgm(p)
    with pytest.raises(FormatError, match="not found"):
        read_pgm(tmp_path / "none.pgm")


def test_flo_roundtrip_and_layout(tmp_path, rng):
    flow = rng.normal(size=(2, 3, 4)).astype(np.float32)
    p = tmp_path / "f.flo"
    write_flo(p, flow)
    raw = p.read_bytes()
    assert raw[:4] == b"PIEH" and len(raw) == 12 + 3 * 4 * 2 * 4
    # (dx, dy) interleaved per pixel
    assert np.frombuffer(raw[12:20], "<f4").tolist() == [flow[0, 0, 0], flow[1, 0, 0]]
    assert np.array_equal(read_flo(p), flow)
    p.write_bytes(raw[:-4])
    with pytest.raises(FormatError, match="payload"):
        read_flo(p)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        read_flo(p)


def test_parse_key_values():
    kv = parse_key_values("# head\nT = 3\nname=seq a  # trailing\n\n")
    assert kv == {"T": "3", "name": "seq a"}
    with pytest.raises(FormatError, match="duplicate"):
        parse_key_values("a=1\na=2")
    with pytest.raises(FormatError, match="line 1"):
        parse_key_values("oops")
    with pytest.raises(FormatError, match="empty key"):
        parse_key_values(" = 3")


@pytest.fixture
def video():
    return make_dataset(SceneSampler(height=16, width=20, frames=4, min_size=3, max_size=4), 1, seed=9)[0]


def test_sequence_roundtrip(tmp_path, video):
    d = tmp_path / "s"
    save_sequence(video, d)
    back = load_sequence(d)
    assert back.name == video.name
    assert np.array_equal(back.masks, video.masks)
    assert np.array_equal(back.flow, video.flow)
    assert np.max(np.abs(back.frames - video.frames)) <= 0.5 / 255 + 1e-6


def test_sequence_errors_name_the_problem(tmp_path, video):
    d = tmp_path / "s"
    save_sequence(video, d)
    os.remove(frame_path(d, "flow", 2))
    with pytest.raises(FormatError, match="index 2"):
        load_sequence(d)
    save_sequence(video, d)
    (d / "meta.txt").write_text("T = 4\nH = 16\n")
    with pytest.raises(FormatError, match="'W'"):
        load_sequence(d)
    (d / "meta.txt").write_text("T = 4\nH = 16\nW = 21\n")
    with pytest.raises(FormatError, match="meta"):
        load_sequence(d)
    (d / "meta.txt").write_text("T = 4\nH = 16\nW = 20\n")
    write_pgm(frame_path(d, "mask", 1), np.full((16, 20), 7, np.uint8))
    with pytest.raises(FormatError, match="0 or 255"):
        load_sequence(d)


def test_mask_dir_roundtrip(tmp_path, rng):
    m = rng.uniform(size=(3, 4, 5)) > 0.5
    write_mask_dir(tmp_path / "m", m, "abc")
    back, name = read_mask_dir(tmp_path / "m")
    assert name == "abc" and np.array_equal(back, m)


def test_manifest_and_dataset(tmp_path, video):
    save_sequence(video, tmp_path / "one")
    write_manifest(tmp_path, ["one"])
    assert read_manifest(tmp_path) == ["one"]
    ds = load_dataset(tmp_path)
    assert len(ds) == 1 and np.array_equal(ds[0].masks, video.masks)
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "one")
