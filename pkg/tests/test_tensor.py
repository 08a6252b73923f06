import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_diff, conv_loops, rel_err
from vismem.tensor import (
    ConvSpec,
    ShapeError,
    avg_pool,
    avg_pool_backward,
    channel_softmax2,
    concat_channels,
    conv2d,
    conv2d_backward,
    conv2d_direct,
    downsample2,
    downsample2_backward,
    pointwise,
    pointwise_backward,
    sigmoid,
    split_channels,
    tanh,
)


def test_conv_scaling_identity():
    out = conv2d(np.ones((1, 3, 3)), np.full((1, 1, 1, 1), 2.0), np.zeros(1), ConvSpec(1))
    assert out.shape == (1, 3, 3)
    assert np.all(out == 2.0)


def test_conv_zero_kernel_gives_bias():
    out = conv2d(np.random.default_rng(0).normal(size=(1, 5, 7)), np.zeros((1, 1, 3, 3)), np.array([0.5]))
    assert np.all(out == 0.5)


def test_conv_matches_loop_oracle(rng):
    x = rng.normal(size=(3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    assert rel_err(conv2d(x, w, b, ConvSpec(3, 1)), conv_loops(x, w, b, 1)) < 1e-6


@pytest.mark.parametrize("k,pad,stride", [(1, 0, 1), (3, 0, 1), (3, 1, 2), (5, 2, 1), (3, 2, 3)])
def test_conv_padding_stride_variants(rng, k, pad, stride):
    x = rng.normal(size=(2, 9, 9))
    w = rng.normal(size=(3, 2, k, k))
    spec = ConvSpec(k, pad, stride)
    try:
        got = conv2d(x, w, None, spec)
    except ShapeError:
        assert (9 + 2 * pad - k) % stride
        return
    assert rel_err(got, conv_loops(x, w, None, pad, stride)) < 1e-6


def test_library_direct_conv_agrees_with_test_oracle(rng):
    x = rng.normal(size=(2, 5, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    assert rel_err(conv2d_direct(x, w), conv_loops(x, w)) < 1e-12


def test_conv_batched_equals_per_frame(rng):
    x = rng.normal(size=(4, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    batched = conv2d(x, w, b)
    for t in range(4):
        np.testing.assert_allclose(batched[t], conv2d(x[t], w, b), rtol=1e-12, atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 4, 4)), np.zeros((1, 1, 3, 3)), np.zeros(2))
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 5, 5)), spec=ConvSpec(5, 0))
    with pytest.raises(ValueError):
        ConvSpec(4)


def test_conv_backward_zero_upstream(rng):
    x = rng.normal(size=(2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    gi, gk, gb = conv2d_backward(x, w, None, np.zeros((3, 5, 5)))
    assert not gi.any() and not gk.any() and not gb.any()


def test_conv_backward_1x1_scalar_chain_rule(rng):
    x = rng.normal(size=(1, 4, 5))
    g = rng.normal(size=(1, 4, 5))
    _, gk, _ = conv2d_backward(x, rng.normal(size=(1, 1, 1, 1)), ConvSpec(1), g)
    assert gk[0, 0, 0, 0] == pytest.approx(float((x * g).sum()), rel=1e-12)


@pytest.mark.parametrize("spec", [ConvSpec(3, 1), ConvSpec(3, 0), ConvSpec(3, 1, 2)])
def test_conv_backward_finite_differences(rng, spec):
    x = rng.normal(size=(2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = conv2d(x, w, b, spec)
    g = rng.normal(size=out.shape)
    gi, gk, gb = conv2d_backward(x, w, spec, g)
    f = lambda: float((conv2d(x, w, b, spec) * g).sum())  # noqa: E731
    for arr, ana in ((x, gi), (w, gk), (b, gb)):
        for idx in np.ndindex(arr.shape):
            assert rel_err(central_diff(f, arr, 1e-4, idx), ana[idx], floor=1e-7) < 1e-5


def test_pointwise_values():
    assert sigmoid(np.array(0.0)) == 0.5
    assert tanh(np.array(0.0)) == 0.0
    s = sigmoid(np.array(100.0))
    assert 1 - 1e-6 < s < 1 and np.isfinite(s)


@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e3, 1e3)))
def test_pointwise_open_ranges(x):
    s, t = sigmoid(x), tanh(x)
    assert np.all((s > 0) & (s < 1))
    assert np.all((t > -1) & (t < 1))


@pytest.mark.parametrize("op", ["sigmoid", "tanh"])
def test_pointwise_backward_fd(rng, op):
    x = rng.normal(size=(3, 4)) * 2
    g = rng.normal(size=x.shape)
    ana = pointwise_backward(op, pointwise(op, x), g)
    f = lambda: float((pointwise(op, x) * g).sum())  # noqa: E731
    for idx in np.ndindex(x.shape):
        assert rel_err(central_diff(f, x, 1e-4, idx), ana[idx]) < 1e-6


def test_unknown_pointwise_op():
    with pytest.raises(ValueError):
        pointwise("relu", np.zeros(2))


def test_softmax_examples():
    p = channel_softmax2(np.zeros((2, 2, 2)))
    assert np.all(p == 0.5)
    x = 0.3
    p = channel_softmax2(np.array([x, x + np.log(3.0)]).reshape(2, 1, 1))
    np.testing.assert_allclose(p[:, 0, 0], [0.25, 0.75], atol=1e-12)
    with pytest.raises(ShapeError):
        channel_softmax2(np.zeros((3, 2, 2)))


@given(arrays(np.float64, (2, 3, 4), elements=st.floats(-500, 500)))
def test_softmax_normalized(z):
    p = channel_softmax2(z)
    assert np.max(np.abs(p.sum(axis=0) - 1)) <= 1e-6


def test_concat_example_and_roundtrip(rng):
    c = concat_channels(np.ones((1, 2, 2)), np.full((1, 2, 2), 2.0))
    assert c.shape == (2, 2, 2) and np.all(c[0] == 1) and np.all(c[1] == 2)
    a, b = rng.normal(size=(3, 4, 4)), rng.normal(size=(2, 4, 4))
    ra, rb = split_channels(concat_channels(a, b), 3)
    assert np.array_equal(ra, a) and np.array_equal(rb, b)
    with pytest.raises(ShapeError):
        concat_channels(a, rng.normal(size=(2, 4, 5)))


def test_concat_gradient_routing_fd(rng):
    a, b = rng.normal(size=(2, 3, 3)), rng.normal(size=(1, 3, 3))
    g = rng.normal(size=(3, 3, 3))
    ga, gb = split_channels(g, 2)
    f = lambda: float((concat_channels(a, b) * g).sum())  # noqa: E731
    for arr, ana in ((a, ga), (b, gb)):
        for idx in np.ndindex(arr.shape):
            assert rel_err(central_diff(f, arr, 1e-4, idx), ana[idx]) < 1e-8


def test_downsample_examples(rng):
    assert np.all(downsample2(np.full((2, 4, 6), 3.5)) == 3.5)
    assert downsample2(np.array([[[0.0, 0.0], [2.0, 2.0]]]))[0, 0, 0] == 1.0
    with pytest.raises(ShapeError):
        downsample2(np.zeros((1, 3, 4)))


def test_downsample_backward_fd(rng):
    x = rng.normal(size=(2, 4, 4))
    g = rng.normal(size=(2, 2, 2))
    ana = downsample2_backward(g)
    f = lambda: float((downsample2(x) * g).sum())  # noqa: E731
    for idx in np.ndindex(x.shape):
        assert rel_err(central_diff(f, x, 1e-4, idx), ana[idx]) < 1e-6


def test_avg_pool_composes(rng):
    x = rng.normal(size=(1, 8, 8))
    np.testing.assert_allclose(avg_pool(x, 4), x.reshape(1, 2, 4, 2, 4).mean(axis=(2, 4)))
    g = rng.normal(size=(1, 2, 2))
    np.testing.assert_allclose(avg_pool_backward(g, 4), np.repeat(np.repeat(g, 4, 1), 4, 2) / 16)


def test_ops_are_deterministic(rng):
    x = rng.normal(size=(3, 7, 7)).astype(np.float32)
    w = rng.normal(size=(2, 3, 3, 3)).astype(np.float32)
    assert np.array_equal(conv2d(x, w), conv2d(x.copy(), w.copy()))


def test_conv_oracle_all_small_shapes():
    """Every H, W <= 8 and channel count <= 4 (3x3 same-padded, plus 1x1 and 5x5 spot checks)."""
    rng = np.random.default_rng(7)
    worst = 0.0
    for h, w, cin, cout in itertools.product(range(1, 9), range(1, 9), range(1, 5), range(1, 5)):
        x = rng.normal(size=(cin, h, w))
        k = rng.normal(size=(cout, cin, 3, 3))
        b = rng.normal(size=cout)
        worst = max(worst, rel_err(conv2d(x, k, b), conv_loops(x, k, b)))
    for k in (1, 5):
        x = rng.normal(size=(2, 6, 5))
        kern = rng.normal(size=(3, 2, k, k))
        worst = max(worst, rel_err(conv2d(x, kern), conv_loops(x, kern)))
    assert worst < 1e-6
