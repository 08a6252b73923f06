"""Convolutional GRU visual memory, its BPTT gradients and the bidirectional wrapper.

One step of the cell::

    z  = sigmoid(x * w_xz + h * w_hz + b_z)
    r  = sigmoid(x * w_xr + h * w_hr + b_r)
    hc = tanh(x * w_xh + (r . h) * w_hh + b_h)
    h' = (1 - z) . h + z . hc

``*`` is a same-padded convolution, ``.`` is elementwise. States are arrays of
shape ``[d_h, H, W]``; sequences are ``[T, C, H, W]``.
"""
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ConvSpec,
    ShapeError,
    TensorGroup,
    concat_channels,
    conv2d,
    conv2d_backward,
    pointwise_backward,
    sigmoid,
    split_channels,
    tanh,
)


@dataclass
class ConvGruParams(TensorGroup):
    w_xz: np.ndarray
    w_hz: np.ndarray
    w_xr: np.ndarray
    w_hr: np.ndarray
    w_xh: np.ndarray
    w_hh: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    @classmethod
    def zeros(cls, in_channels, state_channels, kernel_size=7, dtype=np.float32):
        wx = (state_channels, in_channels, kernel_size, kernel_size)
        wh = (state_channels, state_channels, kernel_size, kernel_size)
        b = (state_channels,)
        z = lambda shape: np.zeros(shape, dtype=dtype)  # noqa: E731
        return cls(z(wx), z(wh), z(wx), z(wh), z(wx), z(wh), z(b), z(b), z(b))

    @property
    def state_channels(self):
        return self.w_hz.shape[0]

    @property
    def in_channels(self):
        return self.w_xz.shape[1]

    @property
    def kernel_size(self):
        return self.w_xz.shape[2]


@dataclass
class ConvRnnParams(TensorGroup):
    """Plain convolutional RNN: ``h' = tanh(x * w_x + h * w_h + b)``."""

    w_x: np.ndarray
    w_h: np.ndarray
    b: np.ndarray

    @classmethod
    def zeros(cls, in_channels, state_channels, kernel_size=7, dtype=np.float32):
        k = kernel_size
        return cls(
            np.zeros((state_channels, in_channels, k, k), dtype=dtype),
            np.zeros((state_channels, state_channels, k, k), dtype=dtype),
            np.zeros(state_channels, dtype=dtype),
        )

    @property
    def state_channels(self):
        return self.w_h.shape[0]

    @property
    def in_channels(self):
        return self.w_x.shape[1]

    @property
    def kernel_size(self):
        return self.w_x.shape[2]


@dataclass
class BidirFuseParams(TensorGroup):
    w_fuse: np.ndarray  # [d_h, 2*d_h, 3, 3]
    b_fuse: np.ndarray

    @classmethod
    def zeros(cls, state_channels, dtype=np.float32):
        return cls(
            np.zeros((state_channels, 2 * state_channels, 3, 3), dtype=dtype),
            np.zeros(state_channels, dtype=dtype),
        )


@dataclass
class GateRecord:
    """Activations of one GRU step, kept for BPTT and for gate visualisation."""

    z: np.ndarray
    r: np.ndarray
    h_cand: np.ndarray
    h_new: np.ndarray
    h_prev: np.ndarray


@dataclass
class RnnRecord:
    h_new: np.ndarray
    h_prev: np.ndarray


def _check_step(x, h, in_channels, state_channels):
    if x.ndim != 3 or h.ndim != 3:
        raise ShapeError(f"gru step expects [C,H,W] tensors, got {x.shape} and {h.shape}")
    if x.shape[1:] != h.shape[1:]:
        raise ShapeError(f"input spatial dims {x.shape[1:]} != state spatial dims {h.shape[1:]}")
    if x.shape[0] != in_channels:
        raise ShapeError(f"input has {x.shape[0]} channels, cell expects {in_channels}")
    if h.shape[0] != state_channels:
        raise ShapeError(f"state has {h.shape[0]} channels, cell expects {state_channels}")


def gru_step(x, h_prev, params):
    """One ConvGRU update. Returns ``(h_new, GateRecord)``; exactly six convolutions."""
    _check_step(x, h_prev, params.in_channels, params.state_channels)
    spec = ConvSpec.same(params.kernel_size)
    z = sigmoid(conv2d(x, params.w_xz, params.b_z, spec) + conv2d(h_prev, params.w_hz, None, spec))
    r = sigmoid(conv2d(x, params.w_xr, params.b_r, spec) + conv2d(h_prev, params.w_hr, None, spec))
    h_cand = tanh(conv2d(x, params.w_xh, params.b_h, spec) + conv2d(r * h_prev, params.w_hh, None, spec))
    h_new = (1.0 - z) * h_prev + z * h_cand
    return h_new, GateRecord(z=z, r=r, h_cand=h_cand, h_new=h_new, h_prev=h_prev)


def gru_step_backward(x, record, params, grad_h_new):
    """Gradients of one :func:`gru_step`.

    Returns ``(grad_x, grad_h_prev, grad_params)`` where ``grad_params`` is a
    :class:`ConvGruParams` of gradients.
    """
    if record is None:
        raise ValueError("gru_step_backward needs the GateRecord cached by the forward step")
    if grad_h_new.shape != record.h_new.shape:
        raise ShapeError(f"grad shape {grad_h_new.shape} != state shape {record.h_new.shape}")
    spec = ConvSpec.same(params.kernel_size)
    z, r, hc, h = record.z, record.r, record.h_cand, record.h_prev

    g_h = grad_h_new * (1.0 - z)
    g_az = pointwise_backward("sigmoid", z, grad_h_new * (hc - h))
    g_ah = pointwise_backward("tanh", hc, grad_h_new * z)

    gx_h, g_wxh, g_bh = conv2d_backward(x, params.w_xh, spec, g_ah)
    g_rh, g_whh, _ = conv2d_backward(r * h, params.w_hh, spec, g_ah, with_bias=False)
    g_h += g_rh * r
    g_ar = pointwise_backward("sigmoid", r, g_rh * h)

    gx_r, g_wxr, g_br = conv2d_backward(x, params.w_xr, spec, g_ar)
    gh_r, g_whr, _ = conv2d_backward(h, params.w_hr, spec, g_ar, with_bias=False)
    gx_z, g_wxz, g_bz = conv2d_backward(x, params.w_xz, spec, g_az)
    gh_z, g_whz, _ = conv2d_backward(h, params.w_hz, spec, g_az, with_bias=False)

    grad_x = gx_h + gx_r + gx_z
    grad_h = g_h + gh_r + gh_z
    grads = ConvGruParams(
        w_xz=g_wxz, w_hz=g_whz, w_xr=g_wxr, w_hr=g_whr, w_xh=g_wxh, w_hh=g_whh,
        b_z=g_bz, b_r=g_br, b_h=g_bh,
    )
    return grad_x, grad_h, grads


def rnn_step(x, h_prev, params):
    """One ConvRNN update (two convolutions). Returns ``(h_new, RnnRecord)``."""
    _check_step(x, h_prev, params.in_channels, params.state_channels)
    spec = ConvSpec.same(params.kernel_size)
    h_new = tanh(conv2d(x, params.w_x, params.b, spec) + conv2d(h_prev, params.w_h, None, spec))
    return h_new, RnnRecord(h_new=h_new, h_prev=h_prev)


def rnn_step_backward(x, record, params, grad_h_new):
    if record is None:
        raise ValueError("rnn_step_backward needs the record cached by the forward step")
    spec = ConvSpec.same(params.kernel_size)
    g_a = pointwise_backward("tanh", record.h_new, grad_h_new)
    grad_x, g_wx, g_b = conv2d_backward(x, params.w_x, spec, g_a)
    grad_h, g_wh, _ = conv2d_backward(record.h_prev, params.w_h, spec, g_a, with_bias=False)
    return grad_x, grad_h, ConvRnnParams(w_x=g_wx, w_h=g_wh, b=g_b)


def _cell(params):
    if isinstance(params, ConvGruParams):
        return gru_step, gru_step_backward
    if isinstance(params, ConvRnnParams):
        return rnn_step, rnn_step_backward
    raise TypeError(f"not a recurrent cell parameter set: {type(params).__name__}")


def _order(T, direction):
    if direction == "forward":
        return range(T)
    if direction == "backward":
        return range(T - 1, -1, -1)
    raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")


def initial_state(params, height, width, dtype=np.float32):
    return np.zeros((params.state_channels, height, width), dtype=dtype)


def run_sequence(xs, h0, params, direction="forward"):
    """Unroll a cell over ``xs``.

    Returns ``(states, records)``, both indexed by input frame: ``states[t]`` is
    the state right after consuming frame ``t`` whichever way time runs.
    """
    T = xs.shape[0]
    if T == 0:
        raise ValueError("run_sequence needs at least one frame")
    step, _ = _cell(params)
    if h0 is None:
        h0 = initial_state(params, xs.shape[2], xs.shape[3], xs.dtype)
    states = np.empty((T,) + h0.shape, dtype=np.result_type(xs.dtype, h0.dtype))
    records = [None] * T
    h = h0
    for t in _order(T, direction):
        h, records[t] = step(xs[t], h, params)
        states[t] = h
    return states, records


def run_sequence_backward(xs, records, params, grad_states, direction="forward"):
    """BPTT through :func:`run_sequence`.

    ``grad_states[t]`` is dL/d states[t] from outside the recurrence. Returns
    ``(grad_xs, grad_h0, grad_params)``.
    """
    T = xs.shape[0]
    if len(records) != T or grad_states.shape[0] != T:
        raise ShapeError("records, inputs and grad_states must cover the same frames")
    _, step_back = _cell(params)
    grad_xs = np.empty_like(xs, dtype=grad_states.dtype)
    grad_params = params.zeros_like().astype(grad_states.dtype)
    acc = grad_params.tensors()
    carry = np.zeros_like(grad_states[0])
    for t in reversed(list(_order(T, direction))):
        g = grad_states[t] + carry
        grad_xs[t], carry, gp = step_back(xs[t], records[t], params, g)
        for k, v in gp.tensors().items():
            acc[k] += v
    return grad_xs, carry, grad_params


@dataclass
class BidirCache:
    xs: np.ndarray
    states_fwd: np.ndarray
    states_bwd: np.ndarray
    records_fwd: list
    records_bwd: list
    fused_in: np.ndarray
    out: np.ndarray


def bidirectional_forward(xs, params, fuse, h0_fwd=None, h0_bwd=None):
    """Bidirectional pass with cache. Returns ``(out [T,d_h,H,W], BidirCache)``."""
    states_f, rec_f = run_sequence(xs, h0_fwd, params, "forward")
    states_b, rec_b = run_sequence(xs, h0_bwd, params, "backward")
    fused_in = concat_channels(states_f, states_b)
    out = tanh(conv2d(fused_in, fuse.w_fuse, fuse.b_fuse, ConvSpec.same(3)))
    return out, BidirCache(xs, states_f, states_b, rec_f, rec_b, fused_in, out)


def bidirectional_run(xs, params, fuse, h0_fwd=None, h0_bwd=None):
    """Run two weight-shared passes (forward, backward in time) and fuse them per frame."""
    return bidirectional_forward(xs, params, fuse, h0_fwd, h0_bwd)[0]


def bidirectional_backward(cache, params, fuse, grad_out):
    """Returns ``(grad_xs, grad_params, grad_fuse)``."""
    g_a = pointwise_backward("tanh", cache.out, grad_out)
    g_in, g_w, g_b = conv2d_backward(cache.fused_in, fuse.w_fuse, ConvSpec.same(3), g_a)
    g_f, g_bk = split_channels(g_in, params.state_channels)
    gx_f, _, gp_f = run_sequence_backward(cache.xs, cache.records_fwd, params, g_f, "forward")
    gx_b, _, gp_b = run_sequence_backward(cache.xs, cache.records_bwd, params, g_bk, "backward")
    grad_params = type(params).from_tensors(
        {k: v + gp_b.tensors()[k] for k, v in gp_f.tensors().items()}
    )
    return gx_f + gx_b, grad_params, BidirFuseParams(w_fuse=g_w, b_fuse=g_b)
