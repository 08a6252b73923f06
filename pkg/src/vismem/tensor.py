"""Dense tensor primitives with hand-written gradients.

Tensors are plain numpy arrays. Feature maps are ``[C, H, W]``; most ops also
accept a leading batch/time axis ``[N, C, H, W]`` so per-frame encoders can run
over a whole clip at once. Nothing here mutates its inputs.
"""
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int
    padding: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")

    @classmethod
    def same(cls, kernel_size):
        return cls(kernel_size, (kernel_size - 1) // 2, 1)


def _as_batch(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


def conv_output_size(n, spec):
    span = n + 2 * spec.padding - spec.kernel_size
    if span < 0 or span % spec.stride:
        raise ShapeError(
            f"extent {n} with kernel {spec.kernel_size}, pad {spec.padding}, "
            f"stride {spec.stride} does not give an integral positive output"
        )
    return span // spec.stride + 1


def _check_conv(x, kernel, bias, spec):
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"kernel must be [Cout,Cin,K,K], got {kernel.shape}")
    if kernel.shape[2] != spec.kernel_size:
        raise ShapeError(f"kernel size {kernel.shape[2]} != spec kernel_size {spec.kernel_size}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({kernel.shape[0]},)")
    return conv_output_size(x.shape[2], spec), conv_output_size(x.shape[3], spec)


def _patches(x, spec, ho, wo):
    """[N,C,H,W] -> [N, C*K*K, Ho*Wo] patch matrix (channel-major)."""
    p, k, s = spec.padding, spec.kernel_size, spec.stride
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    n, c = x.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s]
    return cols.reshape(n, c * k * k, ho * wo)


def conv2d(x, kernel, bias=None, spec=None):
    """Cross-correlation of ``x`` with ``kernel`` plus per-channel ``bias``.

    ``x`` is ``[Cin,H,W]`` or ``[N,Cin,H,W]``; the output keeps the same rank.
    """
    if spec is None:
        spec = ConvSpec.same(kernel.shape[2])
    xb, single = _as_batch(x)
    ho, wo = _check_conv(xb, kernel, bias, spec)
    n = xb.shape[0]
    cout = kernel.shape[0]
    out = kernel.reshape(cout, -1) @ _patches(xb, spec, ho, wo)
    if bias is not None:
        out += bias[:, None]
    out = out.reshape(n, cout, ho, wo)
    return out[0] if single else out


def conv2d_backward(x, kernel, spec, grad_out, with_bias=True):
    """Gradients of :func:`conv2d` w.r.t. input, kernel and bias.

    Returns ``(grad_input, grad_kernel, grad_bias)``; ``grad_bias`` is None when
    ``with_bias`` is false.
    """
    if spec is None:
        spec = ConvSpec.same(kernel.shape[2])
    xb, single = _as_batch(x)
    gb, gsingle = _as_batch(grad_out)
    if single != gsingle:
        raise ShapeError("input and grad_output must have the same rank")
    ho, wo = _check_conv(xb, kernel, None, spec)
    cout, cin, k, _ = kernel.shape
    n = xb.shape[0]
    if gb.shape != (n, cout, ho, wo):
        raise ShapeError(f"grad_output shape {grad_out.shape} != forward output {(n, cout, ho, wo)}")

    g2 = gb.reshape(n, cout, ho * wo)
    cols = _patches(xb, spec, ho, wo)
    if n == 1:
        grad_kernel = g2[0] @ cols[0].T
    else:
        grad_kernel = np.einsum("nop,nqp->oq", g2, cols, optimize=True)
    grad_kernel = grad_kernel.reshape(kernel.shape)
    grad_bias = g2.sum(axis=(0, 2)) if with_bias else None

    gcols = (kernel.reshape(cout, -1).T @ g2).reshape(n, cin, k, k, ho, wo)
    p, s = spec.padding, spec.stride
    h, w = xb.shape[2:]
    gpad = np.zeros((n, cin, h + 2 * p, w + 2 * p), dtype=gcols.dtype)
    for i in range(k):
        for j in range(k):
            gpad[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += gcols[:, :, i, j]
    grad_input = np.ascontiguousarray(gpad[:, :, p : p + h, p : p + w])
    return (grad_input[0] if single else grad_input), grad_kernel, grad_bias


def conv2d_direct(x, kernel, bias=None, spec=None):
    """Reference convolution written as explicit loops (slow; for testing)."""
    if spec is None:
        spec = ConvSpec.same(kernel.shape[2])
    if x.ndim != 3:
        raise ShapeError(f"conv2d_direct takes [C,H,W], got {x.shape}")
    ho, wo = _check_conv(x[None], kernel, bias, spec)
    cout, cin, k, _ = kernel.shape
    _, h, w = x.shape
    p, s = spec.padding, spec.stride
    out = np.zeros((cout, ho, wo), dtype=np.float64)
    for o in range(cout):
        for y in range(ho):
            for xx in range(wo):
                acc = 0.0 if bias is None else float(bias[o])
                for c in range(cin):
                    for i in range(k):
                        for j in range(k):
                            yy = y * s + i - p
                            xi = xx * s + j - p
                            if 0 <= yy < h and 0 <= xi < w:
                                acc += float(x[c, yy, xi]) * float(kernel[o, c, i, j])
                out[o, y, xx] = acc
    return out


def _open_unit(dtype):
    dtype = np.dtype(dtype) if np.issubdtype(dtype, np.floating) else np.dtype(np.float64)
    fi = np.finfo(dtype)
    return fi.tiny, 1.0 - fi.epsneg


def sigmoid(x):
    # clamp so saturated gates stay strictly inside (0, 1)
    lo, hi = _open_unit(x.dtype)
    return np.clip(expit(x), lo, hi)


def tanh(x):
    _, hi = _open_unit(x.dtype)
    return np.clip(np.tanh(x), -hi, hi)


def pointwise(op, x):
    if op == "sigmoid":
        return sigmoid(x)
    if op == "tanh":
        return tanh(x)
    raise ValueError(f"unknown pointwise op {op!r}")


def pointwise_backward(op, y, grad_out):
    """Backward of :func:`pointwise` given its *output* ``y``."""
    if op == "sigmoid":
        return grad_out * y * (1.0 - y)
    if op == "tanh":
        return grad_out * (1.0 - y * y)
    raise ValueError(f"unknown pointwise op {op!r}")


def channel_softmax2(logits):
    """Two-way softmax over the channel axis of ``[2,H,W]`` (or ``[N,2,H,W]``)."""
    axis = logits.ndim - 3
    if logits.ndim not in (3, 4) or logits.shape[axis] != 2:
        raise ShapeError(f"channel_softmax2 needs exactly 2 channels, got shape {logits.shape}")
    m = logits.max(axis=axis, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=axis, keepdims=True)


def concat_channels(a, b):
    if a.ndim != b.ndim or a.shape[-2:] != b.shape[-2:] or a.shape[:-3] != b.shape[:-3]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=a.ndim - 3)


def split_channels(x, ca):
    """Inverse of :func:`concat_channels`; also routes gradients back."""
    axis = x.ndim - 3
    return np.split(x, [ca], axis=axis)


def downsample2(x):
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"downsample2 needs even spatial extents, got {h}x{w}")
    lead = x.shape[:-2]
    return x.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


def downsample2_backward(grad_out):
    g = np.repeat(np.repeat(grad_out, 2, axis=-2), 2, axis=-1)
    return g * 0.25


def avg_pool(x, factor):
    """Repeated :func:`downsample2`; ``factor`` must be a power of two."""
    while factor > 1:
        x = downsample2(x)
        factor //= 2
    return x


def avg_pool_backward(grad_out, factor):
    while factor > 1:
        grad_out = downsample2_backward(grad_out)
        factor //= 2
    return grad_out


class TensorGroup:
    """Mixin for dataclasses whose fields are all arrays (parameters or grads)."""

    def tensors(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_tensors(cls, tensors):
        return cls(**tensors)

    def map(self, fn):
        return type(self).from_tensors({k: fn(v) for k, v in self.tensors().items()})

    def zeros_like(self):
        return self.map(np.zeros_like)

    def astype(self, dtype):
        return self.map(lambda v: v.astype(dtype))

    def count(self):
        return sum(v.size for v in self.tensors().values())
