"""Two-stream encoders, memory wiring and the pixelwise segmentation head.

Per frame: an appearance encoder on RGB and a motion encoder on the flow-angle
field each produce a stride-``s`` map; their channel concatenation is the
memory input ``x_t``. The memory (bidirectional ConvGRU by default) is
followed by a 1x1 convolution and a two-way softmax (channel 1 = object).

Ablation switches live in :class:`ModelConfig`:

* ``appearance``: ``cnn`` (two-layer stub), ``rgb`` (pooled raw frame), ``none``
* ``motion``: ``stub`` or ``none`` (constant 0.5 channel)
* ``cell``: ``gru``, ``rnn`` or ``none`` (per-frame stack of six convolutions)
* ``bidirectional``: two weight-shared passes fused by a 3x3 convolution
"""
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .data import flow_to_angle
from .recurrent import (
    BidirFuseParams,
    ConvGruParams,
    ConvRnnParams,
    bidirectional_backward,
    bidirectional_forward,
    run_sequence,
    run_sequence_backward,
)
from .tensor import (
    ConvSpec,
    ShapeError,
    TensorGroup,
    avg_pool,
    avg_pool_backward,
    channel_softmax2,
    concat_channels,
    conv2d,
    conv2d_backward,
    pointwise_backward,
    sigmoid,
    split_channels,
    tanh,
)

APPEARANCE_MODES = ("cnn", "rgb", "none")
MOTION_MODES = ("stub", "none")
CELLS = ("gru", "rnn", "none")
STACK_DEPTH = 6


@dataclass(frozen=True)
class ModelConfig:
    d_app: int = 16
    d_mid: int = 16
    d_h: int = 16
    kernel: int = 3
    stride: int = 4
    bidirectional: bool = True
    cell: str = "gru"
    appearance: str = "cnn"
    motion: str = "stub"
    stack_width: int = 0

    def __post_init__(self):
        if self.appearance not in APPEARANCE_MODES:
            raise ValueError(f"appearance must be one of {APPEARANCE_MODES}, got {self.appearance!r}")
        if self.motion not in MOTION_MODES:
            raise ValueError(f"motion must be one of {MOTION_MODES}, got {self.motion!r}")
        if self.cell not in CELLS:
            raise ValueError(f"cell must be one of {CELLS}, got {self.cell!r}")
        if self.stride < 1 or self.stride & (self.stride - 1):
            raise ValueError(f"stride must be a power of two, got {self.stride}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.cell == "none" and self.stack_width < 1:
            raise ValueError("cell 'none' needs stack_width >= 1 (see matched_stack_width)")

    @property
    def app_channels(self):
        return {"cnn": self.d_app, "rgb": 3, "none": 0}[self.appearance]

    @property
    def in_channels(self):
        return self.app_channels + 1

    def echo(self):
        return {k: v for k, v in asdict(self).items()}


# full-size preset: ModelConfig(**FULL_SCALE)
FULL_SCALE = dict(d_app=128, d_h=64, kernel=7, stride=8)


@dataclass
class AppearanceParams(TensorGroup):
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class MotionParams(TensorGroup):
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class HeadParams(TensorGroup):
    w: np.ndarray  # [2, d_h, 1, 1]
    b: np.ndarray


@dataclass
class ConvStackParams(TensorGroup):
    """Memoryless replacement for the recurrent cell: six tanh conv layers."""

    w0: np.ndarray
    b0: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    w4: np.ndarray
    b4: np.ndarray
    w5: np.ndarray
    b5: np.ndarray

    def layers(self):
        return [(getattr(self, f"w{i}"), getattr(self, f"b{i}")) for i in range(STACK_DEPTH)]


GROUPS = ("appearance", "motion", "memory", "fuse", "head")


@dataclass
class ModelParams:
    config: ModelConfig
    appearance: Optional[AppearanceParams]
    motion: Optional[MotionParams]
    memory: TensorGroup
    fuse: Optional[BidirFuseParams]
    head: HeadParams

    @classmethod
    def zeros(cls, config, dtype=np.float32):
        z = lambda *shape: np.zeros(shape, dtype=dtype)  # noqa: E731
        c = config
        app = mot = fuse = None
        if c.appearance == "cnn":
            app = AppearanceParams(z(c.d_mid, 3, 3, 3), z(c.d_mid), z(c.d_app, c.d_mid, 3, 3), z(c.d_app))
        if c.motion == "stub":
            mot = MotionParams(z(c.d_mid, 2, 3, 3), z(c.d_mid), z(1, c.d_mid, 3, 3), z(1))
        if c.cell == "gru":
            mem = ConvGruParams.zeros(c.in_channels, c.d_h, c.kernel, dtype)
        elif c.cell == "rnn":
            mem = ConvRnnParams.zeros(c.in_channels, c.d_h, c.kernel, dtype)
        else:
            widths = [c.in_channels] + [c.stack_width] * (STACK_DEPTH - 1) + [c.d_h]
            t = {}
            for i in range(STACK_DEPTH):
                t[f"w{i}"] = z(widths[i + 1], widths[i], c.kernel, c.kernel)
                t[f"b{i}"] = z(widths[i + 1])
            mem = ConvStackParams(**t)
        if c.bidirectional and c.cell != "none":
            fuse = BidirFuseParams.zeros(c.d_h, dtype)
        head = HeadParams(z(2, c.d_h, 1, 1), z(2))
        return cls(config, app, mot, mem, fuse, head)

    def groups(self):
        return {g: getattr(self, g) for g in GROUPS if getattr(self, g) is not None}

    def named(self):
        """Flat ``{"group.field": array}`` view used by the optimiser and checkpoints."""
        return {f"{g}.{k}": v for g, grp in self.groups().items() for k, v in grp.tensors().items()}

    @classmethod
    def from_named(cls, config, tensors):
        template = cls.zeros(config)
        parts = {}
        for g, grp in template.groups().items():
            sub = {}
            for k, v in grp.tensors().items():
                key = f"{g}.{k}"
                if key not in tensors:
                    raise KeyError(f"missing tensor {key!r}")
                if tensors[key].shape != v.shape:
                    raise ShapeError(f"tensor {key!r} has shape {tensors[key].shape}, expected {v.shape}")
                sub[k] = tensors[key]
            parts[g] = type(grp).from_tensors(sub)
        extra = set(tensors) - set(template.named())
        if extra:
            raise KeyError(f"unexpected tensors {sorted(extra)}")
        return cls(config, **{g: parts.get(g) for g in GROUPS})

    def with_named(self, tensors):
        merged = dict(self.named())
        merged.update(tensors)
        return ModelParams.from_named(self.config, merged)

    def count(self, groups=GROUPS):
        return sum(v.size for k, v in self.named().items() if k.split(".")[0] in groups)

    def astype(self, dtype):
        return ModelParams.from_named(self.config, {k: v.astype(dtype) for k, v in self.named().items()})


def memory_param_count(config):
    """Trainable parameters of the memory module (cell plus bidirectional fuse)."""
    return ModelParams.zeros(config).count(("memory", "fuse"))


def matched_stack_width(config):
    """Width of the six-layer conv stack whose parameter count is closest to the
    memory module of the same config with a ConvGRU cell."""
    ref = memory_param_count(_replace(config, cell="gru", stack_width=0))
    best = None
    for w in range(1, 4 * ref):
        n = memory_param_count(_replace(config, cell="none", stack_width=w))
        if best is None or abs(n - ref) < abs(best[1] - ref):
            best = (w, n)
        if n > ref:
            break
    return best[0]


def _replace(config, **kw):
    d = config.echo()
    d.update(kw)
    return ModelConfig(**d)


# -- streams -----------------------------------------------------------------


def _check_divisible(x, s):
    h, w = x.shape[-2:]
    if h % s or w % s:
        raise ShapeError(f"spatial extent {h}x{w} is not divisible by stride {s}")


def appearance_encode(frame, params, stride=4):
    """RGB ``[3,H,W]`` (or ``[T,3,H,W]``) -> features ``[d_app,H/s,W/s]`` in (-1, 1)."""
    _check_divisible(frame, stride)
    a1 = tanh(conv2d(frame, params.w1, params.b1))
    return tanh(conv2d(avg_pool(a1, stride), params.w2, params.b2))


def compensate_camera(flow_angle):
    """Subtract each frame's per-channel median flow angle.

    The stub sees only a ~14 px neighbourhood, too little to tell camera motion
    from object motion; the median is the background's angle whenever the
    background covers most of the frame. A uniform field becomes all zeros.
    """
    med = np.median(flow_angle.reshape(flow_angle.shape[:-2] + (-1,)), axis=-1)
    return flow_angle - med[..., None, None].astype(flow_angle.dtype)


def motion_encode(flow_angle, params, stride=4):
    """Flow-angle ``[2,H,W]`` (or ``[T,2,H,W]``) -> motion likelihood ``[1,H/s,W/s]``."""
    if flow_angle.shape[-3] != 2:
        raise ShapeError(f"motion stream takes 2 flow-angle channels, got {flow_angle.shape[-3]}")
    _check_divisible(flow_angle, stride)
    m1 = tanh(conv2d(compensate_camera(flow_angle), params.w1, params.b1))
    return sigmoid(conv2d(avg_pool(m1, stride), params.w2, params.b2))


def _stub_backward(inputs, hidden, p, stride, g_pre):
    # two-layer stub: conv -> tanh -> avg-pool -> conv; g_pre is dL/d(second conv output)
    g_pool, g_w2, g_b2 = conv2d_backward(avg_pool(hidden, stride), p.w2, None, g_pre)
    g_h = pointwise_backward("tanh", hidden, avg_pool_backward(g_pool, stride))
    _, g_w1, g_b1 = conv2d_backward(inputs, p.w1, None, g_h)
    return {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2}


def appearance_backward(frames, hidden, params, stride, g_pre):
    """Stub gradients given dL/d(pre-tanh output) of the appearance encoder."""
    return _stub_backward(frames, hidden, params, stride, g_pre)


def motion_backward(angle, hidden, params, stride, g_pre):
    """Stub gradients given dL/d(pre-sigmoid output) of the motion encoder."""
    return _stub_backward(angle, hidden, params, stride, g_pre)


def fuse_streams(app, motion):
    """Appearance channels first, motion channel last."""
    if app is None:
        return motion
    return concat_channels(app, motion)


def head_logits(feature, params):
    return conv2d(feature, params.w, params.b, ConvSpec(1))


def segment_head(feature, params):
    """Per-pixel (background, object) probabilities."""
    return channel_softmax2(head_logits(feature, params))


# -- whole pipeline ------------------------------------------------------------


@dataclass
class ForwardCache:
    frames: np.ndarray
    angle: np.ndarray  # motion-stub input (after camera compensation)
    app_hidden: Optional[np.ndarray]
    app: Optional[np.ndarray]
    mot_hidden: Optional[np.ndarray]
    mot: np.ndarray
    overridden: bool
    x: np.ndarray
    memory_cache: object
    feature: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def forward(frames, angle, params, motion_override=None, record_gates=False):
    """Run the pipeline on a clip.

    ``frames`` is ``[T,3,H,W]``, ``angle`` the flow-angle field ``[T,2,H,W]``.
    ``motion_override`` (``[T,1,H/s,W/s]``) replaces the motion stream output.
    Returns ``(probs [T,2,H/s,W/s], records, cache)``; ``records`` is None unless
    ``record_gates`` is set.
    """
    c = params.config
    s = c.stride
    _check_divisible(frames, s)
    T, _, H, W = frames.shape
    if angle.shape != (T, 2, H, W):
        raise ShapeError(f"flow-angle shape {angle.shape} does not match frames {(T, 2, H, W)}")
    dtype = params.head.w.dtype
    frames = frames.astype(dtype, copy=False)
    angle = angle.astype(dtype, copy=False)
    h, w = H // s, W // s

    app_hidden = app = None
    if c.appearance == "cnn":
        app_hidden = tanh(conv2d(frames, params.appearance.w1, params.appearance.b1))
        app = tanh(conv2d(avg_pool(app_hidden, s), params.appearance.w2, params.appearance.b2))
    elif c.appearance == "rgb":
        app = avg_pool(frames, s)

    mot_hidden = None
    overridden = False
    if c.motion == "none":
        mot = np.full((T, 1, h, w), 0.5, dtype=dtype)
    elif motion_override is not None:
        if motion_override.shape != (T, 1, h, w):
            raise ShapeError(f"motion_override shape {motion_override.shape} != {(T, 1, h, w)}")
        mot = motion_override.astype(dtype, copy=True)
        overridden = True
    else:
        angle = compensate_camera(angle)
        mot_hidden = tanh(conv2d(angle, params.motion.w1, params.motion.b1))
        mot = sigmoid(conv2d(avg_pool(mot_hidden, s), params.motion.w2, params.motion.b2))

    x = fuse_streams(app, mot)

    records = None
    if c.cell == "none":
        acts = [x]
        for wk, bk in params.memory.layers():
            acts.append(tanh(conv2d(acts[-1], wk, bk)))
        feature, mcache = acts[-1], acts
    elif c.bidirectional:
        feature, mcache = bidirectional_forward(x, params.memory, params.fuse)
        if record_gates:
            records = {"forward": mcache.records_fwd, "backward": mcache.records_bwd}
    else:
        feature, recs = run_sequence(x, None, params.memory, "forward")
        mcache = recs
        if record_gates:
            records = {"forward": recs}

    logits = head_logits(feature, params.head)
    probs = channel_softmax2(logits)
    cache = ForwardCache(frames, angle, app_hidden, app, mot_hidden, mot, overridden, x, mcache, feature, logits, probs)
    return probs, records, cache


def backward(cache, params, grad_logits, groups=GROUPS):
    """Gradients of a scalar loss given dL/dlogits. Returns a ``{name: grad}`` dict
    covering only the tensors of ``groups``."""
    c = params.config
    s = c.stride
    grads = {}

    def put(group, tensors):
        if group in groups:
            for k, v in tensors.items():
                grads[f"{group}.{k}"] = v

    g_feat, g_hw, g_hb = conv2d_backward(cache.feature, params.head.w, ConvSpec(1), grad_logits)
    put("head", {"w": g_hw, "b": g_hb})

    need_x = bool({"appearance", "motion"} & set(groups))
    if not (need_x or {"memory", "fuse"} & set(groups)):
        return grads

    if c.cell == "none":
        g = g_feat
        acts = cache.memory_cache
        stack = {}
        for i in range(STACK_DEPTH - 1, -1, -1):
            wk, _ = params.memory.layers()[i]
            g_a = pointwise_backward("tanh", acts[i + 1], g)
            g, stack[f"w{i}"], stack[f"b{i}"] = conv2d_backward(acts[i], wk, None, g_a)
        g_x = g
        put("memory", stack)
    elif c.bidirectional:
        g_x, g_mem, g_fuse = bidirectional_backward(cache.memory_cache, params.memory, params.fuse, g_feat)
        put("memory", g_mem.tensors())
        put("fuse", g_fuse.tensors())
    else:
        g_x, _, g_mem = run_sequence_backward(cache.x, cache.memory_cache, params.memory, g_feat, "forward")
        put("memory", g_mem.tensors())

    if c.app_channels:
        g_app, g_mot = split_channels(g_x, c.app_channels)
    else:
        g_app, g_mot = None, g_x

    if c.appearance == "cnn" and "appearance" in groups:
        g_pre = pointwise_backward("tanh", cache.app, g_app)
        put("appearance", appearance_backward(cache.frames, cache.app_hidden, params.appearance, s, g_pre))

    if c.motion == "stub" and "motion" in groups:
        if cache.overridden:
            put("motion", {k: np.zeros_like(v) for k, v in params.motion.tensors().items()})
        else:
            g_pre = pointwise_backward("sigmoid", cache.mot, g_mot)
            put("motion", motion_backward(cache.angle, cache.mot_hidden, params.motion, s, g_pre))
    return grads


def forward_video(video, params, record_gates=False, motion_override=None):
    """Segment a :class:`~vismem.data.VideoSample`.

    Returns ``(probs [T,2,H/s,W/s], records)``; threshold ``probs[:, 1] > 0.5``
    for binary masks.
    """
    probs, records, _ = forward(
        video.frames, flow_to_angle(video.flow), params, motion_override, record_gates
    )
    return probs, records


def masks_from_probs(probs):
    return probs[:, 1] > 0.5

