"""Training: loss, optimiser, batch formation, stop-and-go augmentation, BPTT steps.

Two stages. Stage A fits the appearance and motion stubs frame by frame
(appearance through an auxiliary 1x1 head, motion directly on its sigmoid
output). Stage B freezes both stubs and trains memory, fuse and head with
truncated BPTT over ``batch_frames`` consecutive frames of one video.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .data import downsample_mask, flow_to_angle
from .model import ModelParams, appearance_backward, backward, compensate_camera, forward, motion_backward
from .tensor import (
    ConvSpec,
    ShapeError,
    avg_pool,
    channel_softmax2,
    conv2d,
    conv2d_backward,
    pointwise_backward,
    sigmoid,
    tanh,
)

STAGE_B_GROUPS = ("memory", "fuse", "head")
PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    lr_decay_per_epoch: float = 0.95
    weight_decay: float = 0.005
    clip_bound: float = 50.0
    batch_frames: int = 14
    iterations: int = 2000
    aug_fraction: float = 0.2
    aug_stop_share: float = 0.5  # fraction of augmented batches that freeze the tail
    freeze_len: int = 5
    rmsprop_rho: float = 0.9
    rmsprop_eps: float = 1e-8
    crop: int = 0  # square crop side; 0 keeps the full frame
    flip: bool = True
    epoch_iterations: int = 0  # 0: one epoch = one batch per training video
    rng_seed: int = 0
    pretrain_iterations: int = 1000
    pretrain_frames: int = 8
    pretrain_lr: float = 1e-2

    def __post_init__(self):
        for name in ("learning_rate", "lr_decay_per_epoch", "clip_bound", "rmsprop_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not 0.0 <= self.aug_fraction <= 1.0:
            raise ValueError(f"aug_fraction must be in [0, 1], got {self.aug_fraction}")
        if not 0.0 <= self.aug_stop_share <= 1.0:
            raise ValueError(f"aug_stop_share must be in [0, 1], got {self.aug_stop_share}")
        if not 0.0 < self.rmsprop_rho < 1.0:
            raise ValueError(f"rmsprop_rho must be in (0, 1), got {self.rmsprop_rho}")
        if self.freeze_len < 1 or self.batch_frames <= self.freeze_len:
            raise ValueError(
                f"need batch_frames > freeze_len >= 1, got {self.batch_frames} and {self.freeze_len}"
            )
        if self.iterations < 0 or self.pretrain_iterations < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.crop < 0 or self.pretrain_frames < 1:
            raise ValueError("crop must be >= 0 and pretrain_frames >= 1")

    def echo(self):
        return asdict(self)

    @classmethod
    def desk(cls, **overrides):
        """Settings for the 2000-iteration desk-scale runs: stage B at 1e-3."""
        kw = dict(learning_rate=1e-3)
        kw.update(overrides)
        return cls(**kw)


# -- loss and optimiser --------------------------------------------------------


def bce_loss(probs, gt):
    """Mean binary cross-entropy of the object channel against ``gt``.

    ``probs`` is ``[T,2,h,w]`` (softmax output), ``gt`` ``[T,1,h,w]`` in {0,1}.
    Returns ``(loss, grad)`` where ``grad`` is dL/dlogits, shape of ``probs``.
    """
    if probs.ndim != 4 or probs.shape[1] != 2:
        raise ShapeError(f"probs must be [T,2,h,w], got {probs.shape}")
    if gt.shape != (probs.shape[0], 1) + probs.shape[2:]:
        raise ShapeError(f"gt shape {gt.shape} does not match probs {probs.shape}")
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground-truth masks must be binary {0, 1}")
    y = gt[:, 0].astype(np.float64)
    p = np.clip(probs[:, 1].astype(np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    # softmax + cross-entropy: dL/dz_obj = p - y, dL/dz_bg = y - p
    d = (probs[:, 1] - gt[:, 0]) / y.size
    grad = np.stack([-d, d], axis=1).astype(probs.dtype)
    return float(loss), grad


def clip_gradients(grads, bound=50.0):
    """Elementwise clamp to ``[-bound, bound]``; accepts an array or a dict of arrays."""
    if isinstance(grads, dict):
        return {k: np.clip(v, -bound, bound) for k, v in grads.items()}
    return np.clip(grads, -bound, bound)


@dataclass
class OptimizerState:
    acc: dict = field(default_factory=dict)  # running mean of squared gradients
    rho: float = 0.9
    eps: float = 1e-8
    steps: int = 0

    @classmethod
    def for_params(cls, named, rho=0.9, eps=1e-8):
        return cls({k: np.zeros_like(v) for k, v in named.items()}, rho, eps)


def rmsprop_update(params, grads, state, lr, weight_decay=0.0):
    """One RMSProp step with decoupled weight decay.

    ``params`` and ``grads`` are ``{name: array}``; tensors without a gradient
    are passed through untouched. ``state.acc`` is updated in place.
    """
    out = dict(params)
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        theta = params[k]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient {k!r} has shape {g.shape}, parameter has {theta.shape}")
        acc = state.acc.get(k)
        if acc is None:
            acc = np.zeros_like(theta)
        acc = state.rho * acc + (1.0 - state.rho) * (g * g)
        state.acc[k] = acc
        out[k] = theta - lr * g / np.sqrt(acc + state.eps) - (lr * weight_decay) * theta
    state.steps += 1
    return out


def lr_schedule(epoch, lr0=1e-4, decay=0.95):
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return lr0 * decay**epoch


# -- initialisation ------------------------------------------------------------


def xavier_init(shape, rng, dtype=np.float32):
    """Uniform in +-sqrt(6 / (fan_in + fan_out)) for a ``[Cout,Cin,K,K]`` kernel."""
    if len(shape) != 4:
        raise ShapeError(f"xavier_init expects a conv kernel shape, got {shape}")
    cout, cin, kh, kw = shape
    bound = math.sqrt(6.0 / ((cin + cout) * kh * kw))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(config, rng, dtype=np.float32):
    """Xavier kernels everywhere (ConvGRU included), zero biases."""
    template = ModelParams.zeros(config, dtype)
    named = {}
    for k, v in template.named().items():
        named[k] = xavier_init(v.shape, rng, dtype) if v.ndim == 4 else np.zeros_like(v)
    return ModelParams.from_named(config, named)


# -- batches -------------------------------------------------------------------


@dataclass
class BatchSample:
    frames: np.ndarray  # [n,3,H,W]
    flow: np.ndarray  # [n,2,H,W] raw (dx, dy), already flipped if `flipped`
    masks: np.ndarray  # [n,1,H,W]
    gt: np.ndarray  # [n,1,H/s,W/s] loss target
    motion_override: Optional[np.ndarray] = None
    video: str = ""
    start: int = 0
    offset: tuple = (0, 0)
    flipped: bool = False
    augmentation: str = "none"

    @property
    def angle(self):
        return flow_to_angle(self.flow)

    @property
    def length(self):
        return self.frames.shape[0]


def flip_horizontal(frames, flow, masks):
    """Mirror left-right. The horizontal flow component changes sign."""
    flow = flow[..., ::-1].copy()
    flow[:, 0] = -flow[:, 0]
    return frames[..., ::-1].copy(), flow, masks[..., ::-1].copy()


def make_batch(dataset, config, rng, stride=4, length=None):
    """``length`` (default ``config.batch_frames``) consecutive frames of one random
    video with a single crop window and flip decision for every modality."""
    n = config.batch_frames if length is None else length
    video = dataset[int(rng.integers(len(dataset)))]
    T, H, W = video.length, *video.size
    if T < n:
        raise ValueError(f"video {video.name!r} has {T} frames, batch needs {n}")
    start = int(rng.integers(T - n + 1))
    side_h = side_w = config.crop
    if not config.crop:
        side_h, side_w = H, W
    if side_h > H or side_w > W or side_h % stride or side_w % stride:
        raise ShapeError(f"crop {config.crop} does not fit {H}x{W} at stride {stride}")
    oy = int(rng.integers(H - side_h + 1))
    ox = int(rng.integers(W - side_w + 1))
    sl = (slice(start, start + n), slice(None), slice(oy, oy + side_h), slice(ox, ox + side_w))
    frames, flow, masks = video.frames[sl].copy(), video.flow[sl].copy(), video.masks[sl].copy()
    flipped = bool(config.flip and rng.random() < 0.5)
    if flipped:
        frames, flow, masks = flip_horizontal(frames, flow, masks)
    gt = downsample_mask(masks, stride)
    return BatchSample(frames, flow, masks, gt, None, video.name, start, (oy, ox), flipped)


def _override_base(batch):
    if batch.motion_override is not None:
        return batch.motion_override.copy()
    return batch.gt.copy()


def augment_stop(batch, freeze_len=5):
    """Freeze the last ``freeze_len`` frames on the frame before them.

    Earlier frames get the ground-truth mask as motion signal; frozen frames get
    an all-zero motion signal and zero flow.
    """
    n = batch.length
    if n <= freeze_len:
        raise ValueError(f"batch of {n} frames cannot freeze {freeze_len}")
    src = n - freeze_len - 1
    frames, flow, masks, gt = (a.copy() for a in (batch.frames, batch.flow, batch.masks, batch.gt))
    override = _override_base(batch)
    frames[src + 1 :] = frames[src]
    masks[src + 1 :] = masks[src]
    gt[src + 1 :] = gt[src]
    flow[src + 1 :] = 0.0
    override[src + 1 :] = 0.0
    return replace(batch, frames=frames, flow=flow, masks=masks, gt=gt, motion_override=override,
                   augmentation=_tag(batch, "stop"))


def augment_static_start(batch, freeze_len=5):
    """Mirror of :func:`augment_stop`: the first ``freeze_len`` frames become
    copies of frame ``freeze_len`` with no motion signal."""
    n = batch.length
    if n <= freeze_len:
        raise ValueError(f"batch of {n} frames cannot freeze {freeze_len}")
    src = freeze_len
    frames, flow, masks, gt = (a.copy() for a in (batch.frames, batch.flow, batch.masks, batch.gt))
    override = _override_base(batch)
    frames[:src] = frames[src]
    masks[:src] = masks[src]
    gt[:src] = gt[src]
    flow[:src] = 0.0
    override[:src] = 0.0
    return replace(batch, frames=frames, flow=flow, masks=masks, gt=gt, motion_override=override,
                   augmentation=_tag(batch, "static_start"))


def _tag(batch, name):
    return name if batch.augmentation == "none" else f"{batch.augmentation}+{name}"


def sample_batch(dataset, config, rng, stride=4):
    """make_batch followed by the stop-and-go augmentation draw."""
    batch = make_batch(dataset, config, rng, stride)
    if rng.random() < config.aug_fraction:
        if rng.random() < config.aug_stop_share:
            batch = augment_stop(batch, config.freeze_len)
        else:
            batch = augment_static_start(batch, config.freeze_len)
    return batch


# -- stage B -------------------------------------------------------------------


def train_step(params, batch, state, config, lr, groups=STAGE_B_GROUPS):
    """Forward, BCE, BPTT, clip, RMSProp on ``groups``. Returns ``(loss, params)``."""
    probs, _, cache = forward(batch.frames, batch.angle, params, batch.motion_override)
    loss, g_logits = bce_loss(probs, batch.gt)
    if not math.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss {loss} on video {batch.video!r} frames {batch.start}..{batch.start + batch.length - 1}"
            f" (augmentation={batch.augmentation}, lr={lr})"
        )
    grads = clip_gradients(backward(cache, params, g_logits, groups), config.clip_bound)
    named = rmsprop_update(params.named(), grads, state, lr, config.weight_decay)
    return loss, ModelParams.from_named(params.config, named)


def format_progress(iteration, loss, lr, **extra):
    tail = "".join(f" {k}={v:.6g}" for k, v in extra.items())
    return f"iter={iteration} loss={loss:.6g} lr={lr:.6g}{tail}"


def train(params, dataset, config, groups=STAGE_B_GROUPS, log=None, iterations=None):
    """Stage-B loop. Returns ``(params, history)`` with history ``[(iter, loss, lr)]``.

    Batches are drawn one step ahead on a worker thread; the draw order (and so
    the result) is the same as drawing them inline.
    """
    iterations = config.iterations if iterations is None else iterations
    rng = np.random.default_rng(config.rng_seed)
    state = OptimizerState.for_params(params.named(), config.rmsprop_rho, config.rmsprop_eps)
    per_epoch = config.epoch_iterations or len(dataset)
    stride = params.config.stride
    history = []
    if iterations == 0:
        return params, history
    with ThreadPoolExecutor(max_workers=1) as pool:
        pending = pool.submit(sample_batch, dataset, config, rng, stride)
        for it in range(iterations):
            batch = pending.result()
            if it + 1 < iterations:
                pending = pool.submit(sample_batch, dataset, config, rng, stride)
            lr = lr_schedule(it // per_epoch, config.learning_rate, config.lr_decay_per_epoch)
            loss, params = train_step(params, batch, state, config, lr, groups)
            history.append((it, loss, lr))
            if log is not None:
                log(format_progress(it, loss, lr))
    return params, history


# -- stage A -------------------------------------------------------------------


def independent_motion_mask(masks, flow, tol=1e-3):
    """Object pixels whose flow differs from the frame's dominant (median) flow.

    Target for the motion stub: objects inside a stop interval are masked out.
    """
    bg = np.median(flow.reshape(flow.shape[0], 2, -1), axis=2)[:, :, None, None]
    moving = np.sqrt(((flow - bg) ** 2).sum(axis=1, keepdims=True)) > tol
    return (masks > 0.5) & moving


@dataclass
class AuxHead:
    """1x1 classifier on appearance features, used only during stage A."""

    w: np.ndarray
    b: np.ndarray


def pretrain_step(params, aux, batch, state, config, lr):
    """One stage-A update of both stubs. Returns ``(app_loss, motion_loss, params, aux)``."""
    c = params.config
    s = c.stride
    dtype = params.head.w.dtype
    frames = batch.frames.astype(dtype)
    angle = compensate_camera(batch.angle.astype(dtype))
    grads, named = {}, params.named()
    app_loss = mot_loss = 0.0
    if c.appearance == "cnn":
        p = params.appearance
        hidden = tanh(conv2d(frames, p.w1, p.b1))
        app = tanh(conv2d(avg_pool(hidden, s), p.w2, p.b2))
        logits = conv2d(app, aux.w, aux.b, ConvSpec(1))
        app_loss, g_logits = bce_loss(channel_softmax2(logits), batch.gt)
        g_app, g_aw, g_ab = conv2d_backward(app, aux.w, ConvSpec(1), g_logits)
        g_pre = pointwise_backward("tanh", app, g_app)
        for k, v in appearance_backward(frames, hidden, p, s, g_pre).items():
            grads[f"appearance.{k}"] = v
        grads["aux.w"], grads["aux.b"] = g_aw, g_ab
        named["aux.w"], named["aux.b"] = aux.w, aux.b
    if c.motion == "stub":
        p = params.motion
        target = downsample_mask(independent_motion_mask(batch.masks, batch.flow).astype(dtype), s)
        hidden = tanh(conv2d(angle, p.w1, p.b1))
        m = sigmoid(conv2d(avg_pool(hidden, s), p.w2, p.b2))
        mc = np.clip(m.astype(np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
        mot_loss = float(-np.mean(target * np.log(mc) + (1 - target) * np.log(1 - mc)))
        g_pre = ((m - target) / m.size).astype(dtype)
        for k, v in motion_backward(angle, hidden, p, s, g_pre).items():
            grads[f"motion.{k}"] = v
    if not (math.isfinite(app_loss) and math.isfinite(mot_loss)):
        raise FloatingPointError(f"non-finite stage-A loss on video {batch.video!r}")
    if not grads:
        return app_loss, mot_loss, params, aux
    named = rmsprop_update(named, clip_gradients(grads, config.clip_bound), state, lr, config.weight_decay)
    aux = AuxHead(named.pop("aux.w", aux.w), named.pop("aux.b", aux.b))
    return app_loss, mot_loss, ModelParams.from_named(c, named), aux


def pretrain_stubs(params, dataset, config, log=None, iterations=None):
    """Stage A: fit the appearance and motion stubs on individual frames."""
    iterations = config.pretrain_iterations if iterations is None else iterations
    rng = np.random.default_rng(config.rng_seed + 1)
    c = params.config
    dtype = params.head.w.dtype
    aux = AuxHead(xavier_init((2, c.app_channels or 1, 1, 1), rng, dtype), np.zeros(2, dtype))
    state = OptimizerState(rho=config.rmsprop_rho, eps=config.rmsprop_eps)
    lr = config.pretrain_lr
    for it in range(iterations):
        batch = make_batch(dataset, config, rng, c.stride, length=min(config.pretrain_frames, dataset[0].length))
        a, m, params, aux = pretrain_step(params, aux, batch, state, config, lr)
        if log is not None:
            log(format_progress(it, a + m, lr, app_loss=a, motion_loss=m))
    return params


def transplant_stubs(params, source):
    """Copy the appearance and motion stubs of ``source`` into ``params``."""
    moved = {k: v for k, v in source.named().items() if k.split(".")[0] in ("appearance", "motion")}
    return params.with_named(moved)


def fit(model_config, dataset, config, log=None, dtype=np.float32, pretrained=None):
    """Full staged pipeline: init, stage A, then stage B. Returns ``(params, history)``.

    ``pretrained`` (a :class:`ModelParams` with the same stub layout) skips stage A.
    """
    params = init_params(model_config, np.random.default_rng(config.rng_seed), dtype)
    if pretrained is None:
        params = pretrain_stubs(params, dataset, config, log)
    else:
        params = transplant_stubs(params, pretrained)
    return train(params, dataset, config, STAGE_B_GROUPS, log)
