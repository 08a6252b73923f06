"""Synthetic moving-shapes videos with exact flow and moving-object masks.

Scenes are analytic: the background and every object carry a smooth sinusoidal
texture, so translating them by a sub-pixel amount is exact and the generated
flow is the true per-pixel displacement. An object's mask is on in every frame
if the object moves on its own in at least one frame; objects that only follow
the camera are background.
"""
import colorsys
from dataclasses import dataclass, replace

import numpy as np

from .tensor import avg_pool


@dataclass
class VideoSample:
    frames: np.ndarray  # [T,3,H,W] in [0,1]
    flow: np.ndarray  # [T,2,H,W] (dx, dy) px/frame; flow[t] maps t -> t+1
    masks: np.ndarray  # [T,1,H,W] in {0,1}
    name: str = "video"

    def __post_init__(self):
        T, c, H, W = self.frames.shape
        if c != 3:
            raise ValueError(f"frames must have 3 channels, got {c}")
        if self.flow.shape != (T, 2, H, W):
            raise ValueError(f"flow shape {self.flow.shape} does not match frames {(T, 2, H, W)}")
        if self.masks.shape != (T, 1, H, W):
            raise ValueError(f"mask shape {self.masks.shape} does not match frames {(T, 1, H, W)}")
        if not np.isin(self.masks, (0, 1)).all():
            raise ValueError("masks must be binary")
        if not np.isfinite(self.flow).all():
            raise ValueError("flow contains non-finite values")

    @property
    def length(self):
        return self.frames.shape[0]

    @property
    def size(self):
        return self.frames.shape[2:]

    def clip(self, start, stop):
        return VideoSample(
            self.frames[start:stop], self.flow[start:stop], self.masks[start:stop], self.name
        )


@dataclass(frozen=True)
class ObjectSpec:
    shape: str  # "disk" or "rectangle"
    size: tuple  # half extents (sx, sy); a disk uses sx as radius
    position: tuple  # centre (x, y) at frame 0
    velocity: tuple = (0.0, 0.0)  # own motion, px/frame, on top of the camera
    stop_interval: tuple = None  # inclusive (t_a, t_b) of steps with zero own motion
    color: tuple = (1.0, 0.2, 0.2)
    texture_seed: int = 0

    def own_velocity(self, t):
        if self.stop_interval is not None and self.stop_interval[0] <= t <= self.stop_interval[1]:
            return (0.0, 0.0)
        return tuple(self.velocity)


@dataclass(frozen=True)
class SynthConfig:
    height: int = 64
    width: int = 64
    frames: int = 24
    objects: tuple = ()
    camera_velocity: tuple = (0.0, 0.0)
    texture_seed: int = 0
    name: str = "synth"


def _texture(seed, channels, base, amp, n_waves=4, min_period=8.0, max_period=32.0):
    """Return f(x, y) -> [channels, ...] smooth texture with fixed random waves."""
    rng = np.random.default_rng(seed)
    periods = rng.uniform(min_period, max_period, n_waves)
    angles = rng.uniform(0, 2 * np.pi, n_waves)
    kx = 2 * np.pi * np.cos(angles) / periods
    ky = 2 * np.pi * np.sin(angles) / periods
    phases = rng.uniform(0, 2 * np.pi, (channels, n_waves))
    weights = rng.uniform(0.5, 1.0, (channels, n_waves))
    weights /= weights.sum(axis=1, keepdims=True)
    base = np.asarray(base, dtype=np.float64).reshape(channels, 1, 1)

    def f(x, y):
        acc = np.zeros((channels,) + x.shape)
        for k in range(n_waves):
            arg = kx[k] * x + ky[k] * y
            acc += weights[:, k, None, None] * np.sin(arg[None] + phases[:, k, None, None])
        return base + amp * acc

    return f


def _inside(obj, x, y, cx, cy):
    sx, sy = obj.size
    if obj.shape == "disk":
        return (x - cx) ** 2 + (y - cy) ** 2 <= sx * sx
    if obj.shape == "rectangle":
        return (np.abs(x - cx) <= sx) & (np.abs(y - cy) <= sy)
    raise ValueError(f"unknown object shape {obj.shape!r}")


def _extent(obj):
    sx, sy = obj.size
    return (sx, sx) if obj.shape == "disk" else (sx, sy)


def trajectories(cfg):
    """Object centres per frame, ``[n_objects, T, 2]``."""
    T = cfg.frames
    cam = np.asarray(cfg.camera_velocity, dtype=np.float64)
    out = np.zeros((len(cfg.objects), T, 2))
    for i, obj in enumerate(cfg.objects):
        pos = np.asarray(obj.position, dtype=np.float64)
        for t in range(T):
            out[i, t] = pos
            pos = pos + cam + np.asarray(obj.own_velocity(t))
    return out


def moving_objects(cfg):
    """Indices of objects with nonzero own velocity in at least one step 0..T-2."""
    idx = []
    for i, obj in enumerate(cfg.objects):
        if any(np.any(np.asarray(obj.own_velocity(t)) != 0) for t in range(cfg.frames - 1)):
            idx.append(i)
    return idx


def validate_config(cfg):
    if cfg.height < 4 or cfg.width < 4 or cfg.frames < 1:
        raise ValueError(f"invalid synth size {cfg.height}x{cfg.width}x{cfg.frames}")
    traj = trajectories(cfg)
    for i, obj in enumerate(cfg.objects):
        ex, ey = _extent(obj)
        xs, ys = traj[i, :, 0], traj[i, :, 1]
        if (xs - ex).min() < 1 or (xs + ex).max() > cfg.width - 2 or (ys - ey).min() < 1 or (
            ys + ey
        ).max() > cfg.height - 2:
            raise ValueError(f"object {i} leaves the frame (must stay >= 1 px inside)")
        if obj.stop_interval is not None:
            a, b = obj.stop_interval
            if not (0 <= a <= b < cfg.frames):
                raise ValueError(f"object {i} stop interval {obj.stop_interval} outside [0, {cfg.frames})")


def generate_video(cfg):
    """Render a :class:`SynthConfig` into frames, forward flow and masks."""
    validate_config(cfg)
    T, H, W = cfg.frames, cfg.height, cfg.width
    cam = np.asarray(cfg.camera_velocity, dtype=np.float64)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    bg = _texture(cfg.texture_seed, 3, base=_bg_base(cfg.texture_seed), amp=0.18)
    obj_tex = [_texture(o.texture_seed, 1, base=0.85, amp=0.15) for o in cfg.objects]
    traj = trajectories(cfg)
    moving = set(moving_objects(cfg))

    frames = np.zeros((T, 3, H, W), dtype=np.float32)
    flow = np.zeros((T, 2, H, W), dtype=np.float32)
    masks = np.zeros((T, 1, H, W), dtype=np.float32)
    for t in range(T):
        img = bg(xx - t * cam[0], yy - t * cam[1])
        fl = np.broadcast_to(cam[:, None, None], (2, H, W)).copy()
        mk = np.zeros((H, W), dtype=bool)
        for i, obj in enumerate(cfg.objects):
            cx, cy = traj[i, t]
            inside = _inside(obj, xx, yy, cx, cy)
            shade = obj_tex[i](xx - cx, yy - cy)[0]
            for c in range(3):
                img[c][inside] = obj.color[c] * shade[inside]
            step = cam + np.asarray(obj.own_velocity(t))
            fl[0][inside] = step[0]
            fl[1][inside] = step[1]
            mk[inside] = i in moving
        frames[t] = np.clip(img, 0.0, 1.0)
        flow[t] = fl
        masks[t, 0] = mk
    if T >= 2:
        flow[T - 1] = flow[T - 2]
    else:
        flow[:] = 0.0
    return VideoSample(frames, flow, masks, cfg.name)


def _bg_base(seed):
    rng = np.random.default_rng([seed, 7])
    gray = rng.uniform(0.3, 0.55)
    return gray + rng.uniform(-0.06, 0.06, 3)


def flow_to_angle(flow, eps=1e-6):
    """Flow ``[...,2,H,W]`` -> ``(sin, cos)`` of its direction; zero flow gives (0, 0)."""
    dx, dy = flow[..., 0, :, :], flow[..., 1, :, :]
    mag = np.sqrt(dx * dx + dy * dy)
    moving = mag > eps
    safe = np.where(moving, mag, 1.0)
    s = np.where(moving, dy / safe, 0.0)
    c = np.where(moving, dx / safe, 0.0)
    return np.stack([s, c], axis=-3).astype(flow.dtype)


def downsample_mask(masks, factor):
    """Majority-vote a binary mask ``[...,H,W]`` onto the stride-``factor`` grid."""
    if factor == 1:
        return masks.astype(np.float32)
    return (avg_pool(masks.astype(np.float32), factor) >= 0.5).astype(np.float32)


def upsample_nearest(x, factor):
    return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)


# -- random scene sampling ---------------------------------------------------


@dataclass
class SceneSampler:
    """Distribution over :class:`SynthConfig` used to build datasets."""

    height: int = 64
    width: int = 64
    frames: int = 24
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 6.0
    max_size: float = 10.0
    min_speed: float = 0.6
    max_speed: float = 1.5
    distractor_prob: float = 0.3
    camera_prob: float = 0.0
    max_camera_speed: float = 0.5
    stop_prob: float = 0.3
    stop_mode: str = "random"  # random | tail | head
    stop_len: int = 8

    def sample(self, rng, name="synth"):
        for _ in range(200):
            cfg = self._try(rng, name)
            if cfg is not None:
                return cfg
        raise RuntimeError("could not place objects inside the frame; relax the sampler ranges")

    def _stop(self, rng):
        T = self.frames
        n = min(self.stop_len, T - 1)
        if self.stop_mode == "tail":
            return (T - n, T - 1) if n > 0 else None
        if self.stop_mode == "head":
            return (0, n - 1) if n > 0 else None
        if rng.random() < self.stop_prob:
            length = int(rng.integers(3, max(4, T // 2)))
            a = int(rng.integers(0, max(1, T - length)))
            return (a, min(T - 1, a + length - 1))
        return None

    def _try(self, rng, name):
        T, H, W = self.frames, self.height, self.width
        cam = (0.0, 0.0)
        if rng.random() < self.camera_prob:
            ang = rng.uniform(0, 2 * np.pi)
            sp = rng.uniform(0.2, self.max_camera_speed)
            cam = (sp * np.cos(ang), sp * np.sin(ang))
        n = int(rng.integers(self.min_objects, self.max_objects + 1))
        objects = []
        for i in range(n):
            shape = "disk" if rng.random() < 0.5 else "rectangle"
            sx = rng.uniform(self.min_size, self.max_size)
            sy = sx if shape == "disk" else rng.uniform(self.min_size, self.max_size)
            distractor = i > 0 and rng.random() < self.distractor_prob
            if distractor:
                vel, stop = (0.0, 0.0), None
            else:
                ang = rng.uniform(0, 2 * np.pi)
                sp = rng.uniform(self.min_speed, self.max_speed)
                vel = (sp * np.cos(ang), sp * np.sin(ang))
                stop = self._stop(rng)
            hue = rng.random()
            color = colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.75, 1.0))
            obj = ObjectSpec(shape, (sx, sy), (0.0, 0.0), vel, stop, color, int(rng.integers(1 << 30)))
            obj = self._place(obj, cam, rng)
            if obj is None:
                return None
            objects.append(obj)
        cfg = SynthConfig(H, W, T, tuple(objects), cam, int(rng.integers(1 << 30)), name)
        validate_config(cfg)
        return cfg

    def _place(self, obj, cam, rng):
        T, H, W = self.frames, self.height, self.width
        ex, ey = _extent(obj)
        for _ in range(6):
            probe = SynthConfig(H, W, T, (obj,), cam)
            path = trajectories(probe)[0]
            lo_x, hi_x = 1 + ex - path[:, 0].min(), W - 2 - ex - path[:, 0].max()
            lo_y, hi_y = 1 + ey - path[:, 1].min(), H - 2 - ey - path[:, 1].max()
            if lo_x <= hi_x and lo_y <= hi_y:
                return replace(obj, position=(rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)))
            obj = replace(obj, velocity=(obj.velocity[0] * 0.7, obj.velocity[1] * 0.7))
        return None


def make_dataset(sampler, count, seed, prefix="seq"):
    rng = np.random.default_rng(seed)
    return [generate_video(sampler.sample(rng, f"{prefix}_{i:04d}")) for i in range(count)]


# -- sliding-window inference -----------------------------------------------


def window_starts(T, window, step):
    if not (window >= step >= 1):
        raise ValueError(f"need window >= step >= 1, got window={window} step={step}")
    if T <= window:
        return [0]
    starts = list(range(0, T - window + 1, step))
    if starts[-1] != T - window:
        starts.append(T - window)
    return starts


def sliding_window_probs(params, sample, window=130, step=50, infer=None):
    """Object/background probabilities ``[T,2,h,w]``, averaged where windows overlap."""
    from .model import forward_video

    infer = infer or (lambda clip: forward_video(clip, params)[0])
    T = sample.length
    starts = window_starts(T, window, step)
    if len(starts) == 1:
        return infer(sample)
    total = None
    counts = np.zeros(T)
    for s in starts:
        probs = infer(sample.clip(s, s + window))
        if total is None:
            total = np.zeros((T,) + probs.shape[1:], dtype=np.float64)
        total[s : s + window] += probs
        counts[s : s + window] += 1
    return (total / counts[:, None, None, None]).astype(np.float32)


def sliding_window_infer(params, sample, window=130, step=50, infer=None):
    """Binary masks ``[T,h,w]`` from :func:`sliding_window_probs`."""
    return sliding_window_probs(params, sample, window, step, infer)[:, 1] > 0.5
