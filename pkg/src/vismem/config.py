"""Run configuration files: ``key = value`` lines, ``#`` comments.

Every key belongs to one section (model, train, scene, run) and maps onto a
field of :class:`~vismem.model.ModelConfig`, :class:`~vismem.training.TrainConfig`,
:class:`~vismem.data.SceneSampler` or the inference settings below. Unknown keys
are errors. Defaults are the desk-scale settings used by the acceptance runs.
"""
from dataclasses import dataclass, field, fields

from .data import SceneSampler
from .model import ModelConfig, matched_stack_width
from .seqio import FormatError, format_key_values, parse_key_values
from .training import TrainConfig

DOCS = {
    # model
    "d_app": "appearance feature channels",
    "d_mid": "hidden channels inside each stub encoder",
    "d_h": "recurrent state channels",
    "kernel": "ConvGRU / ConvRNN / conv-stack kernel size (odd)",
    "stride": "spatial reduction of the prediction grid (power of two)",
    "bidirectional": "run forward and backward passes and fuse them",
    "cell": "memory cell: gru, rnn, or none (six-layer conv stack)",
    "appearance": "appearance stream: cnn, rgb (pooled frame) or none",
    "motion": "motion stream: stub or none (constant 0.5 channel)",
    "stack_width": "conv-stack width for cell=none; 0 picks the width matching the GRU parameter count",
    # train
    "learning_rate": "stage-B RMSProp learning rate at epoch 0",
    "lr_decay_per_epoch": "multiplicative learning-rate decay applied after every epoch",
    "weight_decay": "decoupled weight decay factor",
    "clip_bound": "gradients are clamped elementwise to [-clip_bound, clip_bound]",
    "batch_frames": "consecutive frames per batch (BPTT unroll length)",
    "iterations": "stage-B iterations",
    "aug_fraction": "fraction of batches given a stop-and-go augmentation",
    "aug_stop_share": "share of augmented batches that freeze the tail (the rest freeze the head)",
    "freeze_len": "frames frozen by each augmentation",
    "rmsprop_rho": "RMSProp decay of the squared-gradient average",
    "rmsprop_eps": "RMSProp epsilon",
    "crop": "square crop side for training batches; 0 disables cropping",
    "flip": "random horizontal flips",
    "epoch_iterations": "iterations per epoch; 0 means one per training video",
    "rng_seed": "seed for initialisation and batch sampling",
    "pretrain_iterations": "stage-A (stub pretraining) iterations",
    "pretrain_frames": "frames per stage-A batch",
    "pretrain_lr": "stage-A learning rate",
    # scene
    "height": "synthetic frame height",
    "width": "synthetic frame width",
    "frames": "synthetic video length",
    "min_objects": "minimum objects per scene",
    "max_objects": "maximum objects per scene",
    "min_size": "minimum object half-extent in pixels",
    "max_size": "maximum object half-extent in pixels",
    "min_speed": "minimum object speed, px/frame",
    "max_speed": "maximum object speed, px/frame",
    "distractor_prob": "probability that an extra object never moves",
    "camera_prob": "probability of a translating camera",
    "max_camera_speed": "maximum camera speed, px/frame",
    "stop_prob": "probability that a moving object has a stop interval (stop_mode=random)",
    "stop_mode": "random, tail (stop for the last stop_len frames) or head (first stop_len frames)",
    "stop_len": "stop length for tail/head modes",
    # run
    "window": "sliding-window length for inference",
    "step": "sliding-window step",
}

SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "scene": SceneSampler,
}


@dataclass
class InferSettings:
    window: int = 130
    step: int = 50


def _parse_value(raw, kind, key, source):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise FormatError(source, f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def _field_types(cls):
    defaults = cls()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(cls)}


def key_table():
    """``{key: (section, type)}`` for every accepted key."""
    table = {}
    for section, cls in list(SECTIONS.items()) + [("run", InferSettings)]:
        for name, kind in _field_types(cls).items():
            if name in table:
                raise RuntimeError(f"config key {name!r} appears in two sections")
            table[name] = (section, kind)
    return table


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=lambda: {"learning_rate": 1e-3})
    scene: dict = field(default_factory=dict)
    run: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, text, source="<config>"):
        table = key_table()
        cfg = cls()
        for key, raw in parse_key_values(text, source).items():
            if key not in table:
                raise FormatError(source, f"unknown key {key!r}")
            section, kind = table[key]
            getattr(cfg, section)[key] = _parse_value(raw, kind, key, source)
        cfg.validate(source)
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise FormatError(path, e.strerror or "cannot read") from None
        return cls.parse(text, path)

    def validate(self, source="<config>"):
        try:
            self.model_config()
            self.train_config()
            self.sampler()
            self.infer_settings()
        except (ValueError, TypeError) as e:
            raise FormatError(source, str(e)) from None

    def model_config(self):
        kw = dict(self.model)
        if kw.get("cell") == "none" and not kw.get("stack_width"):
            kw["stack_width"] = matched_stack_width(ModelConfig(**{**kw, "cell": "gru", "stack_width": 0}))
        return ModelConfig(**kw)

    def train_config(self):
        return TrainConfig(**self.train)

    def sampler(self):
        s = SceneSampler(**self.scene)
        if s.stop_mode not in ("random", "tail", "head"):
            raise ValueError(f"stop_mode must be random, tail or head, got {s.stop_mode!r}")
        return s

    def infer_settings(self):
        s = InferSettings(**self.run)
        if not s.window >= s.step >= 1:
            raise ValueError(f"need window >= step >= 1, got window={s.window} step={s.step}")
        return s

    def resolved(self):
        """Every key with its effective value, section by section."""
        out = {}
        for obj in (self.model_config(), self.train_config(), self.sampler(), self.infer_settings()):
            for f in fields(obj):
                out[f.name] = getattr(obj, f.name)
        return out

    def dump(self):
        """Commented config text listing every key; parses back to the same settings."""
        lines = []
        table = key_table()
        values = self.resolved()
        for section in ("model", "train", "scene", "run"):
            lines.append(f"# -- {section} --")
            for key, (sec, _) in table.items():
                if sec == section:
                    lines.append(f"# {DOCS[key]}")
                    lines.append(f"{key} = {_show(values[key])}")
            lines.append("")
        return "\n".join(lines)


def _show(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def model_echo(model_config):
    return format_key_values({k: _show(v) for k, v in model_config.echo().items()})


def model_config_from_echo(text, source="<checkpoint>"):
    """Rebuild a :class:`ModelConfig` from a checkpoint's config echo. Keys of
    other sections (training settings stored alongside) are ignored."""
    table = key_table()
    kw = {}
    for key, raw in parse_key_values(text, source).items():
        if key in table and table[key][0] == "model":
            kw[key] = _parse_value(raw, table[key][1], key, source)
    try:
        return ModelConfig(**kw)
    except (ValueError, TypeError) as e:
        raise FormatError(source, str(e)) from None
