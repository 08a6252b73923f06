"""``vismem`` command line: data generation, training, inference, evaluation, figures.

Every failure exits nonzero with exactly one line on stderr::

    error=<ExceptionType> message=<text>
"""
import argparse
import os
import sys
import time

import numpy as np

from . import checkpoint
from .config import RunConfig, model_config_from_echo, model_echo
from .data import make_dataset, sliding_window_probs, upsample_nearest
from .metrics import evaluate_sequence, format_records, format_table
from .model import ModelParams, forward_video, matched_stack_width, memory_param_count
from .seqio import (
    FormatError,
    format_key_values,
    load_dataset,
    load_sequence,
    read_manifest,
    read_mask_dir,
    save_sequence,
    write_manifest,
    write_mask_dir,
)
from .training import STAGE_B_GROUPS, fit, init_params, pretrain_stubs, train, transplant_stubs

VARIANTS = {
    "no-app": dict(appearance="none"),
    "rgb": dict(appearance="rgb"),
    "no-motion": dict(motion="none"),
    "no-memory": dict(cell="none"),
    "unidir": dict(bidirectional=False),
    "convrnn": dict(cell="rnn"),
}

ABLATE_HELP = """Train one ablation of the full model; exactly one element changes:

  no-app     no appearance stream (memory sees only the motion channel)
  rgb        pooled RGB frame in place of the appearance encoder
  no-motion  constant 0.5 motion channel in place of the motion encoder
  no-memory  ConvGRU replaced by six 'same' convolutions with tanh,
             applied per frame (no recurrence, no bidirectional fuse)
  unidir     forward pass only, no fuse layer
  convrnn    plain convolutional RNN cell instead of the ConvGRU

Parameter matching for no-memory: the stack width w is the integer whose
six-layer parameter count is closest to the ConvGRU cell plus fuse layer of the
same configuration. The audit line reports both counts; the run aborts if they
differ by more than 5%.
"""


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"usage: {message}")


def _emit(line):
    print(line, flush=True)


def _run_config(path):
    return RunConfig.load(path) if path else RunConfig()


def _save_params(path, params, run):
    echo = model_echo(params.config) + format_key_values(run.train_config().echo())
    checkpoint.save(path, params.named(), echo)


def load_params(path):
    text, tensors = checkpoint.load(path)
    mc = model_config_from_echo(text, path)
    return ModelParams.from_named(mc, tensors)


def _dataset(root):
    data = load_dataset(root)
    if not data:
        raise CliError(f"{root}: manifest lists no sequences")
    return data


# -- subcommands ---------------------------------------------------------------


def cmd_gen_data(args):
    run = _run_config(args.config)
    if args.count < 0:
        raise CliError("--count must be >= 0")
    os.makedirs(args.out, exist_ok=True)
    videos = make_dataset(run.sampler(), args.count, args.seed, prefix=args.prefix)
    for v in videos:
        save_sequence(v, os.path.join(args.out, v.name))
    write_manifest(args.out, [v.name for v in videos])
    _emit(f"sequences={len(videos)} out={args.out}")


def cmd_config(args):
    sys.stdout.write(_run_config(args.config).dump())


def cmd_pretrain(args):
    run = _run_config(args.config)
    mc, tc = run.model_config(), run.train_config()
    data = _dataset(args.data)
    params = init_params(mc, np.random.default_rng(tc.rng_seed))
    params = pretrain_stubs(params, data, tc, log=_emit)
    _save_params(args.out, params, run)
    _emit(f"saved={args.out}")


def cmd_train(args):
    run = _run_config(args.config)
    tc = run.train_config()
    data = _dataset(args.data)
    params = load_params(args.init)
    if params.config != run.model_config():
        # the checkpoint decides the architecture; the config only supplies training settings
        _emit("note=model settings taken from the --init checkpoint")
    params, history = train(params, data, tc, STAGE_B_GROUPS, log=_emit)
    _save_params(args.out, params, run)
    _emit(f"saved={args.out}")
    if history and not args.no_plot:
        from .plotting import plot_loss_curve

        _emit(f"figure={plot_loss_curve(history, args.out + '.loss.png')}")


def cmd_infer(args):
    params = load_params(args.ckpt)
    run = _run_config(args.config)
    window = args.window or run.infer_settings().window
    step = args.step or run.infer_settings().step
    video = load_sequence(args.seq)
    t0 = time.perf_counter()
    probs = sliding_window_probs(params, video, window, step)
    elapsed = time.perf_counter() - t0
    masks = probs[:, 1] > 0.5
    write_mask_dir(args.out, masks, video.name)
    np.save(os.path.join(args.out, "probs.npy"), probs[:, 1])
    if args.overlays:
        from .visualize import write_overlays

        write_overlays(video.frames, masks, args.out)
    if args.record_gates:
        from .visualize import save_gate_records

        if video.length > window:
            raise CliError(f"--record-gates needs the whole video in one window (T={video.length} > window={window})")
        _, records = forward_video(video, params, record_gates=True)
        if records is None:
            raise CliError("this model has no recurrent gates to record")
        save_gate_records(records, args.out)
    _emit(f"frames={video.length} window={window} step={step} seconds={elapsed:.3f} out={args.out}")


def _sequence_pairs(pred_root, gt_root):
    """(pred_dir, gt_dir) pairs; roots with a manifest are matched by name."""
    if os.path.exists(os.path.join(gt_root, "meta.txt")):
        return [(pred_root, gt_root)]
    return [(os.path.join(pred_root, n), os.path.join(gt_root, n)) for n in read_manifest(gt_root)]


def cmd_eval(args):
    reports = []
    frames = None
    if args.frames:
        try:
            a, b = (int(x) for x in args.frames.split(":"))
        except ValueError:
            raise CliError(f"--frames must look like a:b, got {args.frames!r}") from None
        frames = range(a, b)
    for pdir, gdir in _sequence_pairs(args.pred, args.gt):
        pred, _ = read_mask_dir(pdir)
        gt, name = read_mask_dir(gdir)
        if pred.shape[0] != gt.shape[0]:
            raise FormatError(pdir, f"{pred.shape[0]} predicted frames, ground truth has {gt.shape[0]}")
        if pred.shape[1:] != gt.shape[1:]:
            # grid-resolution predictions are scored at ground-truth resolution
            f = gt.shape[1] // pred.shape[1]
            if f < 1 or pred.shape[1] * f != gt.shape[1] or pred.shape[2] * f != gt.shape[2]:
                raise FormatError(pdir, f"mask size {pred.shape[1:]} does not divide {gt.shape[1:]}")
            pred = upsample_nearest(pred, f)
        reports.append(evaluate_sequence(pred, gt, name, frames=frames))
    table = format_table(reports)
    records = format_records(reports)
    with open(args.report, "w") as f:
        f.write(table)
        f.write("\n")
        f.write(records)
    sys.stdout.write(table)
    _emit(records.splitlines()[-1])
    if not args.no_plot:
        from .plotting import plot_eval_report

        _emit(f"figure={plot_eval_report(reports, os.path.splitext(args.report)[0] + '.png')}")


def cmd_vis_gates(args):
    from .visualize import HeatmapSpec, load_gate_records, render_gates

    records = load_gate_records(args.records)
    try:
        channels = tuple(int(c) for c in args.channels.split(",") if c.strip())
    except ValueError:
        raise CliError(f"--channels must be a comma-separated list of integers, got {args.channels!r}") from None
    spec = HeatmapSpec(channels, tuple(args.signals.split(",")), args.scale, args.direction)
    paths = render_gates(records, spec, args.out)
    _emit(f"images={len(paths)} out={args.out}")
    if not args.no_plot:
        from .plotting import plot_gate_panel

        frames = masks = None
        if args.seq:
            video = load_sequence(args.seq)
            frames = video.frames
            if os.path.exists(os.path.join(args.records, "meta.txt")):
                masks, _ = read_mask_dir(args.records)
        for c in channels:
            path = os.path.join(args.out, f"panel_c{c}.png")
            plot_gate_panel(records[spec.direction], c, path, frames, masks, spec.signals)
            _emit(f"figure={path}")


def ablation_config(base, variant):
    if variant not in VARIANTS:
        raise CliError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    kw = {**base.echo(), **VARIANTS[variant]}
    if variant == "no-memory":
        kw["stack_width"] = matched_stack_width(base)
    return type(base)(**kw)


def cmd_ablate(args):
    run = _run_config(args.config)
    base = run.model_config()
    mc = ablation_config(base, args.variant)
    tc = run.train_config()
    if args.variant == "no-memory":
        ref, got = memory_param_count(base), memory_param_count(mc)
        _emit(f"audit=memory_params reference={ref} variant={got} width={mc.stack_width} "
              f"rel_diff={abs(got - ref) / ref:.4f}")
        if abs(got - ref) > 0.05 * ref:
            raise CliError(f"parameter match failed: {got} vs {ref}")
    _emit(f"variant={args.variant} trainable={ModelParams.zeros(mc).count()}")
    data = _dataset(args.data)
    pretrained = None
    if args.init:
        src = load_params(args.init)
        pretrained = init_params(mc, np.random.default_rng(tc.rng_seed))
        pretrained = transplant_stubs(pretrained, src) if _stubs_match(pretrained, src) else None
        if pretrained is None:
            raise CliError("--init checkpoint stubs do not match this variant")
    params, _ = fit(mc, data, tc, log=_emit, pretrained=pretrained)
    _save_params(args.out, params, run)
    _emit(f"saved={args.out}")


def _stubs_match(a, b):
    na, nb = a.named(), b.named()
    keys = [k for k in na if k.split(".")[0] in ("appearance", "motion")]
    return all(k in nb and nb[k].shape == na[k].shape for k in keys)


# -- entry point -----------------------------------------------------------------


def build_parser():
    p = _Parser(prog="vismem", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="write synthetic sequences and a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--prefix", default="seq")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("config", help="print every config key with its default and meaning")
    s.add_argument("--config", help="show the effective values of this file instead")
    s.set_defaults(func=cmd_config)

    s = sub.add_parser("pretrain", help="stage A: fit the appearance and motion stubs")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="stage B: train memory, fuse and head with BPTT")
    s.add_argument("--data", required=True)
    s.add_argument("--init", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="segment one sequence with sliding windows")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--seq", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--window", type=int)
    s.add_argument("--step", type=int)
    s.add_argument("--config")
    s.add_argument("--record-gates", action="store_true")
    s.add_argument("--overlays", action="store_true")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score predicted masks against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--frames", help="restrict to frames a:b (half-open)")
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("vis-gates", help="render recorded gate activations")
    s.add_argument("--records", required=True)
    s.add_argument("--channels", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--signals", default="r,1mz")
    s.add_argument("--scale", type=int, default=1)
    s.add_argument("--direction", default="forward")
    s.add_argument("--seq", help="sequence directory, adds a frame row to the panel figure")
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_vis_gates)

    s = sub.add_parser("ablate", help="train an ablation variant", description=ABLATE_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--variant", required=True, choices=sorted(VARIANTS))
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--init", help="checkpoint whose pretrained stubs are reused (skips stage A)")
    s.add_argument("--config")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except SystemExit as e:  # --help
        return e.code or 0
    except Exception as e:  # noqa: BLE001 - every failure becomes one line
        msg = " ".join(str(e).split()) or repr(e)
        print(f"error={type(e).__name__} message={msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
