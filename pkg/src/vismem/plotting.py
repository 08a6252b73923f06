"""Matplotlib figures written next to the text outputs (PNG, Agg backend)."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .visualize import gate_signal, overlay_mask  # noqa: E402

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def figsize(width=6.0, ratio=GOLDEN):
    return (width, width * ratio)


def _save(fig, path):
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_curve(history, path, smooth=25):
    """``history`` is ``[(iter, loss, lr), ...]`` as returned by ``train``."""
    with plt.rc_context(STYLE):
        its = np.array([h[0] for h in history])
        loss = np.array([h[1] for h in history])
        lr = np.array([h[2] for h in history])
        fig, ax = plt.subplots(figsize=figsize())
        ax.plot(its, loss, color="0.75", lw=0.6, label="loss")
        if len(loss) >= smooth > 1:
            k = np.ones(smooth) / smooth
            ax.plot(its[smooth - 1 :], np.convolve(loss, k, mode="valid"), color="C0", lw=1.2,
                    label=f"running mean ({smooth})")
        ax.set_xlabel("iteration")
        ax.set_ylabel("cross-entropy")
        ax.set_yscale("log")
        ax2 = ax.twinx()
        ax2.plot(its, lr, color="C3", lw=0.8, ls="--", drawstyle="steps-post")
        ax2.set_ylabel("learning rate", color="C3")
        ax.legend(loc="upper right", frameon=False)
        return _save(fig, path)


def plot_eval_report(reports, path):
    """Per-frame IoU of every sequence plus per-sequence J and F bars."""
    with plt.rc_context(STYLE):
        fig, (a0, a1) = plt.subplots(1, 2, figsize=figsize(9.0, 0.4), gridspec_kw={"width_ratios": [3, 2]})
        for r in reports:
            a0.plot([s.frame for s in r.frames], [s.iou for s in r.frames], lw=0.8, alpha=0.7)
        a0.set_ylim(-0.02, 1.02)
        a0.set_xlabel("frame")
        a0.set_ylabel("IoU")
        a0.set_title("per-frame region similarity")
        x = np.arange(len(reports))
        a1.bar(x - 0.2, [r.j_mean for r in reports], 0.4, label="J mean")
        a1.bar(x + 0.2, [r.f_mean for r in reports], 0.4, label="F mean")
        a1.set_xticks(x)
        a1.set_xticklabels([r.name for r in reports], rotation=60, ha="right")
        a1.set_ylim(0, 1.05)
        a1.legend(frameon=False, ncol=2, loc="lower right")
        return _save(fig, path)


def plot_gate_panel(records, channel, path, frames=None, masks=None, signals=("r", "1mz")):
    """Columns are time steps. Rows are the frame (with a mask overlay when
    ``masks`` is given; omitted without ``frames``), then each gate signal of one
    channel on a fixed 0..1 grey scale."""
    T = len(records)
    labels = (("frame",) if frames is not None else ()) + tuple(signals)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(labels), T, figsize=(1.1 * T, 1.15 * len(labels)), squeeze=False)
        for t in range(T):
            row = 0
            if frames is not None:
                img = frames[t] if masks is None else overlay_mask(frames[t], masks[t])
                if img.dtype != np.uint8:
                    img = np.moveaxis(img, 0, -1)
                axes[0, t].imshow(img, interpolation="nearest")
                row = 1
            axes[0, t].set_title(f"t={t}")
            for i, sig in enumerate(signals, row):
                axes[i, t].imshow(gate_signal(records[t], sig)[channel], cmap="gray", vmin=0, vmax=1,
                                  interpolation="nearest")
        for i, sig in enumerate(labels):
            axes[i, 0].set_ylabel({"1mz": "1 - z"}.get(sig, sig))
        for ax in axes.flat:
            ax.set_xticks([])
            ax.set_yticks([])
        return _save(fig, path)
