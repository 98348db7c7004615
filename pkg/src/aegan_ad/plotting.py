"""Shared matplotlib setup for every figure the package writes to disk."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "aegan-ad",
}
SPEC_CMAP = "magma"
HEAT_CMAP = "inferno"


def new(nrows=1, ncols=1, width=6.0, height=3.5, **kw):
    with plt.rc_context(RC):
        return plt.subplots(nrows, ncols, figsize=(width, height), **kw)


def save(fig, path):
    with plt.rc_context(RC):
        fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def panel_strip(panels, cmaps, limits) -> np.ndarray:
    """Stack same-sized matrices vertically as one RGBA image, low frequencies at the bottom."""
    rgba = []
    for m, cmap, (lo, hi) in zip(panels, cmaps, limits):
        m = np.asarray(m, dtype=np.float64)
        span = hi - lo if hi > lo else 1.0
        rgba.append(matplotlib.colormaps[cmap](np.clip((m - lo) / span, 0, 1))[::-1])
    return np.concatenate(rgba, axis=0)


def loss_curves(epoch_rows, path):
    fig, axes = new(1, 2, width=8, height=3)
    ep = [r["epoch"] for r in epoch_rows]
    axes[0].plot(ep, [r["critic_loss"] for r in epoch_rows], label="critic")
    axes[0].plot(ep, [r["gp"] for r in epoch_rows], label="gradient penalty")
    axes[0].set_xlabel("epoch")
    axes[0].legend(frameon=False)
    axes[1].plot(ep, [r["fm"] for r in epoch_rows], label="feature matching")
    axes[1].plot(ep, [r["mse"] for r in epoch_rows], label="mse")
    axes[1].set_yscale("log")
    axes[1].set_xlabel("epoch")
    axes[1].legend(frameon=False)
    return save(fig, path)


def report_bars(report, path):
    """Per machine: source/target AUC and pAUC per section, as grouped bars."""
    labels, values, colors = [], [], []
    palette = {"source": "#4c72b0", "target": "#dd8452", "pauc": "#55a868"}
    for m in report.machines:
        for (sec, dom), v in m.auc.items():
            labels.append(f"{m.machine}\ns{sec:02d} {dom[:3]}")
            values.append(100 * v)
            colors.append(palette.get(dom, "grey"))
        for sec, v in m.pauc.items():
            labels.append(f"{m.machine}\ns{sec:02d} pAUC")
            values.append(100 * v)
            colors.append(palette["pauc"])
    fig, ax = new(width=max(4.0, 0.55 * len(values) + 1), height=3.2)
    ax.bar(range(len(values)), values, color=colors)
    ax.axhline(100 * report.overall, color="k", lw=0.8, ls="--", label=f"overall hmean {100 * report.overall:.2f}")
    ax.set_xticks(range(len(values)), labels, rotation=90)
    ax.set_ylim(0, 100)
    ax.set_ylabel("%")
    ax.legend(frameon=False, loc="lower right")
    return save(fig, path)


def roc_figure(curves, path):
    """``curves`` maps a label to (fpr, tpr)."""
    fig, ax = new(width=3.6, height=3.4)
    for name, (fpr, tpr) in curves.items():
        ax.plot(fpr, tpr, drawstyle="default", label=name)
    ax.plot([0, 1], [0, 1], color="grey", lw=0.6, ls=":")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(frameon=False, fontsize=6)
    return save(fig, path)
