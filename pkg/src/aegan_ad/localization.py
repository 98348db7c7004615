"""Pixel-level localization: reconstructed query vs. the training-set mean spectrogram."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np

from . import plotting
from .model import reconstruct


@dataclass
class MeanSpectrogram:
    values: np.ndarray
    source: str = ""
    sample_count: int = 0


@dataclass
class Heatmap:
    values: np.ndarray
    normalization: str = "raw"

    def normalized(self) -> "Heatmap":
        peak = self.values.max()
        return Heatmap(self.values / peak if peak > 0 else self.values.copy(), "unit_max")


def mean_spectrogram(segments, source: str = "", chunk: int = 256) -> MeanSpectrogram:
    """Streaming elementwise mean over (N, 128, 128) segments."""
    n = len(segments)
    if n == 0:
        raise ValueError("mean spectrogram of an empty training set")
    total = np.zeros(np.shape(segments[0]), dtype=np.float64)
    for i in range(0, n, chunk):
        total += np.asarray(segments[i : i + chunk], dtype=np.float64).sum(axis=0)
    return MeanSpectrogram(total / n, source, n)


def localize(generator, mean: MeanSpectrogram, query, residual: bool = False) -> list[Heatmap]:
    """Heatmap ``|reconstruct(query) - mean|`` per query segment.

    ``generator`` is a network or any callable mapping (N, 128, 128) arrays to
    reconstructions. With ``residual=True`` the diagnostic ``|query - reconstruct(query)|``
    is returned instead.
    """
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 2
    q = q[None] if single else q
    if q.shape[1:] != mean.values.shape:
        raise ValueError(f"query shape {q.shape[1:]} does not match mean {mean.values.shape}")
    recon = _reconstruct(generator, q)
    ref = q if residual else mean.values[None]
    return [Heatmap(np.abs(r - m)) for r, m in zip(recon, np.broadcast_to(ref, recon.shape))]


def _reconstruct(generator, q):
    if hasattr(generator, "encode"):
        return reconstruct(generator, q.astype(np.float32)).astype(np.float64)
    return np.asarray(generator(q), dtype=np.float64).reshape(q.shape)


def stitch(heatmaps, offsets, n_frames: int) -> Heatmap:
    """Average overlapping segment heatmaps into one clip-level map."""
    rows, width = heatmaps[0].values.shape
    acc = np.zeros((rows, max(n_frames, width)))
    cnt = np.zeros(acc.shape[1])
    for h, o in zip(heatmaps, offsets):
        acc[:, o : o + width] += h.values
        cnt[o : o + width] += 1
    return Heatmap((acc / np.maximum(cnt, 1))[:, :n_frames])


def render(heatmap: Heatmap, reconstruction, mean, out_path) -> tuple[Path, Path]:
    """Write a three-panel strip (reconstruction, mean, heatmap) as PNG and the raw heatmap as CSV.

    Each panel keeps one pixel per spectrogram bin, so a 128x128 segment
    renders as a (384, 128) image.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    mean_v = mean.values if isinstance(mean, MeanSpectrogram) else np.asarray(mean)
    hv = heatmap.values
    img = plotting.panel_strip(
        [reconstruction, mean_v, hv],
        [plotting.SPEC_CMAP, plotting.SPEC_CMAP, plotting.HEAT_CMAP],
        [(-1, 1), (-1, 1), (0, float(hv.max()))],
    )
    png = out_path.with_suffix(".png")
    plt.imsave(png, img, metadata={"Software": None})
    csv_path = out_path.with_suffix(".csv")
    np.savetxt(csv_path, hv, delimiter=",", fmt="%.9g")
    return png, csv_path


def render_figure(heatmap: Heatmap, reconstruction, mean, out_path, title: str = "") -> Path:
    """Annotated version of the same three panels, for reports."""
    mean_v = mean.values if isinstance(mean, MeanSpectrogram) else np.asarray(mean)
    fig, axes = plotting.new(3, 1, width=4, height=7.5, sharex=True)
    panels = [(reconstruction, "reconstructed query", plotting.SPEC_CMAP, (-1, 1)),
              (mean_v, "training mean", plotting.SPEC_CMAP, (-1, 1)),
              (heatmap.values, "|difference|", plotting.HEAT_CMAP, (0, None))]
    for ax, (m, label, cmap, (lo, hi)) in zip(axes, panels):
        im = ax.imshow(m, origin="lower", aspect="auto", cmap=cmap, vmin=lo, vmax=hi)
        ax.set_ylabel(f"{label}\nmel bin")
        fig.colorbar(im, ax=ax, fraction=0.04)
    axes[-1].set_xlabel("frame")
    if title:
        axes[0].set_title(title)
    return plotting.save(fig, Path(out_path))
