"""SVG figures: attention panels, confusion matrices and training curves.

Figures are built on the object-oriented matplotlib API (no pyplot state)
with a fixed hash salt and no date metadata, so identical inputs produce
identical bytes.
"""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure

from ._files import atomic_write
from .audio_io import AudioClip
from .dsp import MelSpectrogram
from .errors import CliError
from .model import AttentionTrace

ATTN_FLOOR = 1e-20

_RC = {
    "svg.hashsalt": "kwsattn",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "image.cmap": "magma",
}


def _svg_bytes(fig: Figure) -> bytes:
    buf = io.BytesIO()
    with matplotlib.rc_context(_RC):
        FigureCanvasSVG(fig).print_svg(buf, metadata={"Date": None})
    return buf.getvalue()


def _write(fig: Figure, path) -> Path:
    path = Path(path)
    try:
        atomic_write(path, _svg_bytes(fig))
    except OSError as exc:
        raise CliError(f"cannot write figure {path}: {exc}") from exc
    return path


def attention_figure(clip: AudioClip, mel: MelSpectrogram, trace: AttentionTrace,
                     title: str | None = None) -> Figure:
    n_frames = mel.values.shape[0]
    if len(trace.weights) != n_frames:
        raise CliError(f"trace has {len(trace.weights)} frames, spectrogram has {n_frames}")
    duration = clip.duration_s
    hop = mel.frame_hop_seconds

    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(7, 6))
        ax_wav, ax_mel, ax_att = fig.subplots(3, 1, sharex=True)

        t = np.arange(len(clip)) / clip.sample_rate_hz
        ax_wav.plot(t, clip.samples, lw=0.5, color="0.2")
        ax_wav.set_ylabel("amplitude")
        ax_wav.set_ylim(-1, 1)

        ax_mel.imshow(mel.values.T, origin="lower", aspect="auto",
                      extent=(0, n_frames * hop, 0, mel.values.shape[1]), interpolation="nearest")
        ax_mel.set_ylabel("mel band")

        weights = np.maximum(np.nan_to_num(trace.weights, nan=ATTN_FLOOR), ATTN_FLOOR)
        ax_att.plot(np.arange(n_frames) * hop, weights, color="tab:red", lw=1.2)
        ax_att.set_yscale("log")
        ax_att.set_ylabel("attention")
        ax_att.set_xlabel("time (s)")
        ax_att.axvline(trace.query_frame_index * hop, color="0.5", lw=0.6, ls="--")

        ax_att.set_xlim(0.0, duration)
        if title:
            ax_wav.set_title(title)
        fig.align_ylabels()
        fig.tight_layout()
    return fig


def render_attention_svg(clip: AudioClip, mel: MelSpectrogram, trace: AttentionTrace, path,
                         title: str | None = None) -> Path:
    """Waveform, mel heat strip and log-scale attention stacked on one time axis."""
    return _write(attention_figure(clip, mel, trace, title), path)


def render_confusion_svg(counts: np.ndarray, labels, path, title: str | None = None) -> Path:
    counts = np.asarray(counts)
    n = len(labels)
    with matplotlib.rc_context(_RC):
        size = max(4.0, 0.35 * n + 2)
        fig = Figure(figsize=(size, size))
        ax = fig.subplots()
        rows = counts.sum(axis=1, keepdims=True)
        frac = np.divide(counts, rows, out=np.zeros(counts.shape), where=rows > 0)
        ax.imshow(frac, cmap="Blues", vmin=0, vmax=1, interpolation="nearest")
        ax.set_xticks(range(n), labels, rotation=90)
        ax.set_yticks(range(n), labels)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        if n <= 15:
            for i in range(n):
                for j in range(n):
                    if counts[i, j]:
                        ax.text(j, i, str(int(counts[i, j])), ha="center", va="center", fontsize=7,
                                color="white" if frac[i, j] > 0.5 else "black")
        if title:
            ax.set_title(title)
        fig.tight_layout()
    return _write(fig, path)


def render_history_svg(history, path) -> Path:
    epochs = [h.epoch for h in history]
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(6, 3.5))
        ax = fig.subplots()
        ax.plot(epochs, [h.train_loss for h in history], marker="o", ms=3, label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax2 = ax.twinx()
        ax2.plot(epochs, [h.val_accuracy for h in history], color="tab:green", marker="s", ms=3,
                 label="val accuracy")
        ax2.set_ylabel("accuracy")
        ax2.set_ylim(0, 1.02)
        fig.tight_layout()
    return _write(fig, path)
