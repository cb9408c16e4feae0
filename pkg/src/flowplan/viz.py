"""Spectrogram heatmaps for run directories."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def save_heatmap(path, spectrogram, reference=None, title: str | None = None) -> Path:
    """Write a [T, C] spectrogram (and optionally a reference beside it) as a PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    panels = [np.asarray(spectrogram)] if reference is None else [np.asarray(reference), np.asarray(spectrogram)]
    names = ["generated"] if reference is None else ["reference", "generated"]
    vmax = max(float(p.max()) for p in panels) or 1.0
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 2.6), squeeze=False)
    for ax, panel, name in zip(axes[0], panels, names):
        ax.imshow(panel.T, aspect="auto", origin="lower", cmap="magma", vmin=0.0, vmax=vmax)
        ax.set_title(name if title is None else f"{title}: {name}", fontsize=8)
        ax.set_xlabel("frame", fontsize=7)
        ax.set_ylabel("channel", fontsize=7)
        ax.tick_params(labelsize=6)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path
