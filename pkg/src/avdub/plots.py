"""Deterministic SVG figures: offset-distance curves and loss curves."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .nn_core import TrainLog  # noqa: E402

# fixed ids and no timestamp so reruns give identical bytes
_RC = {"svg.hashsalt": "avs2s", "svg.fonttype": "none"}


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def plot_offset_curve(curve, path: str | Path, title: str = "",
                      max_offset: int | None = None) -> tuple[float, float]:
    """``D(o)`` against ``o``; the x-axis spans exactly ``[-max_offset, max_offset]``.

    Returns the x-limits actually drawn.
    """
    curve = np.asarray(curve, dtype=np.float64)
    m = (len(curve) - 1) // 2 if max_offset is None else max_offset
    offsets = np.arange(-m, m + 1)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(offsets, curve, marker="o", ms=3)
        k = int(np.nanargmin(curve))
        ax.axvline(offsets[k], color="grey", ls="--", lw=0.8)
        ax.set_xlim(-m, m)
        ax.set_xlabel("audio offset (frames)")
        ax.set_ylabel("mean embedding distance")
        ax.set_title(title)
        fig.tight_layout()
        xlim = ax.get_xlim()
        _save(fig, path)
    return xlim


def plot_loss_curve(train_log: TrainLog, path: str | Path, title: str = "") -> None:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(train_log.steps, train_log.losses, label="loss")
        for name, vals in train_log.extra.items():
            if np.all(np.isfinite(vals)):
                ax.plot(train_log.steps, vals, label=name, lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        _save(fig, path)
