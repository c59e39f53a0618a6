"""Report figures written next to CLI outputs (PNG, Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import RocCurve  # noqa: E402

PathLike = Union[str, Path]

RC = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "image.interpolation": "nearest",
}


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_maps(maps: Mapping[str, np.ndarray], path: PathLike, title: Optional[str] = None) -> Path:
    """One panel per named map; integer maps get a qualitative colormap."""
    with plt.rc_context(RC):
        n = max(1, len(maps))
        fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.8), squeeze=False)
        for ax, (name, arr) in zip(axes[0], maps.items()):
            arr = np.asarray(arr)
            if arr.dtype.kind in "iub":
                im = ax.imshow(arr.astype(np.int64), cmap="tab10", vmin=0, vmax=9)
            else:
                im = ax.imshow(arr, cmap="viridis")
                fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
            ax.set_title(name)
            ax.set_xticks([])
            ax.set_yticks([])
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_roc(curves: Mapping[str, RocCurve], path: PathLike) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.4, 3.2))
        for name, c in curves.items():
            ax.plot(c.pf, c.pd, drawstyle="steps-post", label=name)
        ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
        ax.set_xlabel("false-alarm rate")
        ax.set_ylabel("detection rate")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        if curves:
            ax.legend(frameon=False, loc="lower right")
        fig.tight_layout()
        return _save(fig, path)


def plot_training(history: Sequence[Mapping[str, float]], path: PathLike) -> Path:
    """Loss terms per epoch from the training log records."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        epochs = [int(r["epoch"]) for r in history]
        for key in ("total", "dice", "focal", "score_mse"):
            if history and key in history[0]:
                ax.plot(epochs, [r[key] for r in history], marker="o", ms=2.5, label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_area_histogram(hist: Dict[str, list], path: PathLike) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        edges = np.asarray(hist.get("bin_edges", [1, 2]), dtype=float)
        counts = np.asarray(hist.get("counts", [0] * (len(edges) - 1)))
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="k", lw=0.5)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("mask area (pixels)")
        ax.set_ylabel("masks")
        fig.tight_layout()
        return _save(fig, path)


def plot_dictionary(anchors: Sequence[float], norms: Sequence[float], path: PathLike,
                    label: str = "entry norm") -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.6, 2.6))
        ax.stem(np.asarray(anchors, dtype=float), np.asarray(norms, dtype=float), basefmt=" ")
        ax.set_xlabel("wavelength (nm)")
        ax.set_ylabel(label)
        fig.tight_layout()
        return _save(fig, path)
