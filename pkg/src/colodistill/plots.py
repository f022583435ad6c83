"""Deterministic SVG figures; every plot is paired with the CSV it was drawn from."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .biopsy import CurveRow  # noqa: E402

_RC = {"svg.hashsalt": "colodistill", "svg.fonttype": "none", "figure.figsize": (4.5, 4.0), "font.size": 9}


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None}, bbox_inches="tight")
    plt.close(fig)


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def roc_figure(out_svg: str | Path, curves: Mapping[str, tuple[np.ndarray, np.ndarray, float]], title: str) -> None:
    """``curves``: name -> (fpr, tpr, auc)."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for name in sorted(curves):
            fpr, tpr, auc = curves[name]
            ax.plot(fpr, tpr, label=f"{name} (AUC={auc:.3f})")
        ax.plot([0, 1], [0, 1], ls=":", c="grey", lw=0.8)
        ax.set(xlabel="1 - specificity", ylabel="sensitivity", xlim=(0, 1), ylim=(0, 1.01), title=title)
        ax.legend(loc="lower right")
        _save(fig, Path(out_svg))


def curve_figure(out_svg: str | Path, arms: Mapping[str, Sequence[CurveRow]], title: str) -> None:
    """Mean AUC against shot size with a +-1 sd band, one line per (arm, test set)."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for arm in sorted(arms):
            rows = arms[arm]
            for ts in sorted({r.test_set for r in rows}):
                sel = sorted((r for r in rows if r.test_set == ts), key=lambda r: r.shot_size)
                x = np.array([r.shot_size for r in sel])
                m = np.array([r.mean_auc for r in sel])
                s = np.array([r.sd_auc for r in sel])
                (line,) = ax.plot(x, m, marker="o", label=f"{arm} / {ts}")
                ax.fill_between(x, m - s, m + s, alpha=0.2, color=line.get_color())
        ax.set(xlabel="training samples", ylabel="AUC", title=title)
        ax.legend(loc="lower right")
        _save(fig, Path(out_svg))


def series_figure(out_svg: str | Path, x: Sequence, ys: Mapping[str, Sequence[float]], xlabel: str, ylabel: str, title: str) -> None:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for name in sorted(ys):
            ax.plot(x, ys[name], marker="o", label=name)
        ax.set(xlabel=xlabel, ylabel=ylabel, title=title)
        ax.legend()
        _save(fig, Path(out_svg))


def cam_overlay_figure(out_svg: str | Path, images: Sequence[np.ndarray], cams: Sequence[np.ndarray], titles: Sequence[str]) -> None:
    """Images with their upsampled CAM blended on top, one panel each."""
    n = len(images)
    cols = min(4, max(n, 1))
    rows = max(1, -(-n // cols))
    with plt.rc_context({**_RC, "figure.figsize": (2.0 * cols, 2.0 * rows)}):
        fig, axes = plt.subplots(rows, cols, squeeze=False)
        for ax in axes.ravel():
            ax.axis("off")
        for ax, img, cam, t in zip(axes.ravel(), images, cams, titles):
            ax.imshow(img, interpolation="nearest")
            ax.imshow(cam, cmap="jet", alpha=0.45, vmin=0, vmax=1, interpolation="nearest")
            ax.set_title(t, fontsize=7)
        _save(fig, Path(out_svg))
