"""Loss-curve and ablation figures (SVG) plus the delimited data behind them."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

log = logging.getLogger(__name__)

STYLE = {
    "figure.figsize": (6.0, 3.7),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "svg.hashsalt": "periodllm",
}


def smooth(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average; window 1 returns the input unchanged."""
    x = np.asarray(values, dtype=np.float64)
    if window <= 1 or x.size == 0:
        return x.copy()
    c = np.cumsum(np.insert(x, 0, 0.0))
    out = np.empty_like(x)
    for i in range(x.size):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def align_curves(curves: Mapping[str, Sequence[float]]) -> dict[str, np.ndarray]:
    """Truncate every curve to the shortest common length."""
    n = min(len(v) for v in curves.values())
    if any(len(v) != n for v in curves.values()):
        log.warning("loss curves differ in length; truncating to the common %d iterations", n)
    return {k: np.asarray(v[:n], dtype=np.float64) for k, v in curves.items()}


def write_merged_csv(curves: Mapping[str, np.ndarray], path, raw: Mapping[str, np.ndarray] | None = None) -> None:
    labels = list(curves)
    n = len(next(iter(curves.values())))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["iter"] + [f"{lb}_smoothed" for lb in labels]
        if raw is not None:
            header += [f"{lb}_raw" for lb in labels]
        w.writerow(header)
        for i in range(n):
            row = [i] + [repr(float(curves[lb][i])) for lb in labels]
            if raw is not None:
                row += [repr(float(raw[lb][i])) for lb in labels]
            w.writerow(row)


def plot_loss_curves(curves: Mapping[str, np.ndarray], path, title: str | None = None) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, y in curves.items():
            ax.plot(np.arange(len(y)), y, lw=1.2, label=label)
        ax.set_xlabel("iteration")
        ax.set_ylabel("training loss (smoothed)")
        if title:
            ax.set_title(title, fontsize=10)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def plot_ablation(rows: Sequence[dict], path, x_key: str = "value", y_key: str = "mae") -> None:
    """One panel per ablation setting, y = MAE on the retention corpus."""
    groups: dict[str, list[dict]] = {}
    for r in rows:
        if r.get(y_key) is not None:
            groups.setdefault(r["setting"], []).append(r)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(1, len(groups)), squeeze=False)
        for ax, (setting, rs) in zip(axes[0], groups.items()):
            labels = [str(r[x_key]) for r in rs]
            ax.bar(range(len(rs)), [float(r[y_key]) for r in rs], color="0.6")
            ax.set_xticks(range(len(rs)), labels)
            ax.set_xlabel(setting)
            ax.set_ylabel(y_key.upper())
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def plot_channel_weights(weights: np.ndarray, path) -> None:
    """Heat map of per-step channel weights (iterations x channels)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        im = ax.imshow(np.asarray(weights).T, aspect="auto", interpolation="nearest", cmap="viridis")
        ax.set_xlabel("dump index")
        ax.set_ylabel("channel")
        fig.colorbar(im, ax=ax, label="weight")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
