"""Figure rendering for CLI reports.

Figures are written next to the delimited report files. Output is
deterministic: fixed figure geometry and a constant PNG metadata block,
so repeated runs produce byte-identical images.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

PNG_METADATA = {"Software": "uvface"}


def _save(fig, path) -> None:
    tmp = str(path) + ".tmp"
    fig.savefig(tmp, format="png", metadata=PNG_METADATA)
    plt.close(fig)
    os.replace(tmp, path)


def save_eval_figure(path, report=None, mae=None) -> None:
    """Bar charts of per-bin NME and per-axis pose MAE."""
    panels = int(report is not None) + int(mae is not None)
    fig, axes = plt.subplots(1, max(panels, 1), figsize=(4.5 * max(panels, 1), 3.2), squeeze=False)
    col = 0
    if report is not None:
        ax = axes[0][col]
        labels = list(report.bins.keys())
        values = [report.bins[k][0] for k in labels]
        if report.balanced is not None:
            labels.append("balanced")
            values.append(report.balanced[0])
        if report.mean[1]:
            labels.append("mean")
            values.append(report.mean[0])
        ax.bar(np.arange(len(labels)), values, color="#4878cf")
        ax.set_xticks(np.arange(len(labels)))
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_ylabel("NME")
        ax.set_title("NME by yaw bin")
        col += 1
    if mae is not None:
        per_axis, mean = mae
        ax = axes[0][col]
        labels = ["yaw", "pitch", "roll", "mean"]
        ax.bar(np.arange(4), list(per_axis) + [mean], color="#d65f5f")
        ax.set_xticks(np.arange(4))
        ax.set_xticklabels(labels)
        ax.set_ylabel("MAE (deg)")
        ax.set_title("Pose MAE")
    fig.tight_layout()
    _save(fig, path)


def save_trace_figure(path, trace: np.ndarray, header) -> None:
    """Loss-term curves over fit iterations (log scale when possible)."""
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    iters = trace[:, 0]
    for column in range(1, trace.shape[1]):
        ax.plot(iters, trace[:, column], label=header[column], linewidth=1.2)
    if np.all(trace[:, 1:] >= 0) and np.any(trace[:, 1:] > 0):
        ax.set_yscale("symlog", linthresh=1e-8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    _save(fig, path)


def save_uv_preview(path, uv_map) -> None:
    """Render a position map as a normalized RGB image (invalid cells black)."""
    grid = uv_map.grid.copy()
    valid = uv_map.valid
    rgb = np.zeros_like(grid)
    if valid.any():
        lo = grid[valid].min(axis=0)
        hi = grid[valid].max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        rgb[valid] = (grid[valid] - lo) / span
    fig, ax = plt.subplots(figsize=(4.0, 4.0))
    ax.imshow(rgb, origin="lower")
    ax.set_xlabel("v")
    ax.set_ylabel("u")
    fig.tight_layout()
    _save(fig, path)
