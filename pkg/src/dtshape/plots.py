"""Report figures written next to the CSV outputs."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path: str | os.PathLike) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def loss_curves(rows: list[dict], path: str | os.PathLike, title: str = "training loss") -> None:
    """Total and SDF loss per epoch (log scale) with the template residual on a twin axis."""
    ep = np.array([r["epoch"] for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(ep, [max(r["total"], 1e-300) for r in rows], label="total")
    ax.semilogy(ep, [max(r["sdf"], 1e-300) for r in rows], label="SDF terms")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    res = np.array([r.get("template_residual", np.nan) for r in rows], dtype=float)
    if np.isfinite(res).any():
        ax2 = ax.twinx()
        ax2.plot(ep, res, color="tab:red", linestyle="--", label="template residual")
        ax2.set_ylabel("template residual")
        ax2.legend(loc="upper center")
    ax.legend(loc="upper right")
    _save(fig, path)


def metric_bars(rows: list[dict], path: str | os.PathLike) -> None:
    """One panel per metric, one bar per shape."""
    keys = [("cd", "CD x 1e2", 100.0), ("emd", "EMD", 1.0), ("dsc", "DSC %", 1.0),
            ("nsd", "NSD %", 1.0), ("hd95", "HD95", 1.0), ("assd", "ASSD", 1.0)]
    ids = [r["shape_id"] for r in rows]
    fig, axes = plt.subplots(2, 3, figsize=(10, 5.5))
    for ax, (k, label, scale) in zip(axes.ravel(), keys):
        vals = np.array([r[k] for r in rows], dtype=float) * scale
        ax.bar(range(len(ids)), np.where(np.isfinite(vals), vals, 0.0))
        ax.set_title(label)
        ax.set_xticks(range(len(ids)))
        ax.set_xticklabels(ids, rotation=60, fontsize=7)
    _save(fig, path)


def confidence_histogram(confidence: np.ndarray, threshold: float, path: str | os.PathLike) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(confidence, bins=50, color="tab:blue")
    ax.axvline(threshold, color="tab:red", linestyle="--", label="selection cut-off")
    ax.set_xlabel("CPD confidence")
    ax.set_ylabel("points")
    ax.legend()
    _save(fig, path)
