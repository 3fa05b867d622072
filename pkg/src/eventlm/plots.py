"""Figures written next to evaluation reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def time_scatter(true, pred, path: str | Path, title: str = "") -> Path:
    """Predicted against true next-event intervals."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(true, pred, s=6, alpha=0.5)
    hi = max(max(true, default=1.0), max(pred, default=1.0))
    ax.plot([0, hi], [0, hi], color="grey", lw=1, ls="--")
    ax.set_xlabel("true interval")
    ax.set_ylabel("predicted interval")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def intensity_curve(curve: dict, path: str | Path, title: str = "") -> Path:
    """Fitted ground intensity over one sequence, with the generating one when known."""
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(curve["t"], curve["model"], label="fitted", lw=1.2)
    if "true" in curve:
        ax.plot(curve["t"], curve["true"], label="generating", lw=1.0, ls="--")
    top = max(curve["model"] + curve.get("true", []), default=1.0)
    ax.vlines(curve["events"], 0, 0.05 * top, color="black", lw=0.8)
    ax.set_xlabel("time")
    ax.set_ylabel("intensity")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
