"""Static SVG plots."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_step_times(report, path) -> Path:
    """Mean step time vs episode length, one line per encoder, with std bars."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for enc in dict.fromkeys(r.encoder for r in report.rows):
        rows = sorted((r for r in report.rows if r.encoder == enc), key=lambda r: r.T)
        ax.errorbar([r.T for r in rows], [r.mean_s for r in rows],
                    yerr=[r.std_s for r in rows], marker="o", capsize=3, label=enc)
    ax.set_xlabel("episode length T")
    ax.set_ylabel("step time (s)")
    ax.set_title(f"forward+backward, {report.meta.get('workers', 1)} worker(s)")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def plot_history(history: list[dict], path, key: str = "loss") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([h["step"] for h in history], [h[key] for h in history], lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel(key)
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
