"""Figure for the phase-wise optimal fraction, one line per phase length."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_optimal_fraction(rows: Sequence[dict], path: str | Path, title: str | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for T in sorted({r["T"] for r in rows}):
        pts = sorted((r for r in rows if r["T"] == T), key=lambda r: r["phase"])
        k = [r["phase"] for r in pts]
        ax.plot(k, [r["fraction"] for r in pts], marker="o", ms=3, label=f"T = {T:g}")
        ax.fill_between(k, [r["ci_low"] for r in pts], [r["ci_high"] for r in pts], alpha=0.15, lw=0)
    ax.set_xlabel("exploration phase k")
    ax.set_ylabel("fraction of trials at a team-optimal policy")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(frameon=False, fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
