"""SVG charts for the report path (headless matplotlib)."""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps the SVG bytes stable across runs
_SVG_META = {"Date": None, "Creator": None}
plt.rcParams["svg.hashsalt"] = "tabomlab"


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def plot_tds(series: Mapping[str, Sequence[tuple[int, float]]], path, title: str = "") -> None:
    """One line per model: per-step entropy variance against reverse timestep."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, pts in series.items():
        ts = [t for t, _ in pts]
        ax.plot(ts, [v for _, v in pts], marker="o", ms=3, label=label)
    ax.invert_xaxis()
    ax.set_xlabel("reverse step t")
    ax.set_ylabel("entropy variance")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_ce_curve(ratios: Sequence[float], ce_gt: Sequence[float], ce_sd: Sequence[float], path,
                  title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(ratios, ce_gt, marker="o", ms=3, label="ground truth")
    ax.plot(ratios, ce_sd, marker="s", ms=3, label="self-distilled")
    ax.set_xlabel("mask ratio")
    ax.set_ylabel("masked-token CE (nats)")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7)
    _save(fig, path)
