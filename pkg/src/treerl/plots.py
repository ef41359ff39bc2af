"""SVG figures for run reports.  Output is byte-stable for identical input."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "treerl"
matplotlib.rcParams["svg.fonttype"] = "none"


def _save(fig, path, cfg_hash: str) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None,
                                              "Description": f"config_hash={cfg_hash}"})
    plt.close(fig)
    return path


def histogram_svg(counts, edges, path, title: str = "", cfg_hash: str = "",
                  xlabel: str = "fork position / branch length") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    widths = [b - a for a, b in zip(edges[:-1], edges[1:])]
    ax.bar(edges[:-1], counts, width=widths, align="edge", edgecolor="black", linewidth=0.5)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("fork events")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path, cfg_hash)


def curves_svg(series: dict, path, xlabel: str, ylabel: str, title: str = "", cfg_hash: str = "") -> Path:
    """``series`` maps a label to ``(xs, ys)``."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label in sorted(series):
        xs, ys = series[label]
        ax.plot(xs, ys, marker=".", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if series:
        ax.legend()
    fig.tight_layout()
    return _save(fig, path, cfg_hash)


def ranked_bar_svg(items, path, title: str = "", cfg_hash: str = "") -> Path:
    """Horizontal bars for ``(label, count)`` pairs, largest on top."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    labels = [str(k) for k, _ in items][::-1]
    ax.barh(labels, [c for _, c in items][::-1])
    ax.set_xlabel("count")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path, cfg_hash)
