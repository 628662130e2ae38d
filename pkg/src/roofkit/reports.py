"""Histogram tables and figures for attribute distributions and errors.

Figures are written as SVG with a fixed hash salt and no date stamp so
reruns produce identical files.
"""
from __future__ import annotations

import csv
import io
import logging
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

BIN_EDGES: dict[str, np.ndarray] = {
    "height": np.arange(0.0, 121.0, 1.0),
    "angle": np.arange(0.0, 91.0, 1.0),
    "azimuth": np.arange(0.0, 361.0, 5.0),
}

UNITS = {"height": "m", "angle": "deg", "azimuth": "deg"}


def bin_counts(values: Sequence[float], edges: np.ndarray) -> np.ndarray:
    """Counts per bin; values outside the edges land in the first/last bin."""
    v = np.clip(np.asarray(values, dtype=float), edges[0], edges[-1])
    counts, _ = np.histogram(v, bins=edges)
    return counts


def histogram_csv(series: Mapping[str, Sequence[float]], edges: np.ndarray) -> str:
    """CSV text with one row per bin and one count column per series."""
    names = list(series)
    counts = [bin_counts(series[n], edges) for n in names]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", *names])
    for k in range(len(edges) - 1):
        w.writerow([f"{edges[k]:g}", f"{edges[k + 1]:g}", *(int(c[k]) for c in counts)])
    return buf.getvalue()


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "roofkit"
    return plt


def histogram_svg(
    series: Mapping[str, Sequence[float]], edges: np.ndarray, title: str, xlabel: str, path: Path
) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    colors = ["tab:blue", "tab:orange", "tab:green", "tab:red"]
    nonempty = False
    for k, (name, values) in enumerate(series.items()):
        values = np.clip(np.asarray(values, dtype=float), edges[0], edges[-1])
        if values.size:
            nonempty = True
            ax.hist(values, bins=edges, histtype="stepfilled", alpha=0.5, label=name, color=colors[k % len(colors)])
    if not nonempty:
        ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes)
    elif len(series) > 1:
        ax.legend(frameon=False)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def render_histograms(
    series: Mapping[str, Sequence[float]],
    attribute: str,
    out_dir: str | Path,
    stem: str | None = None,
    edges: np.ndarray | None = None,
) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.svg`` for one attribute.

    ``series`` maps a label (e.g. ``"gt"``, ``"pred"``, or a split name) to
    its values; several series are overlaid in the figure.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or f"hist_{attribute}"
    edges = BIN_EDGES[attribute] if edges is None else edges
    if not any(len(v) for v in series.values()):
        logger.warning("no data for %s histogram; writing an empty placeholder", attribute)
    csv_path = out_dir / f"{stem}.csv"
    csv_path.write_text(histogram_csv(series, edges), encoding="utf-8")
    svg_path = out_dir / f"{stem}.svg"
    histogram_svg(series, edges, stem.replace("_", " "), f"{attribute} [{UNITS.get(attribute, '')}]", svg_path)
    return csv_path, svg_path
