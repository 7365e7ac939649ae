"""Matplotlib figures written next to the CSV/JSON outputs.

SVGs are made byte-stable (no date stamp, fixed element-id salt) so that
re-running a seeded config reproduces them exactly.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .telemetry import AngleHistogram  # noqa: E402

_SVG_SALT = "stalab"


def _save(fig, stem) -> List[Path]:
    stem = Path(stem)
    paths = [stem.with_suffix(".svg"), stem.with_suffix(".png")]
    with matplotlib.rc_context({"svg.hashsalt": _SVG_SALT}):
        fig.savefig(paths[0], metadata={"Date": None})
    fig.savefig(paths[1], dpi=120, metadata={"Software": None})
    plt.close(fig)
    return paths


def plot_histograms(hists: Mapping[str, AngleHistogram], stem, title: str = "") -> List[Path]:
    """Overlaid angle histograms (normalised to fractions), one per mode."""
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for label, h in hists.items():
        if h.count == 0:
            continue
        frac = h.counts / h.count
        ax.stairs(frac, h.edges, label=f"{label} (n={h.count}, mean {h.mean:.1f})", fill=False, linewidth=1.5)
    ax.axvspan(80, 100, color="0.9", zorder=0)
    ax.set_xlim(0, 180)
    ax.set_xlabel("angle [deg]")
    ax.set_ylabel("fraction of samples")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    return _save(fig, stem)


def plot_loss_curves(rows_by_seed: Mapping[int, Sequence[dict]], tasks: Sequence[int], stem,
                     title: str = "") -> List[Path]:
    fig, axes = plt.subplots(1, len(tasks) + 1, figsize=(3.2 * (len(tasks) + 1), 3.0), squeeze=False)
    axes = axes[0]
    keys = ["loss_total"] + [f"loss_{t}" for t in tasks]
    for ax, key in zip(axes, keys):
        for seed, rows in sorted(rows_by_seed.items()):
            pts = [(r["step"], r[key]) for r in rows if r.get(key) is not None]
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, linewidth=0.6, alpha=0.7, label=f"seed {seed}")
        ax.set_title(key, fontsize=9)
        ax.set_xlabel("update")
        ax.set_yscale("log")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    return _save(fig, stem)


def plot_delta_bars(rows: Sequence[Tuple[str, float]], stem, title: str = "multi-task gain") -> List[Path]:
    names = [n for n, _ in rows]
    vals = [v for _, v in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.7 * len(rows) + 1.5), 3.4))
    colors = ["tab:green" if v >= 0 else "tab:red" for v in vals]
    ax.bar(range(len(vals)), vals, color=colors)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("gain vs single-task")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, stem)


def histogram_table(hists: Dict[str, AngleHistogram]) -> str:
    """Plain-text summary used by the CLI."""
    lines = [f"{'mode':6s} {'count':>7s} {'mean':>7s} {'std':>6s} {'[80,100)':>9s} {'skipped':>8s}"]
    for m, h in hists.items():
        lines.append(f"{m:6s} {h.count:7d} {h.mean:7.2f} {h.std:6.2f} {h.mass_between(80, 100):9.3f} {h.skipped:8d}")
    return "\n".join(lines)
