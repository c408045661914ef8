"""Static figures for run reports, rendered off-screen to PNG."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}
# no timestamp or version stamp, so identical inputs give identical files
PNG_METADATA = {"Software": None}


def _save(fig, path):
    fig.savefig(path, format="png", metadata=PNG_METADATA)
    plt.close(fig)
    return path


def criticality_map(grid, rows, cols, path, title=""):
    """Heatmap of bottleneck density (percent of entries selected) per module.

    ``grid`` is ``[len(rows), len(cols)]`` with NaN where a module is absent.
    """
    grid = np.asarray(grid, dtype=np.float64)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.0 + 0.75 * len(cols), 0.8 + 0.4 * len(rows)))
        masked = np.ma.masked_invalid(grid)
        image = ax.imshow(masked, cmap="viridis", aspect="auto",
                          vmin=0.0, vmax=max(float(np.nanmax(grid)) if np.isfinite(grid).any() else 1.0, 1e-9))
        ax.set_xticks(range(len(cols)))
        ax.set_xticklabels(cols, rotation=45, ha="right")
        ax.set_yticks(range(len(rows)))
        ax.set_yticklabels(rows)
        for i in range(len(rows)):
            for j in range(len(cols)):
                if np.isfinite(grid[i, j]):
                    ax.text(j, i, f"{grid[i, j]:.1f}", ha="center", va="center", fontsize=7,
                            color="white" if grid[i, j] < 0.6 * masked.max() else "black")
        fig.colorbar(image, ax=ax, label="selected entries (%)")
        ax.set_title(title)
        return _save(fig, path)


def accuracy_vs_fraction(rows, attacks, path):
    """Clean and robust accuracy against tuned/total percentage, one marker per run."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        fractions = [r["tuned_total_pct"] for r in rows]
        series = [("clean", [r["clean_acc"] for r in rows], "o")]
        series += [(a, [r["robust_acc"].get(a) for r in rows], "s") for a in attacks]
        for label, values, marker in series:
            pts = [(f, v) for f, v in zip(fractions, values) if v is not None]
            if pts:
                xs, ys = zip(*pts)
                ax.scatter(xs, ys, marker=marker, label=label)
        for r in rows:
            if r["robust_acc"]:
                first = r["robust_acc"].get(attacks[0]) if attacks else None
                if first is not None:
                    ax.annotate(r["run"], (r["tuned_total_pct"], first), fontsize=7,
                                xytext=(3, 3), textcoords="offset points")
        ax.set_xscale("log")
        ax.set_xlabel("tuned / total (%)")
        ax.set_ylabel("accuracy (%)")
        ax.legend(frameon=False)
        return _save(fig, path)


def sample_count_grid(counts, values, path, ylabel):
    """Line plot of a metric against the number of criticality samples."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        ax.plot(counts, values, marker="o")
        ax.set_xlabel("adversarial samples for scoring")
        ax.set_ylabel(ylabel)
        ax.set_xticks(counts)
        return _save(fig, path)
