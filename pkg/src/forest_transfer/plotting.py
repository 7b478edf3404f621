"""Scatter, scenario-grid and height-map figures."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

# no timestamp/version in the PNG so reruns are byte-identical
PNG_META = {"Software": None}

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 120,
}


def _scatter(ax, report, lim=None):
    y, p = report.reference, report.predicted
    lim = lim or max(float(np.nanmax(y)), float(np.nanmax(p)), 1.0) * 1.05
    ax.scatter(y, p, s=6, alpha=0.6, edgecolors="none")
    ax.plot([0, lim], [0, lim], "k--", lw=0.8)
    ax.set_xlim(0, lim)
    ax.set_ylim(0, lim)
    ax.set_aspect("equal")
    m = report.metrics
    txt = f"RMSE {m.rmse:.2f} m\nbias {m.bias:.2f} m"
    if m.r2 is not None:
        txt += f"\nR$^2$ {m.r2:.3f}"
    ax.text(0.04, 0.96, txt, transform=ax.transAxes, va="top", fontsize=7)
    ax.set_xlabel("reference height, m")
    ax.set_ylabel("predicted height, m")


def scatter_figure(report, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3.2))
        _scatter(ax, report)
        ax.set_title(report.key.replace("__", " / "))
        fig.tight_layout()
        fig.savefig(path, metadata=PNG_META)
        plt.close(fig)
    return path


def scenario_grid(reports, path):
    """Rows are scenarios, columns are methods."""
    scenarios = list(dict.fromkeys(r.scenario for r in reports))
    methods = list(dict.fromkeys(r.method for r in reports))
    lookup = {(r.scenario, r.method): r for r in reports}
    lim = max(max(float(r.reference.max()), float(r.predicted.max())) for r in reports) * 1.05
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(scenarios), len(methods), squeeze=False,
                                 figsize=(2.8 * len(methods), 2.8 * len(scenarios)))
        for i, s in enumerate(scenarios):
            for j, meth in enumerate(methods):
                ax = axes[i][j]
                if (s, meth) in lookup:
                    _scatter(ax, lookup[(s, meth)], lim)
                else:
                    ax.axis("off")
                ax.set_title(f"{meth} / {s}")
        fig.tight_layout()
        fig.savefig(path, metadata=PNG_META)
        plt.close(fig)
    return path


def map_figure(height_map, path, title="predicted height, m"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 4.4))
        im = ax.imshow(np.ma.masked_invalid(height_map.values), cmap="viridis", vmin=0)
        fig.colorbar(im, ax=ax, shrink=0.8, label="m")
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.tight_layout()
        fig.savefig(path, metadata=PNG_META)
        plt.close(fig)
    return path
