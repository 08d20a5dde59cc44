"""Figures written next to the CSV outputs of ``analyze``, ``report`` and ``mnist``."""

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "axes.labelsize": 8,
    "axes.titlesize": 8,
    "axes.linewidth": 0.5,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 8,
    "legend.fontsize": 7,
    "lines.linewidth": 0.8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "xtick.major.width": 0.5,
    "ytick.major.width": 0.5,
    "image.cmap": "RdBu_r",
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _grid(n, ncols=5, panel=1.8):
    ncols = min(ncols, max(n, 1))
    nrows = max(1, math.ceil(n / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(panel * ncols, panel * nrows), squeeze=False)
    for ax in axes.ravel()[n:]:
        ax.set_visible(False)
    return fig, axes.ravel()


def plot_relation(records, summary, path, channel="interval"):
    """Scatter of each variable's channel value against its variance phi."""
    variables = sorted({r.variable for r in records if r.channel == channel})
    with plt.rc_context(STYLE):
        fig, axes = _grid(len(variables))
        for ax, var in zip(axes, variables):
            rs = [r for r in records if r.variable == var and r.channel == channel]
            ax.scatter([r.x for r in rs], [r.phi for r in rs], s=3, alpha=0.4, lw=0, color="C0")
            ax.axhline(0.0, color="0.6", lw=0.4)
            title = var
            if var in summary:
                title += f"  rho={summary[var].rho:+.2f}"
            ax.set_title(title)
            ax.set_xlabel("log24 interval" if channel == "interval" else "value (z)")
            ax.set_ylabel("variance SHAP")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_prediction_vs_variance(pairs, path):
    """phi_pred against phi_var for every explained feature."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3.0))
        if pairs:
            arr = np.array([(p[-2], p[-1]) for p in pairs])
            ax.scatter(arr[:, 0], arr[:, 1], s=2, alpha=0.3, lw=0, color="C1")
        ax.axhline(0.0, color="0.6", lw=0.4)
        ax.axvline(0.0, color="0.6", lw=0.4)
        ax.set_xlabel("prediction SHAP")
        ax.set_ylabel("variance SHAP")
        fig.savefig(path)
        plt.close(fig)


def plot_report(report, path):
    """Avoidable share of measured and should-have share of missing, per variable."""
    names = [r.variable for r in report.rows]
    pos = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.45 * len(names)), 2.6))
        ax.bar(pos - 0.2, [r.pct_avoidable for r in report.rows], 0.4, label="% avoidable")
        ax.bar(pos + 0.2, [r.pct_should_have for r in report.rows], 0.4, label="% should-have")
        ax.set_xticks(pos)
        ax.set_xticklabels(names, rotation=45, ha="right")
        ax.set_ylabel("percent")
        ax.set_title(f"step {report.step}, n={report.cohort_size}")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)


def plot_attribution_maps(image, phi_pred, phi_var, path):
    """Input image beside its prediction-SHAP and variance-SHAP maps."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(6.0, 2.2))
        axes[0].imshow(image, cmap="gray_r")
        axes[0].set_title("input")
        for ax, phi, title in ((axes[1], phi_pred, "prediction SHAP"), (axes[2], phi_var, "variance SHAP")):
            lim = float(np.abs(phi).max()) or 1.0
            im = ax.imshow(phi, vmin=-lim, vmax=lim)
            ax.set_title(title)
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        fig.savefig(path)
        plt.close(fig)
