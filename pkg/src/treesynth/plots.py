"""Figure rendering for the CLI report paths.

Core modules emit data only; these helpers turn the emitted series into
PNG files saved next to the delimited output. Matplotlib runs on the Agg
backend so everything works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

_ONSET_STYLE = {"color": "gray", "linestyle": "--", "linewidth": 1}


def _onset_line(ax, times, t0: int):
    if 0 < t0 < len(times):
        ax.axvline(pd.Timestamp(times[t0]), **_ONSET_STYLE)


def plot_counterfactual(times, observed, predicted, t0, path, title="Observed and imputed outcome"):
    """Observed series against the imputed no-intervention series."""
    times = pd.DatetimeIndex(times)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(times, observed, color="black", lw=1.2, label="observed")
    ax.plot(times[:t0], predicted[:t0], color="tab:red", lw=1.2, label="fit (pre)")
    ax.plot(times[t0:], predicted[t0:], color="tab:green", lw=1.2, ls="--", label="imputed (post)")
    _onset_line(ax, times, t0)
    ax.set_xlabel("week")
    ax.set_ylabel("outcome")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_gaps(times, gaps, t0, path, title="Gap between observed and imputed outcome"):
    times = pd.DatetimeIndex(times)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(times, gaps, color="tab:blue", lw=1.2)
    ax.axhline(0.0, color="black", lw=0.8)
    _onset_line(ax, times, t0)
    ax.set_xlabel("week")
    ax.set_ylabel("gap")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_placebo_gaps(times, gaps_by_unit, main_unit, t0, path, excluded=(),
                      title="Gaps: main unit vs placebo runs"):
    """Spaghetti plot of gap series; the main unit is highlighted and
    excluded units are omitted."""
    times = pd.DatetimeIndex(times)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for unit, gaps in gaps_by_unit.items():
        if unit == main_unit or unit in excluded:
            continue
        ax.plot(times, gaps, color="0.7", lw=0.8)
    if main_unit in gaps_by_unit:
        ax.plot(times, gaps_by_unit[main_unit], color="tab:blue", lw=1.6, label=main_unit)
        ax.legend()
    ax.axhline(0.0, color="black", lw=0.8)
    _onset_line(ax, times, t0)
    ax.set_xlabel("week")
    ax.set_ylabel("gap")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_permutation_hist(statistics, observed, path, title="Permutation distribution"):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.hist(np.asarray(statistics), bins=50, color="0.75", edgecolor="0.5")
    ax.axvline(observed, color="tab:red", lw=1.5, label=f"observed = {observed:.3g}")
    ax.set_xlabel("statistic")
    ax.set_ylabel("count")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_estimator_comparison(times, observed, predictions_by_tag, t0, path,
                              title="Imputed outcome by estimator"):
    times = pd.DatetimeIndex(times)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(times, observed, color="black", lw=1.4, label="observed")
    for tag, pred in predictions_by_tag.items():
        ax.plot(times, pred, lw=1.0, label=tag)
    _onset_line(ax, times, t0)
    ax.set_xlabel("week")
    ax.set_ylabel("outcome")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
