"""Counterfactual gaps, average-effect estimators, bootstrap uncertainty, fit metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError, LeakageError
from .panel import Panel, WEEK_COLUMN


def rmspe(gaps) -> float:
    """Root mean squared prediction error of a gap series."""
    gaps = np.asarray(gaps, dtype=float)
    return float(np.sqrt(np.mean(gaps * gaps)))


def mae(gaps) -> float:
    gaps = np.asarray(gaps, dtype=float)
    return float(np.mean(np.abs(gaps)))


@dataclass(frozen=True)
class CounterfactualFit:
    """Predicted no-intervention outcomes and per-period gaps for one panel.

    ``gaps[t] = observed[t] - predictions[t]`` for every period; post-onset
    gaps are the per-period effect estimates.
    """

    times: np.ndarray
    observed: np.ndarray
    predictions: np.ndarray
    gaps: np.ndarray
    estimator_tag: str
    t0: int

    def __post_init__(self):
        n = self.observed.shape[0]
        if not (self.predictions.shape[0] == n == self.gaps.shape[0] == self.times.shape[0]):
            raise DataError("counterfactual series must all share the panel length")
        if not np.allclose(self.gaps, self.observed - self.predictions, rtol=0, atol=0):
            raise DataError("gaps must equal observed minus predictions elementwise")
        for name in ("times", "observed", "predictions", "gaps"):
            arr = np.asarray(getattr(self, name))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def pre_gaps(self) -> np.ndarray:
        return self.gaps[: self.t0]

    @property
    def post_gaps(self) -> np.ndarray:
        return self.gaps[self.t0:]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                WEEK_COLUMN: pd.DatetimeIndex(self.times).strftime("%Y-%m-%d"),
                "observed": self.observed,
                "predicted": self.predictions,
                "gap": self.gaps,
            }
        )

    def save_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


def counterfactual(panel: Panel, model) -> CounterfactualFit:
    """Impute the no-intervention outcome for every period of the panel.

    ``model`` is any fitted estimator exposing ``predict_matrix`` plus the
    ``training_rows`` it saw; models trained on post-onset rows are refused.
    """
    training_rows = np.asarray(model.training_rows)
    if training_rows.size and training_rows.max() >= panel.t0:
        raise LeakageError(
            "estimator was trained on post-onset periods; refusing to impute a counterfactual"
        )
    predictions = np.asarray(model.predict_matrix(panel.controls), dtype=float)
    gaps = panel.treated - predictions
    return CounterfactualFit(
        times=panel.times.copy(),
        observed=panel.treated.copy(),
        predictions=predictions,
        gaps=gaps,
        estimator_tag=model.tag,
        t0=panel.t0,
    )


def ate_hat(fit: CounterfactualFit) -> float:
    """Average post-onset gap: the model-based average effect estimate."""
    if fit.post_gaps.size == 0:
        raise DataError("no post-onset periods")
    return float(np.mean(fit.post_gaps))


def ate_naive(panel: Panel) -> float:
    """Difference of post- and pre-onset outcome means (no controls used)."""
    return float(np.mean(panel.treated[panel.t0:]) - np.mean(panel.treated[: panel.t0]))


def block_bootstrap_ci(fit: CounterfactualFit, n_boot: int, block_length: int,
                       level: float = 0.95, seed: int = 0) -> tuple[float, float, float]:
    """Circular moving-block bootstrap of the average post-onset gap.

    Each replicate draws ``ceil(n/block_length)`` blocks with replacement
    from the circularly extended post-onset gap series, truncates to the
    original length, and records its mean. Returns the sample standard
    deviation of the replicate means and the percentile interval at
    ``level``.
    """
    gaps = fit.post_gaps
    n = gaps.size
    if n_boot < 1:
        raise ConfigError("n_boot must be >= 1")
    if not (1 <= block_length <= n):
        raise ConfigError(f"block_length must lie in 1..{n}; got {block_length}")
    if not (0.0 < level < 1.0):
        raise ConfigError(f"level must lie in (0, 1); got {level}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n_blocks = math.ceil(n / block_length)
    starts = rng.integers(0, n, size=(n_boot, n_blocks))
    offsets = np.arange(block_length)
    positions = (starts[:, :, None] + offsets[None, None, :]) % n
    samples = gaps[positions.reshape(n_boot, -1)[:, :n]]
    means = samples.mean(axis=1)
    se = float(np.std(means, ddof=1)) if n_boot > 1 else 0.0
    tail = 100.0 * (1.0 - level) / 2.0
    ci_low, ci_high = np.percentile(means, [tail, 100.0 - tail])
    return se, float(ci_low), float(ci_high)


@dataclass(frozen=True)
class EffectReport:
    """Point estimate, bootstrap uncertainty, and the per-period effect path."""

    ate_hat: float
    ate_naive: float
    per_period_gaps: np.ndarray
    boot_se: float
    ci_low: float
    ci_high: float
    normal_ci_low: float
    normal_ci_high: float
    n_boot: int
    block_length: int
    level: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "ate_hat": self.ate_hat,
            "ate_naive": self.ate_naive,
            "per_period_gaps": [float(g) for g in self.per_period_gaps],
            "boot_se": self.boot_se,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "normal_ci_low": self.normal_ci_low,
            "normal_ci_high": self.normal_ci_high,
            "boot_config": {
                "n_boot": self.n_boot,
                "block_length": self.block_length,
                "level": self.level,
                "seed": self.seed,
            },
        }


def effect_report(panel: Panel, fit: CounterfactualFit, n_boot: int = 10000,
                  block_length: int = 3, level: float = 0.95, seed: int = 0) -> EffectReport:
    """Bundle the two average-effect estimators with bootstrap uncertainty.

    Both a percentile interval and the matching normal-approximation
    interval (point estimate +- z * se) are reported.
    """
    point = ate_hat(fit)
    se, ci_low, ci_high = block_bootstrap_ci(fit, n_boot, block_length, level, seed)
    z = _normal_quantile(0.5 + level / 2.0)
    return EffectReport(
        ate_hat=point,
        ate_naive=ate_naive(panel),
        per_period_gaps=fit.post_gaps.copy(),
        boot_se=se,
        ci_low=ci_low,
        ci_high=ci_high,
        normal_ci_low=point - z * se,
        normal_ci_high=point + z * se,
        n_boot=n_boot,
        block_length=block_length,
        level=level,
        seed=seed,
    )


def _normal_quantile(p: float) -> float:
    """Standard normal quantile (Acklam's rational approximation, ~1e-9)."""
    a = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
    b = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
         3.754408661907416e+00)
    p_low, p_high = 0.02425, 1 - 0.02425
    if p < p_low:
        q = math.sqrt(-2 * math.log(p))
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1)
    if p <= p_high:
        q = p - 0.5
        r = q * q
        return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
               (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1)
    q = math.sqrt(-2 * math.log(1 - p))
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1)


@dataclass(frozen=True)
class FitMetrics:
    """Pre/post error measures of one counterfactual fit.

    Ratios are post/pre and are ``None`` (undefined) when the pre-onset
    measure is zero.
    """

    pre_rmspe: float
    pre_mae: float
    post_rmspe: float
    post_mae: float
    ratio_rmspe: float | None
    ratio_mae: float | None
    post_std: float
    avg_gap_pre: float
    avg_gap_post: float

    def to_dict(self) -> dict:
        return {
            "pre_rmspe": self.pre_rmspe,
            "pre_mae": self.pre_mae,
            "post_rmspe": self.post_rmspe,
            "post_mae": self.post_mae,
            "ratio_rmspe": self.ratio_rmspe,
            "ratio_mae": self.ratio_mae,
            "post_std": self.post_std,
            "avg_gap_pre": self.avg_gap_pre,
            "avg_gap_post": self.avg_gap_post,
        }


def fit_metrics(fit: CounterfactualFit, pre_range=None, post_range=None) -> FitMetrics:
    """RMSPE/MAE on the pre and post ranges, their ratios, and gap averages.

    ``pre_range`` / ``post_range`` override the default split (``[0, t0)``
    and ``[t0, T)``) with explicit index arrays, which is how hold-out
    validation metrics are produced.
    """
    pre = np.arange(fit.t0) if pre_range is None else np.asarray(pre_range, dtype=np.int64)
    post = np.arange(fit.t0, fit.gaps.shape[0]) if post_range is None else np.asarray(post_range, dtype=np.int64)
    pre_gaps = fit.gaps[pre]
    post_gaps = fit.gaps[post]
    pre_r, pre_m = rmspe(pre_gaps), mae(pre_gaps)
    post_r, post_m = rmspe(post_gaps), mae(post_gaps)
    post_pred = fit.predictions[post]
    return FitMetrics(
        pre_rmspe=pre_r,
        pre_mae=pre_m,
        post_rmspe=post_r,
        post_mae=post_m,
        ratio_rmspe=post_r / pre_r if pre_r > 0 else None,
        ratio_mae=post_m / pre_m if pre_m > 0 else None,
        post_std=float(np.std(post_pred, ddof=1)) if post_pred.size > 1 else 0.0,
        avg_gap_pre=float(np.mean(pre_gaps)),
        avg_gap_post=float(np.mean(post_gaps)),
    )
