"""Placebo batteries and finite-sample permutation inference on residuals.

Two complementary modes of inference are provided.

* Placebo studies rerun the full counterfactual pipeline with each control
  unit relabeled as treated (the true treated unit joins the donor pool)
  and compare the resulting effect estimates and post/pre error ratios
  against the main run.

* The permutation test postulates a trajectory of per-period effects,
  removes it from the post-onset outcomes, refits the estimator on the
  full adjusted sample, and compares a residual-norm statistic on the
  post-onset block against its distribution over permutations of the
  residual vector. Two permutation families are supported: all cyclic
  shifts (deterministic, preserves serial dependence) and random
  permutations sampled with replacement. A placebo variant of the test
  backdates a pseudo-onset inside the pre-onset range to probe the
  residual-exchangeability assumptions on data where the hypothesized null
  is true by construction.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .effects import FitMetrics, counterfactual, fit_metrics
from .errors import ConfigError, DataError, EstimationError
from .estimators import EstimatorSpec, fit_estimator, resolve_tuned_spec
from .panel import Panel, relabel_treated

SCHEMES = ("iid", "moving_block")


def _unit_seed(master_seed: int, unit_name: str) -> int:
    """Stable per-unit seed: master seed combined with a digest of the name.

    Independent of unit ordering and of Python's randomized string hash.
    """
    digest = hashlib.sha256(unit_name.encode("utf-8")).digest()
    tag = int.from_bytes(digest[:8], "big")
    return int(np.random.SeedSequence((int(master_seed), tag)).generate_state(1)[0])


@dataclass(frozen=True)
class PlaceboStudy:
    """Counterfactual fits and metrics for every control relabeled as treated."""

    units: tuple
    fits: dict
    metrics: dict
    errors: dict
    exclusion_multiplier: float

    @property
    def failed_units(self) -> list[str]:
        return sorted(self.errors)


def run_placebos(panel: Panel, spec: EstimatorSpec, exclusion_multiplier: float = 2.0) -> PlaceboStudy:
    """Rerun the pipeline once per control unit relabeled as treated.

    Each run keeps the original onset index and estimator recipe; the
    forest seed is re-derived from the master seed and the placebo unit's
    name, so results do not depend on donor-column ordering. Per-unit
    failures are recorded and the study continues.
    """
    if panel.n_controls < 2:
        raise DataError("placebo study needs at least two control units")
    master_seed = spec.forest.seed
    fits, metrics, errors = {}, {}, {}
    for name in panel.control_names:
        try:
            placebo_panel = relabel_treated(panel, name)
            unit_spec = spec.with_seed(_unit_seed(master_seed, name))
            model = fit_estimator(placebo_panel, placebo_panel.pre_rows, unit_spec)
            fit = counterfactual(placebo_panel, model)
            fits[name] = fit
            metrics[name] = fit_metrics(fit)
        except EstimationError as exc:
            errors[name] = str(exc)
    return PlaceboStudy(
        units=tuple(panel.control_names),
        fits=fits,
        metrics=metrics,
        errors=errors,
        exclusion_multiplier=exclusion_multiplier,
    )


@dataclass(frozen=True)
class PlaceboRankReport:
    """Ranked comparison of the main run against the placebo battery."""

    table: pd.DataFrame
    main_unit: str
    main_rank_ratio_rmspe: int
    main_rank_avg_gap_post: int
    excluded: tuple

    def to_dict(self) -> dict:
        return {
            "main_unit": self.main_unit,
            "main_rank_ratio_rmspe": self.main_rank_ratio_rmspe,
            "main_rank_avg_gap_post": self.main_rank_avg_gap_post,
            "excluded": list(self.excluded),
            "table": self.table.to_dict(orient="records"),
        }


def placebo_rank_report(study: PlaceboStudy, main: FitMetrics, main_unit: str = "treated") -> PlaceboRankReport:
    """Rank all runs by the post/pre RMSPE ratio and flag ill-fitting units.

    Units whose pre-onset RMSPE exceeds ``exclusion_multiplier`` times the
    main unit's are listed as excluded (the main unit itself never is).
    The table keeps one row per run, main unit included, sorted by the
    RMSPE ratio in descending order with undefined ratios last.
    """
    rows = [{"unit": main_unit, **main.to_dict()}]
    for name in study.units:
        m = study.metrics.get(name)
        if m is None:
            continue
        rows.append({"unit": name, **m.to_dict()})
    table = pd.DataFrame(rows)
    order = table["ratio_rmspe"].astype(float)
    table = table.iloc[np.argsort(-order.fillna(-np.inf).to_numpy(), kind="stable")].reset_index(drop=True)

    threshold = study.exclusion_multiplier * main.pre_rmspe
    excluded = tuple(
        name for name in study.units
        if name in study.metrics and study.metrics[name].pre_rmspe > threshold
    )
    table["excluded"] = table["unit"].isin(excluded)

    rank_ratio = int(table.index[table["unit"] == main_unit][0]) + 1
    by_gap = table.iloc[np.argsort(-table["avg_gap_post"].to_numpy(), kind="stable")].reset_index(drop=True)
    rank_gap = int(by_gap.index[by_gap["unit"] == main_unit][0]) + 1
    return PlaceboRankReport(
        table=table,
        main_unit=main_unit,
        main_rank_ratio_rmspe=rank_ratio,
        main_rank_avg_gap_post=rank_gap,
        excluded=excluded,
    )


def conformal_statistic(residuals, q: float = 1.0) -> float:
    """Scaled q-norm of the post-onset residual block.

    ``((1 / sqrt(n)) * sum |u|^q) ** (1/q)`` over the given residuals.
    """
    if q < 1:
        raise ConfigError(f"norm order q must be >= 1; got {q}")
    u = np.asarray(residuals, dtype=float)
    if u.size == 0:
        raise DataError("empty residual vector")
    return float((np.sum(np.abs(u) ** q) / np.sqrt(u.size)) ** (1.0 / q))


def _statistics_over_rotations(residuals: np.ndarray, t0: int, q: float) -> np.ndarray:
    """Statistic of the post block under every cyclic shift of the residuals."""
    n = residuals.size
    idx = (np.arange(n)[None, :] + np.arange(n)[:, None]) % n
    block = np.abs(residuals[idx][:, t0:]) ** q
    return (block.sum(axis=1) / np.sqrt(n - t0)) ** (1.0 / q)


def _statistics_over_draws(residuals: np.ndarray, t0: int, q: float,
                           n_samples: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x70657264)))
    n = residuals.size
    out = np.empty(n_samples)
    width = np.sqrt(n - t0)
    for i in range(n_samples):
        perm = rng.permutation(n)
        out[i] = (np.sum(np.abs(residuals[perm[t0:]]) ** q) / width) ** (1.0 / q)
    return out


@dataclass(frozen=True)
class ConformalResult:
    """Outcome of one permutation test."""

    statistic: float
    p_value: float
    scheme: str
    q: float
    null_trajectory: np.ndarray
    n_permutations: int
    n_samples: int | None
    seed: int | None
    permutation_statistics: np.ndarray

    def histogram(self, bins: int = 50) -> dict:
        counts, edges = np.histogram(self.permutation_statistics, bins=bins)
        return {"counts": counts.tolist(), "bin_edges": edges.tolist()}

    def to_dict(self) -> dict:
        scheme = {"name": self.scheme}
        if self.scheme == "iid":
            scheme["n_samples"] = self.n_samples
            scheme["seed"] = self.seed
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "scheme": scheme,
            "q": self.q,
            "null_trajectory": [float(v) for v in self.null_trajectory],
            "n_permutations": self.n_permutations,
            "histogram": self.histogram(),
        }


def _pvalue_from_statistics(observed: float, stats: np.ndarray) -> float:
    # strict-inequality empirical cdf: ties count against rejection
    below = int(np.sum(stats < observed))
    return 1.0 - below / stats.size


def conformal_test(panel: Panel, spec: EstimatorSpec, null_trajectory=None,
                   scheme: str = "moving_block", q: float = 1.0,
                   n_samples: int = 10000, seed: int = 0) -> ConformalResult:
    """Permutation test of a sharp null trajectory of post-onset effects.

    The hypothesized effects are subtracted from the post-onset outcomes,
    the estimator is refit on all periods of the adjusted panel, and the
    statistic of the post-onset residual block is compared against its
    permutation distribution: all cyclic shifts of the full residual vector
    (``moving_block``) or ``n_samples`` random permutations drawn with
    replacement plus the observed arrangement (``iid``). The p-value uses
    the strict-inequality empirical cdf, so ties are conservative and the
    p-value is always at least ``1 / n_permutations``.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"scheme must be one of {SCHEMES}; got {scheme!r}")
    # tuning happens once on the pre-onset rows; the full-sample refit below
    # must reuse those hyperparameters rather than re-tune
    spec = resolve_tuned_spec(panel, spec)
    n_post = panel.n_periods - panel.t0
    if null_trajectory is None:
        null_trajectory = np.zeros(n_post)
    null_trajectory = np.asarray(null_trajectory, dtype=float)
    if null_trajectory.shape != (n_post,):
        raise ConfigError(
            f"null trajectory must have one value per post-onset period ({n_post}); "
            f"got shape {null_trajectory.shape}"
        )

    adjusted = panel.treated.copy()
    adjusted[panel.t0:] -= null_trajectory
    adjusted_panel = dataclasses.replace(panel, treated=adjusted)

    all_rows = np.arange(panel.n_periods)
    model = fit_estimator(adjusted_panel, all_rows, spec, require_pre=False)
    residuals = adjusted - np.asarray(model.predict_matrix(panel.controls), dtype=float)

    observed = conformal_statistic(residuals[panel.t0:], q)
    if scheme == "moving_block":
        stats = _statistics_over_rotations(residuals, panel.t0, q)
        n_samples_out, seed_out = None, None
    else:
        drawn = _statistics_over_draws(residuals, panel.t0, q, n_samples, seed)
        stats = np.append(drawn, observed)
        n_samples_out, seed_out = n_samples, seed
    return ConformalResult(
        statistic=observed,
        p_value=_pvalue_from_statistics(observed, stats),
        scheme=scheme,
        q=q,
        null_trajectory=null_trajectory,
        n_permutations=stats.size,
        n_samples=n_samples_out,
        seed=seed_out,
        permutation_statistics=stats,
    )


def placebo_specification_test(panel: Panel, spec: EstimatorSpec, kappa_max: int,
                               schemes=SCHEMES, q: float = 1.0,
                               n_samples: int = 10000, seed: int = 0) -> dict:
    """Backdated-onset permutation tests on pre-onset data only.

    For each lead ``kappa = 1..kappa_max`` the panel is truncated to the
    pre-onset range, a pseudo-onset is declared ``kappa`` periods before
    its end, and the zero-trajectory test runs under each requested
    permutation scheme. Returns ``{kappa: {scheme: p_value}}``. The null
    holds by construction, so small p-values indicate a specification
    problem rather than an effect.
    """
    if not (1 <= kappa_max < panel.t0):
        raise ConfigError(f"kappa_max must lie in 1..{panel.t0 - 1}; got {kappa_max}")
    if isinstance(schemes, str):
        schemes = (schemes,)
    for s in schemes:
        if s not in SCHEMES:
            raise ConfigError(f"unknown scheme {s!r}")
    results: dict[int, dict[str, float]] = {}
    for kappa in range(1, kappa_max + 1):
        truncated = Panel(
            times=panel.times[: panel.t0],
            treated=panel.treated[: panel.t0].copy(),
            controls=panel.controls[: panel.t0].copy(),
            control_names=panel.control_names,
            treated_name=panel.treated_name,
            t0=panel.t0 - kappa,
        )
        results[kappa] = {}
        for s in schemes:
            res = conformal_test(truncated, spec, None, scheme=s, q=q,
                                 n_samples=n_samples, seed=seed)
            results[kappa][s] = res.p_value
    return results
