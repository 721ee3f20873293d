"""Uniform front door for fitting any of the three estimators.

Placebo batteries, permutation tests, and the CLI all need to refit "the
same estimator" on varying panels and row sets. :class:`EstimatorSpec`
captures that recipe (estimator kind, hyperparameters, tuning policy,
seed); :func:`fit_estimator` executes it and returns a fitted model with
the shared prediction interface (``predict_matrix``, ``training_rows``,
``tag``).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .forest import ForestConfig, fit_forest, tune_mtry
from .panel import Panel, SplitSpec
from .solvers import default_enet_grid, fit_enet, fit_scm, tune_enet

ESTIMATOR_KINDS = ("forest", "scm", "enet")


@dataclass(frozen=True)
class EstimatorSpec:
    """Recipe for one estimator fit.

    ``tune=True`` selects hyperparameters on a temporal split of the
    training rows before the final fit on all of them: the forest tunes
    ``mtry`` over ``mtry_grid`` (all of ``1..N`` when omitted), the elastic
    net tunes ``(lambda, alpha_mix)`` over ``enet_grid`` (default 24-point
    grid when omitted). The simplex solver has nothing to tune. Tuning
    requires the training rows to form a contiguous prefix so the temporal
    ordering of the split is meaningful.
    """

    kind: str = "forest"
    forest: ForestConfig = field(default_factory=ForestConfig)
    scm_tol: float = 1e-8
    scm_max_iter: int = 100000
    enet_lambda: float = 1.0
    enet_alpha_mix: float = 0.5
    enet_tol: float = 1e-8
    enet_max_iter: int = 100000
    enet_standardize: bool = False
    tune: bool = False
    split: SplitSpec = field(default_factory=SplitSpec)
    mtry_grid: tuple | None = None
    enet_grid: tuple | None = None

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ConfigError(f"unknown estimator kind {self.kind!r}; expected one of {ESTIMATOR_KINDS}")

    def with_seed(self, seed: int) -> "EstimatorSpec":
        return replace(self, forest=replace(self.forest, seed=int(seed)))


def _tuning_view(panel: Panel, rows: np.ndarray) -> Panel:
    """Panel view whose pre-onset range is exactly the training prefix."""
    n = rows.size
    if not np.array_equal(rows, np.arange(n)):
        raise ConfigError("hyperparameter tuning requires a contiguous prefix of training rows")
    if n >= panel.n_periods:
        raise ConfigError("tuning needs at least one period outside the training prefix")
    return dataclasses.replace(panel, t0=n)


@dataclass(frozen=True)
class StandardizedEnet:
    """Elastic-net fit on internally standardized predictors, expressed back
    on the raw scale so prediction and reporting stay uniform."""

    inner: object
    scales: np.ndarray
    omega: np.ndarray
    mu: float
    training_rows: np.ndarray

    tag = "enet"

    def predict_matrix(self, X) -> np.ndarray:
        return self.mu + np.asarray(X, dtype=float) @ self.omega

    def to_dict(self) -> dict:
        payload = self.inner.to_dict()
        payload["weights"] = [float(w) for w in self.omega]
        payload["intercept"] = float(self.mu)
        payload["hyperparameters"]["standardize"] = True
        return payload

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)


def _scaled_panel(panel: Panel, scales: np.ndarray) -> Panel:
    return Panel(
        times=panel.times,
        treated=panel.treated,
        controls=panel.controls / scales,
        control_names=panel.control_names,
        treated_name=panel.treated_name,
        t0=panel.t0,
    )


def _fit_enet_spec(panel: Panel, rows, spec: EstimatorSpec, require_pre: bool):
    lam, alpha_mix = spec.enet_lambda, spec.enet_alpha_mix
    if spec.tune:
        view = _tuning_view(panel, rows)
        grid = spec.enet_grid
        if grid is None:
            est_rows = np.arange(view.t0)
            grid = default_enet_grid(view, est_rows)
        chosen = tune_enet(view, spec.split, grid, tol=spec.enet_tol, max_iter=spec.enet_max_iter)
        lam, alpha_mix = chosen.lam, chosen.alpha_mix
    return fit_enet(panel, rows, lam, alpha_mix,
                    tol=spec.enet_tol, max_iter=spec.enet_max_iter, require_pre=require_pre)


def resolve_tuned_spec(panel: Panel, spec: EstimatorSpec) -> EstimatorSpec:
    """Freeze a tuning spec into concrete hyperparameters.

    Runs the tuning protocol on the pre-onset rows and returns an equivalent
    spec with ``tune=False`` and the winning values filled in. Procedures
    that refit the estimator on unusual row sets (permutation tests,
    backdated onsets) call this first so every refit uses the same
    hyperparameters as the main analysis.
    """
    if not spec.tune:
        return spec
    model = fit_estimator(panel, panel.pre_rows, spec)
    if spec.kind == "forest":
        return replace(spec, tune=False,
                       forest=replace(spec.forest, mtry=model.config.mtry))
    if spec.kind == "enet":
        inner = model.inner if isinstance(model, StandardizedEnet) else model
        return replace(spec, tune=False, enet_lambda=inner.lam, enet_alpha_mix=inner.alpha_mix)
    return replace(spec, tune=False)


def fit_estimator(panel: Panel, rows, spec: EstimatorSpec, *, require_pre: bool = True):
    """Fit the estimator described by ``spec`` on the given panel rows.

    With ``tune=True`` the hyperparameters are selected on a temporal split
    of the rows and the winning configuration is refit on all of them.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if spec.kind == "forest":
        config = spec.forest
        if spec.tune:
            view = _tuning_view(panel, rows)
            grid = spec.mtry_grid if spec.mtry_grid is not None else tuple(range(1, panel.n_controls + 1))
            config = tune_mtry(view, spec.split, config, grid)
        return fit_forest(panel, rows, config, require_pre=require_pre)
    if spec.kind == "scm":
        return fit_scm(panel, rows, tol=spec.scm_tol, max_iter=spec.scm_max_iter,
                       require_pre=require_pre)
    if not spec.enet_standardize:
        return _fit_enet_spec(panel, rows, spec, require_pre)
    scales = panel.controls[rows].std(axis=0, ddof=1)
    scales = np.where(scales > 0, scales, 1.0)
    inner = _fit_enet_spec(_scaled_panel(panel, scales), rows, spec, require_pre)
    return StandardizedEnet(
        inner=inner,
        scales=scales,
        omega=inner.omega / scales,
        mu=inner.mu,
        training_rows=inner.training_rows,
    )
