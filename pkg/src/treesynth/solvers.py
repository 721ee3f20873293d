"""Comparator weight estimators: simplex-constrained least squares and elastic net.

Both estimators regress the treated outcome on the control outcomes over
the pre-onset periods. The classic variant constrains the weights to the
probability simplex (nonnegative, summing to one, no intercept); the
regularized variant drops those constraints, adds an intercept, and
penalizes the weights with a mixed l1/l2 term.

The elastic net objective is parameterized glmnet-style,

    (1 / (2 n)) * sum_t (y_t - mu - <w, x_t>)^2
        + lam * ((1 - alpha_mix) / 2 * sum_i w_i^2 + alpha_mix * sum_i |w_i|),

on raw (unstandardized) predictors; centering is used only to absorb the
intercept. Both solvers are deterministic: identical inputs give
bit-identical outputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EstimationError
from .panel import Panel, SplitSpec, temporal_split


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Exact Euclidean projection of ``v`` onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u - css / np.arange(1, n + 1) > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _design(panel: Panel, rows, *, require_pre: bool = True):
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size < 1:
        raise EstimationError("need at least one training row")
    if require_pre and rows.max() >= panel.t0:
        raise EstimationError("training rows extend past the pre-onset range")
    X = panel.controls[rows]
    y = panel.treated[rows]
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise EstimationError("non-finite values in the training data")
    return rows, X, y


@dataclass(frozen=True)
class ScmWeights:
    """Simplex-constrained least squares fit.

    ``omega`` lies exactly on the probability simplex (projection is the
    last operation applied). ``objective_trace`` holds the objective value
    at every accepted iterate, so it is non-increasing by construction.
    """

    omega: np.ndarray
    training_rows: np.ndarray
    objective: float
    objective_trace: np.ndarray
    tol: float
    max_iter: int

    tag = "scm"

    def __post_init__(self):
        for name in ("omega", "training_rows", "objective_trace"):
            arr = np.asarray(getattr(self, name))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def predict_matrix(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.omega

    def to_dict(self) -> dict:
        return {
            "estimator": self.tag,
            "weights": [float(w) for w in self.omega],
            "intercept": 0.0,
            "hyperparameters": {"tol": self.tol, "max_iter": self.max_iter},
            "objective": float(self.objective),
            "objective_trace_length": int(self.objective_trace.size),
            "training_rows": [int(t) for t in self.training_rows],
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)


def scm_objective(panel: Panel, rows, omega) -> float:
    rows = np.asarray(rows, dtype=np.int64)
    resid = panel.treated[rows] - panel.controls[rows] @ np.asarray(omega, dtype=float)
    return float(resid @ resid)


def fit_scm(panel: Panel, rows, tol: float = 1e-8, max_iter: int = 100000,
            *, require_pre: bool = True) -> ScmWeights:
    """Minimize the pre-onset squared error over the probability simplex.

    Projected gradient descent from the uniform weights with a backtracking
    line search, so the objective sequence is non-increasing; terminates
    when an accepted step improves the objective by less than ``tol``.
    """
    rows, X, y = _design(panel, rows, require_pre=require_pre)
    n_controls = X.shape[1]
    omega = np.full(n_controls, 1.0 / n_controls)
    if n_controls == 1:
        obj = scm_objective(panel, rows, [1.0])
        return ScmWeights(np.array([1.0]), rows, obj, np.array([obj]), tol, max_iter)

    gram = X.T @ X
    lipschitz = 2.0 * float(np.linalg.eigvalsh(gram)[-1])
    step0 = 1.0 / lipschitz if lipschitz > 0 else 1.0

    def objective(w):
        r = y - X @ w
        return float(r @ r)

    current = objective(omega)
    trace = [current]
    for _ in range(max_iter):
        grad = 2.0 * (gram @ omega - X.T @ y)
        step = step0
        candidate, value = None, None
        while step > 1e-20:
            trial = project_to_simplex(omega - step * grad)
            trial_value = objective(trial)
            if trial_value <= current:
                candidate, value = trial, trial_value
                break
            step /= 2.0
        if candidate is None:
            break
        improvement = current - value
        omega, current = candidate, value
        trace.append(current)
        if improvement < tol:
            break
    return ScmWeights(omega, rows, current, np.array(trace), tol, max_iter)


@dataclass(frozen=True)
class EnetFit:
    """Elastic-net weights with intercept."""

    mu: float
    omega: np.ndarray
    lam: float
    alpha_mix: float
    training_rows: np.ndarray
    n_sweeps: int
    tol: float
    max_iter: int

    tag = "enet"

    def __post_init__(self):
        for name in ("omega", "training_rows"):
            arr = np.asarray(getattr(self, name))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def predict_matrix(self, X) -> np.ndarray:
        return self.mu + np.asarray(X, dtype=float) @ self.omega

    def to_dict(self) -> dict:
        return {
            "estimator": self.tag,
            "weights": [float(w) for w in self.omega],
            "intercept": float(self.mu),
            "hyperparameters": {
                "lambda": self.lam,
                "alpha_mix": self.alpha_mix,
                "tol": self.tol,
                "max_iter": self.max_iter,
            },
            "objective_trace_length": int(self.n_sweeps),
            "training_rows": [int(t) for t in self.training_rows],
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)


def _soft_threshold(z: float, gamma: float) -> float:
    if z > gamma:
        return z - gamma
    if z < -gamma:
        return z + gamma
    return 0.0


def fit_enet(panel: Panel, rows, lam: float, alpha_mix: float,
             tol: float = 1e-8, max_iter: int = 100000,
             *, require_pre: bool = True) -> EnetFit:
    """Cyclic coordinate descent for the elastic net with intercept.

    Data are centered so the intercept drops out of the coordinate updates
    and is recovered afterwards as ``mean(y) - <w, mean(X)>``; the penalty
    applies to the raw-scale coefficients (no standardization). Convergence
    is declared when the largest coordinate change in a sweep falls below
    ``tol``.
    """
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0; got {lam}")
    if not (0.0 <= alpha_mix <= 1.0):
        raise ConfigError(f"alpha_mix must lie in [0, 1]; got {alpha_mix}")
    rows, X, y = _design(panel, rows, require_pre=require_pre)
    n, n_controls = X.shape
    x_mean = X.mean(axis=0)
    y_mean = float(y.mean())
    Xc = X - x_mean
    yc = y - y_mean
    col_sq = (Xc * Xc).sum(axis=0) / n

    omega = np.zeros(n_controls)
    resid = yc.copy()
    l1 = lam * alpha_mix
    l2 = lam * (1.0 - alpha_mix)
    sweeps = 0
    for sweeps in range(1, max_iter + 1):
        max_change = 0.0
        for j in range(n_controls):
            denom = col_sq[j] + l2
            if denom <= 0.0:
                new = 0.0
            else:
                rho = float(Xc[:, j] @ resid) / n + col_sq[j] * omega[j]
                new = _soft_threshold(rho, l1) / denom
            change = new - omega[j]
            if change != 0.0:
                resid -= Xc[:, j] * change
                omega[j] = new
            max_change = max(max_change, abs(change))
        if not np.isfinite(max_change):
            raise EstimationError("elastic net diverged (non-finite update)")
        if max_change < tol:
            break
    mu = y_mean - float(x_mean @ omega)
    return EnetFit(mu, omega, lam, alpha_mix, rows, sweeps, tol, max_iter)


def enet_objective(panel: Panel, rows, fit: EnetFit) -> float:
    rows = np.asarray(rows, dtype=np.int64)
    X = panel.controls[rows]
    y = panel.treated[rows]
    resid = y - fit.mu - X @ fit.omega
    penalty = fit.lam * (
        (1.0 - fit.alpha_mix) / 2.0 * float(fit.omega @ fit.omega)
        + fit.alpha_mix * float(np.sum(np.abs(fit.omega)))
    )
    return float(resid @ resid) / (2.0 * rows.size) + penalty


def enet_kkt_violation(panel: Panel, rows, fit: EnetFit) -> float:
    """Largest stationarity violation of an elastic-net fit.

    For nonzero coordinates this is the absolute subgradient of the full
    objective; for zero coordinates, the amount by which the smooth
    gradient exceeds the l1 threshold.
    """
    rows = np.asarray(rows, dtype=np.int64)
    X = panel.controls[rows]
    y = panel.treated[rows]
    n = rows.size
    x_mean = X.mean(axis=0)
    Xc = X - x_mean
    yc = y - y.mean()
    grad = -(Xc.T @ (yc - Xc @ fit.omega)) / n + fit.lam * (1.0 - fit.alpha_mix) * fit.omega
    l1 = fit.lam * fit.alpha_mix
    worst = 0.0
    for j in range(X.shape[1]):
        if fit.omega[j] != 0.0:
            worst = max(worst, abs(grad[j] + l1 * math.copysign(1.0, fit.omega[j])))
        else:
            worst = max(worst, max(0.0, abs(grad[j]) - l1))
    return worst


def default_enet_grid(panel: Panel, rows) -> list[tuple[float, float]]:
    """Default 24-point tuning grid: 6 log-spaced lambdas x 4 mixing values.

    The largest lambda is the smallest value that zeroes every weight at
    ``alpha_mix=1``; the smallest is three decades below it.
    """
    rows = np.asarray(rows, dtype=np.int64)
    X = panel.controls[rows]
    y = panel.treated[rows]
    Xc = X - X.mean(axis=0)
    yc = y - y.mean()
    lam_max = float(np.max(np.abs(Xc.T @ yc)) / rows.size)
    if lam_max <= 0:
        lam_max = 1.0
    lams = np.geomspace(lam_max, lam_max * 1e-3, 6)
    return [(float(lam), a) for lam in lams for a in (0.1, 0.5, 0.9, 1.0)]


def tune_enet(panel: Panel, split: SplitSpec, grid=None,
              tol: float = 1e-8, max_iter: int = 100000) -> EnetFit:
    """Select (lambda, alpha_mix) by validation RMSPE on the temporal split.

    Candidates are scanned from most to least regularized so that ties go
    to the larger lambda; the winning pair is refit on the estimation block
    and returned.
    """
    est, val = temporal_split(panel, split)
    if grid is None:
        grid = default_enet_grid(panel, est)
    grid = list(grid)
    if not grid:
        raise ConfigError("elastic net grid must be non-empty")
    ordered = sorted(grid, key=lambda p: (-p[0], -p[1]))
    best_fit, best_score = None, np.inf
    X_val = panel.controls[val]
    y_val = panel.treated[val]
    for lam, alpha_mix in ordered:
        fit = fit_enet(panel, est, lam, alpha_mix, tol=tol, max_iter=max_iter)
        pred = fit.predict_matrix(X_val)
        score = float(np.sqrt(np.mean((y_val - pred) ** 2)))
        if score < best_score:
            best_fit, best_score = fit, score
    return best_fit
