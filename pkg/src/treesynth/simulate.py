"""Synthetic panel generators with known regression function and effect.

Controls follow independent AR(1) processes with bounded uniform
innovations (stationary, short-memory, bounded support), the treated
outcome is a known function of the contemporaneous controls plus bounded
noise, and a constant effect is added after the onset. Because the
generator knows the regression function and the injected effect, it
doubles as the oracle for the consistency and effect-recovery tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ConfigError
from .panel import Panel, WEEK_COLUMN

DGPS = ("linear", "interaction")

_EPOCH = np.datetime64("2000-01-03")  # arbitrary Monday anchor for synthetic week labels

_BURN_IN = 100


@dataclass(frozen=True)
class SimulatedPanel:
    """A generated panel plus everything needed to score an estimator."""

    panel: Panel
    dgp: str
    beta: tuple
    tau: float
    noise: float
    ar_coef: float
    seed: int
    baseline: np.ndarray  # no-intervention outcome, length T

    def true_regression(self, x) -> float:
        return regression_value(self.dgp, self.beta, x)

    def truth_dict(self) -> dict:
        return {
            "dgp": self.dgp,
            "beta": [float(b) for b in self.beta],
            "tau": self.tau,
            "noise": self.noise,
            "ar_coef": self.ar_coef,
            "seed": self.seed,
        }


def regression_value(dgp: str, beta, x) -> float:
    """Evaluate the known regression function at one control vector."""
    x = np.asarray(x, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if dgp == "linear":
        return float(beta @ x[: beta.size])
    if dgp == "interaction":
        return float(beta[0] * x[0] + beta[1] * x[1] + beta[2] * x[0] * x[1])
    raise ConfigError(f"unknown dgp {dgp!r}; expected one of {DGPS}")


def _ar1_controls(rng, n_periods: int, n_controls: int, ar_coef: float) -> np.ndarray:
    innovations = rng.uniform(-1.0, 1.0, size=(_BURN_IN + n_periods, n_controls))
    x = np.zeros((_BURN_IN + n_periods, n_controls))
    for t in range(1, _BURN_IN + n_periods):
        x[t] = ar_coef * x[t - 1] + innovations[t]
    return x[_BURN_IN:]


def simulate_panel(dgp: str = "interaction", n_controls: int = 2, t0: int = 101,
                   t_post: int = 48, beta=(1.0, 1.0, 0.5), tau: float = 10.0,
                   noise: float = 1.0, ar_coef: float = 0.5, seed: int = 0) -> SimulatedPanel:
    """Generate a panel from a known data-generating process.

    Parameters
    ----------
    dgp : str
        ``"linear"`` (outcome is a linear combination of the first
        ``len(beta)`` controls) or ``"interaction"`` (two relevant controls
        entering with an interaction term; further controls are noise).
    n_controls, t0, t_post : int
        Donor-pool size and pre/post lengths.
    beta : sequence of float
        Regression coefficients; for the interaction process,
        ``(b1, b2, b12)``.
    tau : float
        Constant effect added to the treated outcome after the onset.
    noise : float
        Half-width of the uniform outcome noise.
    ar_coef : float
        AR(1) coefficient of the control processes, in [0, 1).
    """
    if dgp not in DGPS:
        raise ConfigError(f"unknown dgp {dgp!r}; expected one of {DGPS}")
    if dgp == "interaction" and n_controls < 2:
        raise ConfigError("interaction dgp needs at least two controls")
    if dgp == "linear" and len(beta) > n_controls:
        raise ConfigError("linear dgp has more coefficients than controls")
    if not (0.0 <= ar_coef < 1.0):
        raise ConfigError(f"ar_coef must lie in [0, 1); got {ar_coef}")
    if t0 < 2 or t_post < 1:
        raise ConfigError("need t0 >= 2 and t_post >= 1")

    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    n_periods = t0 + t_post
    controls = _ar1_controls(rng, n_periods, n_controls, ar_coef)
    signal = np.array([regression_value(dgp, beta, controls[t]) for t in range(n_periods)])
    baseline = signal + rng.uniform(-noise, noise, size=n_periods)
    treated = baseline.copy()
    treated[t0:] += tau

    times = _EPOCH + 7 * np.arange(n_periods)
    names = tuple(f"c{j + 1:02d}" for j in range(n_controls))
    panel = Panel(
        times=times,
        treated=treated,
        controls=controls,
        control_names=names,
        treated_name="treated",
        t0=t0,
    )
    return SimulatedPanel(
        panel=panel,
        dgp=dgp,
        beta=tuple(float(b) for b in beta),
        tau=float(tau),
        noise=float(noise),
        ar_coef=float(ar_coef),
        seed=int(seed),
        baseline=baseline,
    )


def panel_to_frame(panel: Panel) -> pd.DataFrame:
    """Wide weekly frame (treated first) with a proper week_start index."""
    frame = panel.to_frame()
    frame.index.name = WEEK_COLUMN
    return frame
