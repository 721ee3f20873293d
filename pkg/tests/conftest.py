import numpy as np
import pytest

from treesynth.panel import Panel


def make_panel(controls, treated, t0, treated_name="y"):
    """Panel from raw arrays with synthetic week labels."""
    controls = np.asarray(controls, dtype=float)
    treated = np.asarray(treated, dtype=float)
    if controls.ndim == 1:
        controls = controls[:, None]
    times = np.datetime64("2000-01-03") + 7 * np.arange(len(treated))
    names = tuple(f"c{j + 1:02d}" for j in range(controls.shape[1]))
    return Panel(
        times=times,
        treated=treated,
        controls=controls,
        control_names=names,
        treated_name=treated_name,
        t0=t0,
    )


@pytest.fixture
def small_panel():
    rng = np.random.default_rng(577)
    controls = rng.normal(0.0, 1.0, size=(40, 3))
    treated = controls @ np.array([0.5, 0.3, 0.2]) + rng.normal(0.0, 0.1, 40)
    return make_panel(controls, treated, t0=30)
