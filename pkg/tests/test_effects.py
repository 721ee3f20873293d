import numpy as np
import pytest

from treesynth.effects import (
    CounterfactualFit,
    ate_hat,
    ate_naive,
    block_bootstrap_ci,
    counterfactual,
    effect_report,
    fit_metrics,
)
from treesynth.errors import ConfigError, LeakageError

from conftest import make_panel


class StubModel:
    """Minimal fitted-estimator stand-in with fixed predictions."""

    tag = "forest"

    def __init__(self, predictions, training_rows):
        self.predictions = np.asarray(predictions, dtype=float)
        self.training_rows = np.asarray(training_rows)

    def predict_matrix(self, X):
        return self.predictions[: len(X)]


def make_fit(gaps, t0, predictions=None):
    gaps = np.asarray(gaps, dtype=float)
    T = gaps.size
    predictions = np.zeros(T) if predictions is None else np.asarray(predictions, dtype=float)
    observed = predictions + gaps
    times = np.datetime64("2000-01-03") + 7 * np.arange(T)
    return CounterfactualFit(times=times, observed=observed, predictions=predictions,
                             gaps=gaps, estimator_tag="forest", t0=t0)


class TestCounterfactual:
    def test_perfect_pre_fit_gives_zero_pre_gaps(self):
        rng = np.random.default_rng(1)
        treated = rng.normal(10, 2, 20)
        panel = make_panel(rng.normal(0, 1, (20, 2)), treated, t0=15)
        model = StubModel(treated.copy(), np.arange(15))
        fit = counterfactual(panel, model)
        assert np.all(fit.pre_gaps == 0.0)

    def test_post_onset_training_is_refused(self):
        rng = np.random.default_rng(2)
        panel = make_panel(rng.normal(0, 1, (20, 2)), rng.normal(0, 1, 20), t0=15)
        model = StubModel(np.zeros(20), np.arange(16))
        with pytest.raises(LeakageError):
            counterfactual(panel, model)

    def test_gap_identity(self):
        rng = np.random.default_rng(3)
        treated = rng.normal(0, 1, 12)
        panel = make_panel(rng.normal(0, 1, (12, 2)), treated, t0=8)
        preds = rng.normal(0, 1, 12)
        fit = counterfactual(panel, StubModel(preds, np.arange(8)))
        assert np.array_equal(fit.gaps, treated - preds)


class TestAteEstimators:
    def test_zero_post_gaps(self):
        assert ate_hat(make_fit([1.0, -1.0, 0.0, 0.0], t0=2)) == 0.0

    def test_simple_mean(self):
        assert ate_hat(make_fit([5.0, 2.0, 4.0, 6.0], t0=1)) == 4.0

    def test_naive_on_constant_series(self):
        panel = make_panel(np.zeros((10, 1)), np.full(10, 3.0), t0=6)
        assert ate_naive(panel) == 0.0

    def test_naive_arithmetic(self):
        panel = make_panel(np.zeros((4, 1)), np.array([1.0, 1.0, 3.0, 5.0]), t0=2)
        assert ate_naive(panel) == 3.0

    def test_translation_equivariance(self):
        rng = np.random.default_rng(4)
        treated = rng.normal(0, 1, 30)
        controls = rng.normal(0, 1, (30, 2))
        preds = rng.normal(0, 1, 30)
        base = counterfactual(make_panel(controls, treated, t0=20), StubModel(preds, np.arange(20)))
        shifted = treated.copy()
        shifted[20:] += 7.5
        moved = counterfactual(make_panel(controls, shifted, t0=20), StubModel(preds, np.arange(20)))
        assert ate_hat(moved) == pytest.approx(ate_hat(base) + 7.5, abs=1e-12)

    def test_constant_predictor_reduces_to_naive(self):
        # predictions equal to the pre-onset mean make the two estimators agree
        rng = np.random.default_rng(5)
        treated = rng.normal(5, 2, 25)
        panel = make_panel(rng.normal(0, 1, (25, 2)), treated, t0=18)
        preds = np.full(25, treated[:18].mean())
        fit = counterfactual(panel, StubModel(preds, np.arange(18)))
        assert ate_hat(fit) == pytest.approx(ate_naive(panel), abs=1e-12)


class TestBlockBootstrap:
    def test_constant_gaps(self):
        fit = make_fit(np.full(30, 2.5), t0=10)
        se, lo, hi = block_bootstrap_ci(fit, n_boot=200, block_length=3, seed=1)
        assert se == 0.0 and lo == 2.5 and hi == 2.5

    def test_full_length_blocks_match_shift_enumeration(self):
        rng = np.random.default_rng(6)
        gaps = rng.normal(1, 2, 28)
        t0 = 16
        fit = make_fit(gaps, t0=t0)
        n_post = 28 - t0
        se, lo, hi = block_bootstrap_ci(fit, n_boot=400, block_length=n_post, seed=2)
        post = gaps[t0:]
        shift_means = [np.roll(post, -s)[:n_post].mean() for s in range(n_post)]
        enum_se = float(np.std(shift_means, ddof=1))
        assert abs(se - enum_se) < 1e-12
        assert abs(lo - post.mean()) < 1e-12 and abs(hi - post.mean()) < 1e-12

    def test_unit_blocks_approach_iid_standard_error(self):
        rng = np.random.default_rng(21)
        gaps = rng.normal(3, 2, 70)
        fit = make_fit(gaps, t0=22)
        se, _, _ = block_bootstrap_ci(fit, n_boot=20000, block_length=1, seed=9)
        post = gaps[22:]
        closed_form = float(np.std(post, ddof=0) / np.sqrt(post.size))
        assert abs(se - closed_form) / closed_form < 0.05

    def test_invalid_block_length(self):
        fit = make_fit(np.arange(20.0), t0=15)
        with pytest.raises(ConfigError):
            block_bootstrap_ci(fit, n_boot=10, block_length=6, seed=0)
        with pytest.raises(ConfigError):
            block_bootstrap_ci(fit, n_boot=10, block_length=0, seed=0)

    def test_seed_reproducibility(self):
        fit = make_fit(np.random.default_rng(8).normal(0, 1, 40), t0=20)
        a = block_bootstrap_ci(fit, n_boot=500, block_length=3, seed=5)
        b = block_bootstrap_ci(fit, n_boot=500, block_length=3, seed=5)
        assert a == b


class TestEffectReport:
    def test_percentile_interval_brackets_the_estimate(self):
        rng = np.random.default_rng(9)
        treated = rng.normal(0, 1, 60)
        treated[40:] += 5
        panel = make_panel(rng.normal(0, 1, (60, 2)), treated, t0=40)
        preds = np.zeros(60)
        fit = counterfactual(panel, StubModel(preds, np.arange(40)))
        report = effect_report(panel, fit, n_boot=2000, block_length=3, seed=3)
        assert report.ci_low <= report.ate_hat <= report.ci_high
        assert report.normal_ci_low <= report.ate_hat <= report.normal_ci_high
        assert report.ate_hat == ate_hat(fit)
        assert report.ate_naive == ate_naive(panel)
        payload = report.to_dict()
        assert payload["boot_config"]["block_length"] == 3
        assert len(payload["per_period_gaps"]) == 20

    def test_normal_interval_uses_level(self):
        fit = make_fit(np.random.default_rng(10).normal(2, 1, 50), t0=25)
        panel = make_panel(np.zeros((50, 1)), fit.observed, t0=25)
        report = effect_report(panel, fit, n_boot=1000, block_length=2, level=0.95, seed=7)
        half = report.normal_ci_high - report.ate_hat
        assert half == pytest.approx(1.959964 * report.boot_se, rel=1e-4)


class TestFitMetrics:
    def test_zero_gaps_flag_ratios_undefined(self):
        fit = make_fit(np.zeros(20), t0=12, predictions=np.arange(20.0))
        m = fit_metrics(fit)
        assert m.pre_rmspe == 0.0 and m.post_mae == 0.0
        assert m.ratio_rmspe is None and m.ratio_mae is None
        assert m.to_dict()["ratio_rmspe"] is None

    def test_hand_computed_values(self):
        gaps = np.array([1.0, -1.0, 3.0, 3.0])
        preds = np.array([0.0, 0.0, 2.0, 8.0])
        fit = make_fit(gaps, t0=2, predictions=preds)
        m = fit_metrics(fit)
        assert m.pre_rmspe == 1.0 and m.pre_mae == 1.0
        assert m.post_rmspe == 3.0 and m.post_mae == 3.0
        assert m.ratio_rmspe == 3.0 and m.ratio_mae == 3.0
        assert m.avg_gap_pre == 0.0 and m.avg_gap_post == 3.0
        assert m.post_std == pytest.approx(np.std([2.0, 8.0], ddof=1))

    def test_explicit_ranges(self):
        gaps = np.concatenate([np.zeros(10), np.full(10, 2.0)])
        fit = make_fit(gaps, t0=10)
        m = fit_metrics(fit, pre_range=np.arange(5), post_range=np.arange(5, 10))
        assert m.post_rmspe == 0.0  # the overridden "post" block is still pre-onset
        m2 = fit_metrics(fit, pre_range=np.arange(10), post_range=np.arange(15, 20))
        assert m2.post_mae == 2.0
