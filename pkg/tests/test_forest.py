import json
import math

import numpy as np
import pytest

from treesynth.errors import ConfigError, DataError, EstimationError
from treesynth.forest import (
    ForestConfig,
    ForestModel,
    TreeNode,
    fit_forest,
    fit_tree,
    permutation_importance,
    tune_mtry,
    validate_model,
)
from treesynth.panel import SplitSpec
from treesynth.simulate import simulate_panel

from conftest import make_panel


def brute_force_root_split(panel, rows, k, alpha):
    """Enumerate every admissible single split and return the best
    (direction, threshold, sse), scanning directions and thresholds in
    ascending order with strict improvement (the documented tie rule)."""
    rows = np.asarray(rows)
    X = panel.controls[rows]
    y = panel.treated[rows]
    n = rows.size
    c_min = max(k, math.ceil(alpha * n - 1e-9))
    best = None
    for d in range(X.shape[1]):
        values = np.sort(np.unique(X[:, d]))
        for a, b in zip(values[:-1], values[1:]):
            thr = (a + b) / 2.0
            left = X[:, d] <= thr
            n_left = int(left.sum())
            if n_left < c_min or n - n_left < c_min:
                continue
            yl, yr = y[left], y[~left]
            sse = float(((yl - yl.mean()) ** 2).sum() + ((yr - yr.mean()) ** 2).sum())
            if best is None or sse < best[2] - 1e-10 * (1.0 + abs(best[2])):
                best = (d, thr, sse)
    return best


def tree_sse(root, panel, rows):
    rows = np.asarray(rows)
    pred = np.array([root.predict(x) for x in panel.controls[rows]])
    return float(((panel.treated[rows] - pred) ** 2).sum())


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            ForestConfig(alpha=0.5)
        with pytest.raises(ConfigError):
            ForestConfig(k=0)
        with pytest.raises(ConfigError):
            ForestConfig(k=5, m_leaf=9)
        with pytest.raises(ConfigError):
            ForestConfig(bagging="jackknife")

    def test_default_mtry_is_rounded_root(self):
        cfg = ForestConfig().resolve(n_controls=11, n_rows=80, t0=80)
        assert cfg.mtry == 3
        cfg = ForestConfig().resolve(n_controls=2, n_rows=80, t0=80)
        assert cfg.mtry == 1

    def test_mtry_above_n_rejected(self):
        with pytest.raises(ConfigError):
            ForestConfig(mtry=4).resolve(n_controls=3, n_rows=50, t0=50)


class TestFitTree:
    def test_identical_inputs_make_a_single_leaf(self):
        controls = np.ones((8, 2))
        treated = np.array([1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0])
        panel = make_panel(controls, treated, t0=6)
        root = fit_tree(panel, np.arange(6), ForestConfig(k=1, mtry=2, seed=0))
        assert root.is_leaf
        assert root.value == pytest.approx(treated[:6].mean())

    def test_one_dimensional_step_function(self):
        # two flat plateaus: the best split separates them at 2.5
        panel = make_panel(np.array([1.0, 2.0, 3.0, 4.0, 9.0]),
                           np.array([0.0, 0.0, 10.0, 10.0, 0.0]), t0=4)
        cfg = ForestConfig(alpha=0.25, k=1, m_leaf=2, mtry=1, seed=0)
        root = fit_tree(panel, np.arange(4), cfg)
        assert root.split_direction == 0
        assert root.split_position == 2.5
        assert root.left.is_leaf and root.left.value == 0.0 and root.left.n_members == 2
        assert root.right.is_leaf and root.right.value == 10.0 and root.right.n_members == 2

    def test_root_split_matches_brute_force(self):
        rng = np.random.default_rng(99)
        for trial in range(60):
            n = int(rng.integers(4, 13))
            n_controls = int(rng.integers(1, 3))
            controls = rng.uniform(-2, 2, size=(n + 2, n_controls))
            treated = rng.uniform(-5, 5, size=n + 2)
            panel = make_panel(controls, treated, t0=n)
            rows = np.arange(n)
            alpha = float(rng.uniform(0.05, 0.3))
            cfg = ForestConfig(alpha=alpha, k=1, mtry=n_controls, seed=trial)
            root = fit_tree(panel, rows, cfg)
            expected = brute_force_root_split(panel, rows, k=1, alpha=alpha)
            assert not root.is_leaf
            assert root.split_direction == expected[0]
            assert root.split_position == expected[1]
            left = panel.controls[rows, root.split_direction] <= root.split_position
            got_sse = float(
                ((treated[rows][left] - treated[rows][left].mean()) ** 2).sum()
                + ((treated[rows][~left] - treated[rows][~left].mean()) ** 2).sum()
            )
            assert got_sse == pytest.approx(expected[2], abs=1e-9)

    def test_too_few_rows_rejected(self, small_panel):
        with pytest.raises(EstimationError):
            fit_tree(small_panel, np.arange(3), ForestConfig(k=5))

    def test_post_onset_rows_rejected(self, small_panel):
        with pytest.raises(EstimationError):
            fit_tree(small_panel, np.arange(small_panel.n_periods), ForestConfig(k=2))

    def test_interaction_beats_additive_linear_fit(self):
        # a deep tree can exploit the product term that a linear model misses
        sim = simulate_panel(dgp="interaction", n_controls=2, t0=200, t_post=10,
                             beta=(1.0, 1.0, 2.0), tau=0.0, noise=0.2, seed=42)
        panel = sim.panel
        rows = panel.pre_rows
        cfg = ForestConfig(alpha=0.05, k=1, mtry=2, seed=7)
        root = fit_tree(panel, rows, cfg)
        X = np.column_stack([np.ones(rows.size), panel.controls[rows]])
        beta, *_ = np.linalg.lstsq(X, panel.treated[rows], rcond=None)
        linear_sse = float(((panel.treated[rows] - X @ beta) ** 2).sum())
        assert tree_sse(root, panel, rows) < linear_sse


class TestForest:
    def test_single_tree_forest_equals_its_tree(self, small_panel):
        cfg = ForestConfig(k=2, mtry=3, n_trees=1, seed=5)
        model = fit_forest(small_panel, small_panel.pre_rows, cfg)
        stream = np.random.default_rng(np.random.SeedSequence(5).spawn(1)[0])
        tree = fit_tree(small_panel, small_panel.pre_rows, cfg, rng=stream)
        for x in small_panel.controls[:10]:
            assert model.predict(x) == tree.predict(x)

    def test_constant_outcome_predicts_the_constant(self):
        panel = make_panel(np.random.default_rng(1).normal(0, 1, (30, 2)),
                           np.full(30, 4.25), t0=25)
        model = fit_forest(panel, panel.pre_rows, ForestConfig(k=2, n_trees=5, seed=3))
        for x in panel.controls:
            assert model.predict(x) == 4.25

    def test_full_mtry_without_bagging_gives_identical_trees(self, small_panel):
        cfg = ForestConfig(k=2, mtry=3, n_trees=7, seed=11)
        model = fit_forest(small_panel, small_panel.pre_rows, cfg)
        queries = small_panel.controls[:8]
        first = [model.trees[0].predict(x) for x in queries]
        for tree in model.trees[1:]:
            assert [tree.predict(x) for x in queries] == first
        assert [model.predict(x) for x in queries] == pytest.approx(first)

    def test_prediction_is_exact_mean_of_trees(self, small_panel):
        cfg = ForestConfig(k=2, mtry=1, n_trees=9, seed=2)
        model = fit_forest(small_panel, small_panel.pre_rows, cfg)
        for x in small_panel.controls[:5]:
            per_tree = [t.predict(x) for t in model.trees]
            assert model.predict(x) == math.fsum(per_tree) / len(per_tree)

    def test_prediction_within_training_outcome_range(self, small_panel):
        cfg = ForestConfig(k=2, mtry=2, n_trees=10, seed=6)
        rows = small_panel.pre_rows
        model = fit_forest(small_panel, rows, cfg)
        lo, hi = small_panel.treated[rows].min(), small_panel.treated[rows].max()
        rng = np.random.default_rng(0)
        for x in rng.uniform(-50, 50, size=(20, 3)):  # far outside the training hull
            assert lo <= model.predict(x) <= hi

    def test_structural_invariants_on_random_fits(self):
        rng = np.random.default_rng(123)
        for trial in range(15):
            t0 = int(rng.integers(30, 120))
            n_controls = int(rng.integers(2, 6))
            k = int(rng.integers(1, 6))
            sim = simulate_panel(dgp="linear", n_controls=n_controls,
                                 beta=tuple(rng.uniform(-1, 1, n_controls)),
                                 t0=t0, t_post=5, tau=0.0, noise=1.0, seed=trial)
            cfg = ForestConfig(alpha=float(rng.uniform(0.05, 0.3)), k=k,
                               m_leaf=int(rng.integers(2 * k, 4 * k + 2)),
                               mtry=int(rng.integers(1, n_controls + 1)),
                               n_trees=3, seed=trial)
            model = fit_forest(sim.panel, sim.panel.pre_rows, cfg)
            assert validate_model(model) == []

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(17)
        controls = rng.uniform(-2, 2, size=(60, 3))
        treated = controls[:, 0] - 2 * controls[:, 1] + rng.uniform(-0.5, 0.5, 60)
        panel = make_panel(controls, treated, t0=50)
        transformed = controls.copy()
        transformed[:, 1] = transformed[:, 1] ** 3  # strictly monotone
        panel_t = make_panel(transformed, treated, t0=50)
        cfg = ForestConfig(k=2, mtry=2, n_trees=6, seed=21)
        model = fit_forest(panel, panel.pre_rows, cfg)
        model_t = fit_forest(panel_t, panel_t.pre_rows, cfg)
        # split positions are order statistics, so the fitted partition of the
        # training points is identical and so are their predictions
        for i in panel.pre_rows:
            assert model.predict(controls[i]) == model_t.predict(transformed[i])

    def test_block_bagging_changes_trees_and_keeps_invariants(self, small_panel):
        cfg = ForestConfig(k=2, mtry=3, n_trees=6, seed=11, bagging="block", block_length=3)
        model = fit_forest(small_panel, small_panel.pre_rows, cfg)
        assert validate_model(model) == []
        queries = small_panel.controls[:8]
        preds = {tuple(round(t.predict(x), 12) for x in queries) for t in model.trees}
        assert len(preds) > 1  # resampling de-correlates the trees

    def test_same_seed_reproduces_fit(self, small_panel):
        cfg = ForestConfig(k=2, mtry=2, n_trees=4, seed=33)
        a = fit_forest(small_panel, small_panel.pre_rows, cfg)
        b = fit_forest(small_panel, small_panel.pre_rows, cfg)
        assert a.to_dict() == b.to_dict()


class TestRouting:
    def test_four_leaf_walkthrough(self):
        # ask about direction 1 first (is it above 3?), then direction 0 (above 2?)
        subgroup_means = {"s1": 10.0, "s2": 20.0, "s3": 30.0, "s4": 40.0}
        left = TreeNode(6, split_direction=0, split_position=2.0,
                        left=TreeNode(3, member_times=np.array([0, 1, 2]), value=subgroup_means["s1"]),
                        right=TreeNode(3, member_times=np.array([3, 4, 5]), value=subgroup_means["s2"]))
        right = TreeNode(4, split_direction=0, split_position=5.0,
                         left=TreeNode(2, member_times=np.array([6, 7]), value=subgroup_means["s3"]),
                         right=TreeNode(2, member_times=np.array([8, 9]), value=subgroup_means["s4"]))
        root = TreeNode(10, split_direction=1, split_position=3.0, left=left, right=right)
        assert root.predict(np.array([1.5, 2.0])) == subgroup_means["s1"]
        assert root.predict(np.array([2.5, 2.0])) == subgroup_means["s2"]
        assert root.predict(np.array([4.0, 9.0])) == subgroup_means["s3"]
        assert root.predict(np.array([7.0, 9.0])) == subgroup_means["s4"]


class TestSerialization:
    def test_round_trip(self, small_panel, tmp_path):
        cfg = ForestConfig(k=2, mtry=2, n_trees=4, seed=8)
        model = fit_forest(small_panel, small_panel.pre_rows, cfg)
        path = tmp_path / "forest.json"
        model.save(path)
        loaded = ForestModel.load(path)
        assert loaded.config == model.config
        for x in small_panel.controls[:10]:
            assert loaded.predict(x) == model.predict(x)

    def test_load_validates_invariants(self, small_panel, tmp_path):
        cfg = ForestConfig(k=2, mtry=2, n_trees=1, seed=8)
        model = fit_forest(small_panel, small_panel.pre_rows, cfg)
        payload = model.to_dict()

        def first_leaf(node):
            while "value" not in node:
                node = node["left"]
            return node

        leaf = first_leaf(payload["trees"][0])
        leaf["n"] = 1  # below k
        leaf["members"] = leaf["members"][:1]
        with pytest.raises(DataError, match="below k"):
            ForestModel.from_dict(payload)

    def test_unknown_format_rejected(self):
        with pytest.raises(DataError, match="format"):
            ForestModel.from_dict({"format": "something-else"})


class TestTuneMtry:
    def test_singleton_grid_short_circuits(self, small_panel):
        cfg = tune_mtry(small_panel, SplitSpec(0.8), ForestConfig(k=2, n_trees=3, seed=1), [3])
        assert cfg.mtry == 3

    def test_grid_values_validated(self, small_panel):
        with pytest.raises(ConfigError):
            tune_mtry(small_panel, SplitSpec(0.8), ForestConfig(), [0, 2])
        with pytest.raises(ConfigError):
            tune_mtry(small_panel, SplitSpec(0.8), ForestConfig(), [])

    def test_ties_resolve_to_smaller_mtry(self):
        # a constant outcome makes every candidate score identically
        panel = make_panel(np.random.default_rng(3).normal(0, 1, (30, 3)),
                           np.full(30, 2.0), t0=25)
        cfg = tune_mtry(panel, SplitSpec(0.8), ForestConfig(k=2, n_trees=3, seed=0), [1, 2, 3])
        assert cfg.mtry == 1

    def test_tuned_never_loses_to_single_direction(self):
        # the grid contains mtry=1, so the winner's validation error is <= its
        sim = simulate_panel(dgp="linear", n_controls=10,
                             beta=tuple(np.linspace(1.0, 0.1, 10)),
                             t0=120, t_post=10, tau=0.0, noise=0.5, seed=14)
        panel = sim.panel
        base = ForestConfig(k=3, n_trees=10, seed=4)
        split = SplitSpec(0.8)
        tuned = tune_mtry(panel, split, base, list(range(1, 11)))

        def validation_rmspe(mtry):
            from treesynth.panel import temporal_split

            est, val = temporal_split(panel, split)
            from dataclasses import replace

            model = fit_forest(panel, est, replace(base, mtry=mtry))
            pred = model.predict_matrix(panel.controls[val])
            return float(np.sqrt(np.mean((panel.treated[val] - pred) ** 2)))

        assert validation_rmspe(tuned.mtry) <= validation_rmspe(1)


class TestPermutationImportance:
    def test_unused_direction_scores_exactly_zero(self):
        rng = np.random.default_rng(31)
        controls = np.column_stack([rng.uniform(-2, 2, 50), np.full(50, 3.0)])
        treated = controls[:, 0] + rng.uniform(-0.1, 0.1, 50)
        panel = make_panel(controls, treated, t0=40)
        model = fit_forest(panel, panel.pre_rows, ForestConfig(k=2, mtry=2, n_trees=5, seed=0))
        scores = permutation_importance(model, panel, panel.pre_rows, n_repeats=5, rng=1)
        assert scores[1] == 0.0
        assert scores[0] > 0.0

    def test_relevant_direction_dominates(self):
        rng = np.random.default_rng(40)
        controls = rng.uniform(-2, 2, size=(150, 6))
        treated = controls[:, 0] + rng.uniform(-0.2, 0.2, 150)
        panel = make_panel(controls, treated, t0=120)
        model = fit_forest(panel, panel.pre_rows, ForestConfig(k=3, mtry=3, n_trees=30, seed=9))
        scores = permutation_importance(model, panel, panel.pre_rows, n_repeats=50, rng=2)
        assert np.argmax(scores) == 0
        assert scores[0] > max(scores[1:]) * 3

    def test_duplicated_relevant_direction_dilutes_importance(self):
        rng = np.random.default_rng(50)
        base = rng.uniform(-2, 2, size=(150, 4))
        noise = rng.uniform(-0.2, 0.2, 150)
        # single relevant control
        single = base.copy()
        treated = single[:, 0] + noise
        panel_single = make_panel(single, treated, t0=120)
        # same process with the relevant control duplicated into column 1
        dup = base.copy()
        dup[:, 1] = dup[:, 0]
        panel_dup = make_panel(dup, dup[:, 0] + noise, t0=120)
        cfg = ForestConfig(k=3, mtry=2, n_trees=30, seed=13)
        single_scores = permutation_importance(
            fit_forest(panel_single, panel_single.pre_rows, cfg), panel_single,
            panel_single.pre_rows, n_repeats=30, rng=3)
        dup_scores = permutation_importance(
            fit_forest(panel_dup, panel_dup.pre_rows, cfg), panel_dup,
            panel_dup.pre_rows, n_repeats=30, rng=3)
        assert dup_scores[0] < single_scores[0]
        assert dup_scores[1] < single_scores[0]

    def test_bad_repeats_rejected(self, small_panel):
        model = fit_forest(small_panel, small_panel.pre_rows, ForestConfig(k=2, n_trees=2, seed=1))
        with pytest.raises(ConfigError):
            permutation_importance(model, small_panel, small_panel.pre_rows, n_repeats=0, rng=1)
