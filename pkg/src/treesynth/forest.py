"""Constrained regression trees and forests over pre-onset panel data.

A tree recursively partitions the space of control outcomes and predicts,
for any control vector, the average treated outcome over the pre-onset
periods that fall in the same leaf. Growth is greedy CART (variance
reduction) under three structural constraints, surfaced in
:class:`ForestConfig`:

* ``k``: no leaf may hold fewer than ``k`` training periods;
* ``alpha``: each child of a split must hold at least ``ceil(alpha * n)``
  of its parent's ``n`` periods;
* ``m_leaf``: leaves must stay strictly below ``m_leaf`` periods. With the
  default ``m_leaf=None`` the bound is set to the panel's pre-onset length,
  so it never binds and trees grow to the ``k``/``alpha`` limits, which is
  the practical operating mode. Degenerate nodes (constant outcome, or no
  admissible boundary among the candidate directions) become leaves
  regardless of size and are flagged as such.

At every node only ``mtry`` randomly drawn candidate directions are
searched, so each control direction keeps a strictly positive selection
probability. Split positions are midpoints between consecutive distinct
sorted values; ties in the split criterion resolve toward the lower
direction index, then the lower threshold, making fits deterministic given
the seed.

A forest is an average of ``n_trees`` such trees grown from independent
random streams derived from one seed via ``numpy.random.SeedSequence(seed)
.spawn(n_trees)``; growing trees in parallel therefore cannot change the
result. By default every tree sees the same rows and trees differ only
through the direction subsampling; optional block-bootstrap bagging gives
each tree a circular block resample of the training rows instead.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError, EstimationError
from .panel import Panel, SplitSpec, temporal_split

# guard against float noise in alpha * n pushing ceil over an exact integer
_CEIL_GUARD = 1e-9

# relative margin a candidate split must beat the incumbent by; two split
# candidates that induce the same partition along different directions give
# mathematically equal criteria that differ by summation order, and the
# margin keeps such ties with the lower direction index
_TIE_TOL = 1e-10

FOREST_FORMAT = "treesynth-forest"
FOREST_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ForestConfig:
    """Hyperparameters of a constrained regression forest.

    Parameters
    ----------
    alpha : float
        Minimum child share of parent observations, in (0, 0.5).
    k : int
        Minimum leaf size, >= 1.
    m_leaf : int or None
        Strict upper bound on leaf size, >= 2k. ``None`` deactivates the
        bound (it is replaced by the pre-onset length at fit time).
    mtry : int or None
        Candidate split directions drawn per node. ``None`` resolves to
        ``round(sqrt(N))`` for a panel with N controls.
    n_trees : int
        Ensemble size.
    seed : int
        Master seed; per-tree streams are spawned from it.
    bagging : str
        ``"none"`` (all trees share the training rows) or ``"block"``
        (circular block-bootstrap resample per tree).
    block_length : int
        Block length used when ``bagging="block"``.
    """

    alpha: float = 0.05
    k: int = 5
    m_leaf: int | None = None
    mtry: int | None = None
    n_trees: int = 500
    seed: int = 0
    bagging: str = "none"
    block_length: int = 3

    def __post_init__(self):
        if not (0.0 < self.alpha < 0.5):
            raise ConfigError(f"alpha must lie in (0, 0.5); got {self.alpha}")
        if self.k < 1:
            raise ConfigError(f"k must be a positive integer; got {self.k}")
        if self.m_leaf is not None and self.m_leaf < 2 * self.k:
            raise ConfigError(
                f"m_leaf must be at least 2k = {2 * self.k}; got {self.m_leaf}"
            )
        if self.mtry is not None and self.mtry < 1:
            raise ConfigError(f"mtry must be >= 1; got {self.mtry}")
        if self.n_trees < 1:
            raise ConfigError(f"n_trees must be >= 1; got {self.n_trees}")
        if self.bagging not in ("none", "block"):
            raise ConfigError(f"bagging must be 'none' or 'block'; got {self.bagging!r}")
        if self.block_length < 1:
            raise ConfigError(f"block_length must be >= 1; got {self.block_length}")

    def resolve(self, n_controls: int, n_rows: int, t0: int) -> "ForestConfig":
        """Fill in the data-dependent defaults for a concrete fit."""
        mtry = self.mtry if self.mtry is not None else max(1, _round_half_up(math.sqrt(n_controls)))
        if mtry > n_controls:
            raise ConfigError(f"mtry={mtry} exceeds the number of controls N={n_controls}")
        m_leaf = self.m_leaf if self.m_leaf is not None else max(t0, n_rows, 2 * self.k)
        return replace(self, mtry=mtry, m_leaf=m_leaf)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _min_child_size(k: int, alpha: float, n: int) -> int:
    return max(k, int(math.ceil(alpha * n - _CEIL_GUARD)))


class TreeNode:
    """One node of a fitted tree.

    Internal nodes carry ``split_direction`` (control index), a
    ``split_position`` threshold and two children; routing sends a query
    left iff its coordinate is <= the threshold. Leaves carry the training
    periods they hold (``member_times``) and their mean treated outcome
    (``value``). ``forced`` marks leaves that terminated for data-shape
    reasons (constant outcome or no admissible boundary) and are therefore
    exempt from the maximum-size rule.
    """

    __slots__ = (
        "n_members",
        "split_direction",
        "split_position",
        "left",
        "right",
        "member_times",
        "value",
        "forced",
    )

    def __init__(self, n_members, split_direction=None, split_position=None,
                 left=None, right=None, member_times=None, value=None, forced=False):
        self.n_members = n_members
        self.split_direction = split_direction
        self.split_position = split_position
        self.left = left
        self.right = right
        self.member_times = member_times
        self.value = value
        self.forced = forced

    @property
    def is_leaf(self) -> bool:
        return self.split_direction is None

    def route(self, x) -> "TreeNode":
        """Leaf reached by descending from this node with query ``x``."""
        node = self
        while not node.is_leaf:
            if x[node.split_direction] <= node.split_position:
                node = node.left
            else:
                node = node.right
        return node

    def predict(self, x) -> float:
        return self.route(x).value

    def leaves(self):
        stack, out = [self], []
        while stack:
            node = stack.pop()
            if node.is_leaf:
                out.append(node)
            else:
                stack.append(node.right)
                stack.append(node.left)
        return out

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {
                "n": int(self.n_members),
                "value": float(self.value),
                "members": [int(t) for t in self.member_times],
                "forced": bool(self.forced),
            }
        return {
            "n": int(self.n_members),
            "dir": int(self.split_direction),
            "thr": float(self.split_position),
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TreeNode":
        if "value" in payload:
            return cls(
                n_members=int(payload["n"]),
                member_times=np.asarray(payload["members"], dtype=np.int64),
                value=float(payload["value"]),
                forced=bool(payload.get("forced", False)),
            )
        return cls(
            n_members=int(payload["n"]),
            split_direction=int(payload["dir"]),
            split_position=float(payload["thr"]),
            left=cls.from_dict(payload["left"]),
            right=cls.from_dict(payload["right"]),
        )


def _best_split(X, y_node, idx, dirs, c_min):
    """Best (sse, direction, threshold) over the candidate directions.

    Directions are scanned in ascending order and thresholds in ascending
    order within each direction; only strict improvements replace the
    incumbent, which realizes the documented tie-breaking.
    """
    n = idx.size
    best_sse = np.inf
    best = None
    counts = np.arange(1, n)
    for d in dirs:
        xs = X[idx, d]
        order = np.argsort(xs, kind="stable")
        xs_s = xs[order]
        if xs_s[0] == xs_s[-1]:
            continue
        ys_s = y_node[order]
        c1 = np.cumsum(ys_s)
        c2 = np.cumsum(ys_s * ys_s)
        valid = (xs_s[:-1] < xs_s[1:]) & (counts >= c_min) & (n - counts >= c_min)
        if not valid.any():
            continue
        left_sse = c2[:-1] - c1[:-1] ** 2 / counts
        right_sse = (c2[-1] - c2[:-1]) - (c1[-1] - c1[:-1]) ** 2 / (n - counts)
        sse = np.where(valid, left_sse + right_sse, np.inf)
        j = int(np.argmin(sse))
        if not np.isfinite(sse[j]):
            continue
        if best is None or sse[j] < best_sse - _TIE_TOL * (1.0 + best_sse):
            best_sse = float(sse[j])
            best = (d, float((xs_s[j] + xs_s[j + 1]) / 2.0), order, j)
    if best is None:
        return None
    d, thr, order, j = best
    left_idx = idx[order[: j + 1]]
    right_idx = idx[order[j + 1:]]
    return best_sse, d, thr, left_idx, right_idx


def _make_node(X, y, idx, cfg: ForestConfig, rng: np.random.Generator):
    """Decide one node: a finished leaf, or an internal node plus child rows."""
    n = idx.size
    y_node = y[idx]
    mean = float(np.mean(y_node))
    if np.all(y_node == y_node[0]):
        return TreeNode(n, member_times=np.sort(idx), value=mean, forced=True), None, None
    c_min = _min_child_size(cfg.k, cfg.alpha, n)
    if n < 2 * c_min:
        return TreeNode(n, member_times=np.sort(idx), value=mean), None, None
    dirs = np.sort(rng.choice(X.shape[1], size=cfg.mtry, replace=False))
    found = _best_split(X, y_node, idx, dirs, c_min)
    if found is None:
        return TreeNode(n, member_times=np.sort(idx), value=mean, forced=True), None, None
    _, d, thr, left_idx, right_idx = found
    return TreeNode(n, split_direction=int(d), split_position=thr), left_idx, right_idx


def _grow(X, y, idx, cfg: ForestConfig, rng: np.random.Generator) -> TreeNode:
    # explicit preorder stack (node, then left subtree, then right) keeps the
    # random stream consumption identical to the recursive formulation while
    # tolerating arbitrarily deep trees
    root = [None]
    stack = [(idx, root, 0)]
    while stack:
        node_idx, container, key = stack.pop()
        node, left_idx, right_idx = _make_node(X, y, node_idx, cfg, rng)
        if isinstance(container, list):
            container[key] = node
        else:
            setattr(container, key, node)
        if left_idx is not None:
            stack.append((right_idx, node, "right"))
            stack.append((left_idx, node, "left"))
    return root[0]


def fit_tree(panel: Panel, rows, config: ForestConfig, rng=None, *, require_pre: bool = True) -> TreeNode:
    """Grow a single constrained regression tree on the given panel rows.

    Parameters
    ----------
    panel : Panel
    rows : array of row indices
        Training periods; must lie in the pre-onset range unless
        ``require_pre`` is disabled (used when a test procedure legitimately
        refits on the full sample). Repeated indices are allowed (bagging).
    config : ForestConfig
    rng : numpy.random.Generator, optional
        Stream for the per-node direction draws; a fresh stream from
        ``config.seed`` is used when omitted.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size < config.k:
        raise EstimationError(f"need at least k={config.k} training rows; got {rows.size}")
    if require_pre and rows.size and rows.max() >= panel.t0:
        raise EstimationError("training rows extend past the pre-onset range")
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    cfg = config.resolve(panel.n_controls, rows.size, panel.t0)
    return _grow(panel.controls, panel.treated, rows, cfg, rng)


@dataclass(frozen=True)
class ForestModel:
    """A fitted ensemble of constrained regression trees."""

    trees: tuple
    config: ForestConfig
    training_rows: np.ndarray
    n_inputs: int

    tag = "forest"

    def __post_init__(self):
        rows = np.asarray(self.training_rows, dtype=np.int64)
        rows.flags.writeable = False
        object.__setattr__(self, "training_rows", rows)
        object.__setattr__(self, "trees", tuple(self.trees))

    def predict(self, x) -> float:
        """Forest prediction at one control vector: the exact mean of the
        tree predictions (compensated summation)."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_inputs,):
            raise DataError(f"query must have length {self.n_inputs}; got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("query coordinates must be finite")
        return math.fsum(tree.predict(x) for tree in self.trees) / len(self.trees)

    def predict_matrix(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.array([self.predict(row) for row in X])

    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "format": FOREST_FORMAT,
            "version": FOREST_FORMAT_VERSION,
            "config": {
                "alpha": cfg.alpha,
                "k": cfg.k,
                "m_leaf": cfg.m_leaf,
                "mtry": cfg.mtry,
                "n_trees": cfg.n_trees,
                "seed": cfg.seed,
                "bagging": cfg.bagging,
                "block_length": cfg.block_length,
            },
            "training_rows": [int(t) for t in self.training_rows],
            "n_inputs": int(self.n_inputs),
            "trees": [tree.to_dict() for tree in self.trees],
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def from_dict(cls, payload: dict) -> "ForestModel":
        if payload.get("format") != FOREST_FORMAT:
            raise DataError(f"not a forest document: format={payload.get('format')!r}")
        if payload.get("version") != FOREST_FORMAT_VERSION:
            raise DataError(f"unsupported forest format version {payload.get('version')!r}")
        config = ForestConfig(**payload["config"])
        model = cls(
            trees=tuple(TreeNode.from_dict(t) for t in payload["trees"]),
            config=config,
            training_rows=np.asarray(payload["training_rows"], dtype=np.int64),
            n_inputs=int(payload["n_inputs"]),
        )
        issues = validate_model(model)
        if issues:
            raise DataError("forest document violates invariants: " + "; ".join(issues))
        return model

    @classmethod
    def load(cls, path) -> "ForestModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _block_bootstrap_rows(rows: np.ndarray, block_length: int, rng: np.random.Generator) -> np.ndarray:
    """Circular block-bootstrap resample of ``rows``, same length as ``rows``."""
    n = rows.size
    length = min(block_length, n)
    n_blocks = math.ceil(n / length)
    starts = rng.integers(0, n, size=n_blocks)
    positions = (starts[:, None] + np.arange(length)[None, :]) % n
    return rows[positions.ravel()[:n]]


def fit_forest(panel: Panel, rows, config: ForestConfig, *, require_pre: bool = True) -> ForestModel:
    """Fit a forest of ``config.n_trees`` trees.

    Per-tree random streams are spawned from ``config.seed``; with
    ``bagging="none"`` every tree trains on ``rows`` and trees differ only
    through direction subsampling, with ``bagging="block"`` each tree
    trains on its own circular block-bootstrap resample of ``rows``.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size < config.k:
        raise EstimationError(f"need at least k={config.k} training rows; got {rows.size}")
    if require_pre and rows.size and rows.max() >= panel.t0:
        raise EstimationError("training rows extend past the pre-onset range")
    cfg = config.resolve(panel.n_controls, rows.size, panel.t0)
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees)
    trees = []
    for seq in streams:
        rng = np.random.default_rng(seq)
        tree_rows = rows
        if cfg.bagging == "block":
            tree_rows = _block_bootstrap_rows(rows, cfg.block_length, rng)
        trees.append(_grow(panel.controls, panel.treated, tree_rows, cfg, rng))
    return ForestModel(trees=tuple(trees), config=cfg, training_rows=rows, n_inputs=panel.n_controls)


def validate_model(model: ForestModel, *, strict: bool = False) -> list[str]:
    """Traverse every tree and report violations of the size constraints.

    Checks, per leaf, ``k <= size`` and ``size < m_leaf``, and per internal
    node the alpha-balance bound on both children. Leaves that stopped for
    data-shape reasons (``forced``), or whose size admits no balanced split
    arithmetically, are exempt from the upper bound unless ``strict``.
    """
    cfg = model.config
    issues = []
    for b, root in enumerate(model.trees):
        stack = [root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                size = node.n_members
                if size < cfg.k:
                    issues.append(f"tree {b}: leaf of size {size} below k={cfg.k}")
                if size >= cfg.m_leaf:
                    exempt = node.forced or size < 2 * _min_child_size(cfg.k, cfg.alpha, size)
                    if strict or not exempt:
                        issues.append(f"tree {b}: leaf of size {size} at or above m_leaf={cfg.m_leaf}")
                if node.member_times is not None and len(node.member_times) != size:
                    issues.append(f"tree {b}: leaf member count mismatch")
            else:
                bound = int(math.ceil(cfg.alpha * node.n_members - _CEIL_GUARD))
                for child in (node.left, node.right):
                    if child.n_members < bound:
                        issues.append(
                            f"tree {b}: child of size {child.n_members} below "
                            f"alpha share {bound} of parent {node.n_members}"
                        )
                if node.left.n_members + node.right.n_members != node.n_members:
                    issues.append(f"tree {b}: children do not partition the parent")
                stack.append(node.right)
                stack.append(node.left)
    return issues


def tune_mtry(panel: Panel, split: SplitSpec, base: ForestConfig, grid) -> ForestConfig:
    """Select ``mtry`` by validation error on the temporal split.

    Fits one forest per grid value on the estimation block and scores the
    root mean squared prediction error on the validation block; returns
    ``base`` with the winning value (ties go to the smaller ``mtry``).
    """
    grid = sorted(set(int(g) for g in grid))
    if not grid:
        raise ConfigError("mtry grid must be non-empty")
    if grid[0] < 1 or grid[-1] > panel.n_controls:
        raise ConfigError(f"mtry grid values must lie in 1..{panel.n_controls}")
    est, val = temporal_split(panel, split)
    best_mtry, best_score = None, np.inf
    for mtry in grid:
        model = fit_forest(panel, est, replace(base, mtry=mtry))
        pred = model.predict_matrix(panel.controls[val])
        score = float(np.sqrt(np.mean((panel.treated[val] - pred) ** 2)))
        if score < best_score:
            best_mtry, best_score = mtry, score
    return replace(base, mtry=best_mtry)


def permutation_importance(model: ForestModel, panel: Panel, rows, n_repeats: int, rng) -> np.ndarray:
    """Permutation importance of every control direction.

    For control ``i`` the score is the mean, over ``n_repeats`` independent
    permutations of column ``i`` within ``rows``, of the increase in RMSPE
    relative to the unpermuted baseline. A control that no split consults
    scores exactly zero.
    """
    if n_repeats < 1:
        raise ConfigError("n_repeats must be >= 1")
    rows = np.asarray(rows, dtype=np.int64)
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(np.random.SeedSequence(int(rng)))
    X = panel.controls[rows]
    y = panel.treated[rows]
    baseline = float(np.sqrt(np.mean((y - model.predict_matrix(X)) ** 2)))
    scores = np.zeros(panel.n_controls)
    for i in range(panel.n_controls):
        total = 0.0
        for _ in range(n_repeats):
            Xp = X.copy()
            Xp[:, i] = rng.permutation(Xp[:, i])
            rmspe = float(np.sqrt(np.mean((y - model.predict_matrix(Xp)) ** 2)))
            total += rmspe - baseline
        scores[i] = total / n_repeats
    return scores
