"""Tree-based synthetic control for panel data.

Imputes the no-intervention outcome of a treated unit from control-unit
panels with a constrained regression forest, estimates average effects
with block-bootstrap uncertainty, and judges significance through placebo
batteries and finite-sample permutation tests. Classic simplex-weighted
and elastic-net estimators are included as comparators.
"""

__version__ = "0.1.0"

from .effects import (
    CounterfactualFit,
    EffectReport,
    FitMetrics,
    ate_hat,
    ate_naive,
    block_bootstrap_ci,
    counterfactual,
    effect_report,
    fit_metrics,
)
from .errors import (
    ConfigError,
    DataError,
    EstimationError,
    LeakageError,
    SchemaError,
    TreeSynthError,
)
from .estimators import EstimatorSpec, fit_estimator
from .forest import (
    ForestConfig,
    ForestModel,
    TreeNode,
    fit_forest,
    fit_tree,
    permutation_importance,
    tune_mtry,
    validate_model,
)
from .inference import (
    ConformalResult,
    PlaceboStudy,
    conformal_statistic,
    conformal_test,
    placebo_rank_report,
    placebo_specification_test,
    run_placebos,
)
from .panel import (
    Panel,
    RawEventTable,
    SplitSpec,
    aggregate_weekly,
    build_panel,
    ingest_csv,
    read_weekly_csv,
    relabel_treated,
    summary_stats,
    temporal_split,
    write_weekly_csv,
)
from .simulate import SimulatedPanel, simulate_panel
from .solvers import (
    EnetFit,
    ScmWeights,
    fit_enet,
    fit_scm,
    project_to_simplex,
    tune_enet,
)
