"""Exception hierarchy shared across the package."""


class TreeSynthError(Exception):
    """Base class for all errors raised by treesynth."""


class SchemaError(TreeSynthError):
    """Input file does not expose the declared columns."""


class DataError(TreeSynthError):
    """Input data violates a structural requirement (bad rows, misaligned series, broken invariants)."""


class ConfigError(TreeSynthError):
    """A configuration value is out of its admissible range."""


class EstimationError(TreeSynthError):
    """An estimator failed to produce a valid fit."""


class LeakageError(EstimationError):
    """A model trained on post-onset periods was offered where only pre-onset training is allowed."""
