"""Exception hierarchy shared across the toolkit.

Every error carries a short machine-readable ``error_class`` used by the CLI
to pick an exit code and to tag run manifests.
"""


class ToolkitError(Exception):
    error_class = "error"


class ShapeError(ToolkitError):
    """Array dimensions or lengths do not match the operation's contract."""

    error_class = "shape"


class DegenerateBatchError(ShapeError):
    """Batch too small for batch statistics (train-mode normalization)."""

    error_class = "degenerate_batch"


class ParameterError(ToolkitError):
    """An argument is outside its documented range."""

    error_class = "parameter"


class ConfigError(ToolkitError):
    """An architecture or run configuration violates its invariants."""

    error_class = "config"


class FormatError(ToolkitError):
    """A file is not a valid GHSR/GHSM container; message names the offset."""

    error_class = "format"


class NumericError(ToolkitError):
    """Non-finite value encountered where finite arithmetic is required."""

    error_class = "numeric"


class DegenerateClassError(ToolkitError):
    """Training data contains a single class."""

    error_class = "degenerate_class"


class StatsError(ToolkitError):
    """Statistic requested on an empty collection."""

    error_class = "stats"


class UndefinedStatisticError(StatsError):
    """Regression or correlation undefined (zero variance)."""

    error_class = "undefined_statistic"


class MetricError(ToolkitError):
    """Accuracy metric undefined for the given confusion counts."""

    error_class = "metric"


class RegistryError(ToolkitError):
    """Zone registry lookup failed."""

    error_class = "registry"


class GenerationError(ToolkitError):
    """Synthetic scene generation could not satisfy its constraints."""

    error_class = "generation"


class MissingInputError(ToolkitError):
    """A required input path does not exist."""

    error_class = "missing_input"
