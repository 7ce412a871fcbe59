"""Exception hierarchy shared across the toolkit."""


class CausalHmmError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(CausalHmmError):
    """Invalid dimensions, counts, or config values."""


class ContractError(CausalHmmError):
    """An operation was called with arguments violating its contract."""


class GenerationError(CausalHmmError):
    """The simulator produced a non-finite sample."""


class CorruptDatasetError(CausalHmmError):
    """Stored dataset does not match its manifest hashes."""


class SchemaVersionError(CausalHmmError):
    """Stored artifact was written with an incompatible schema version."""


class CheckpointError(CausalHmmError):
    """Checkpoint file is unreadable, truncated, or mismatched."""


class NumericalError(CausalHmmError):
    """A non-finite value appeared during optimization."""


class UndefinedMetricError(CausalHmmError):
    """Metric is undefined for the given inputs (e.g. one-class AUC)."""


class DegenerateTestError(CausalHmmError):
    """Hypothesis test is degenerate (pooled proportion 0 or 1)."""
