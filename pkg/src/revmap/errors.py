"""Exception taxonomy shared across the toolkit.

CLI exit codes: UsageError-family -> 2, data/input problems -> 3,
numeric failures -> 4.
"""


class RevmapError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(RevmapError, ValueError):
    """Operand dimensions do not match the operation's contract."""


class ConfigError(RevmapError, ValueError):
    """Invalid or unsupported configuration (activation kind, layer kind, ...)."""


class InputError(RevmapError, ValueError):
    """Invalid input data: empty datasets, bad split fractions, unreachable targets."""


class UsageError(RevmapError, RuntimeError):
    """API misuse, e.g. replaying an already-consumed gradient tape."""


class TrainingError(RevmapError, RuntimeError):
    """Nonfinite loss or gradient during optimization."""


class IntegrationError(RevmapError, RuntimeError):
    """Nonfinite state produced during an Euler rollout."""


class DegeneracyError(RevmapError, RuntimeError):
    """Numerically degenerate case: dependent columns, stalled IK progress."""


class EstimationError(RevmapError, RuntimeError):
    """Bound estimation exhausted its budget without a finite evaluation."""
