"""Exception types shared across the package.

Everything deriving from :class:`UserError` is caused by bad input (files,
configs, shapes) and maps to exit code 2 in the CLI.
"""


class UserError(Exception):
    """Input the caller can fix."""


class DimensionError(UserError, ValueError):
    pass


class DataError(UserError):
    pass


class ConfigError(UserError):
    pass


class CheckpointError(UserError):
    pass


class GrammarError(UserError):
    pass


class TrainingError(RuntimeError):
    """Raised when a run diverges (NaN loss) or cannot start."""
