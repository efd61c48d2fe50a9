"""Exception hierarchy shared by every subsystem.

The CLI maps these onto process exit codes (see ``dynamind.cli``).
"""


class DynaMindError(Exception):
    exit_code = 1


class ValidationError(DynaMindError, ValueError):
    """Input violates a documented precondition."""

    exit_code = 2


class ConfigError(DynaMindError):
    exit_code = 2


class NumericError(DynaMindError, ArithmeticError):
    """Raised instead of silently producing NaN (e.g. zero-norm rows under cosine similarity)."""


class LoadError(DynaMindError, OSError):
    exit_code = 4


class MissingArtifactError(DynaMindError):
    exit_code = 4


class DivergenceError(DynaMindError):
    """A training phase produced a non-finite loss."""

    exit_code = 3

    def __init__(self, phase: str, epoch: int, message: str = ""):
        self.phase = phase
        self.epoch = epoch
        super().__init__(f"phase '{phase}' diverged at epoch {epoch}" + (f": {message}" if message else ""))


class ClassifierTrainingError(DynaMindError):
    """An evaluation classifier failed to reach its required training accuracy."""
