"""Exception hierarchy shared across the package.

The CLI maps each family onto a distinct exit code.
"""


class CaatError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(CaatError, ValueError):
    exit_code = 2


class DimensionError(CaatError, ValueError):
    exit_code = 2


class LabelError(CaatError, ValueError):
    exit_code = 2


class ContractError(CaatError, RuntimeError):
    exit_code = 1


class PathError(CaatError, KeyError):
    exit_code = 2

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class UsageError(CaatError):
    exit_code = 2


class ArtifactError(CaatError, FileNotFoundError):
    """A required input file or run artifact is missing."""

    exit_code = 3


class DependencyError(ArtifactError):
    exit_code = 3


class FormatError(CaatError):
    exit_code = 4


class CheckpointMismatch(FormatError):
    def __init__(self, message, differing_paths=()):
        super().__init__(message)
        self.differing_paths = list(differing_paths)


class DivergenceError(CaatError, FloatingPointError):
    exit_code = 5
