"""Exception hierarchy shared by the library and the CLI."""


class VarmionError(Exception):
    """Base class; ``code`` is the machine-readable tag printed by the CLI."""

    code = "error"
    exit_code = 1


class InvalidArgument(VarmionError, ValueError):
    code = "invalid-argument"
    exit_code = 4


class InvalidGeometry(VarmionError, ValueError):
    code = "invalid-geometry"
    exit_code = 4


class InvalidConfiguration(VarmionError, ValueError):
    code = "invalid-configuration"
    exit_code = 4


class OutsideDomain(VarmionError, ValueError):
    code = "outside-domain"
    exit_code = 4


class SolverFailure(VarmionError, RuntimeError):
    code = "solver-failure"
    exit_code = 5

    def __init__(self, message, residual=None, step=None):
        super().__init__(message)
        self.residual = residual
        self.step = step


class SingularSystem(VarmionError, RuntimeError):
    code = "singular-system"
    exit_code = 5

    def __init__(self, message, rank=None):
        super().__init__(message)
        self.rank = rank


class TooLarge(VarmionError, ValueError):
    code = "too-large"
    exit_code = 4


class DegenerateReference(VarmionError, ValueError):
    code = "degenerate-reference"
    exit_code = 5


class TrainingDiverged(VarmionError, RuntimeError):
    code = "training-diverged"
    exit_code = 5

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class FormatError(VarmionError, ValueError):
    """Corrupt file, bad magic, or unsupported version."""

    code = "format-error"
    exit_code = 6


class ConfigMismatch(VarmionError, ValueError):
    code = "config-mismatch"
    exit_code = 6


class MissingFile(VarmionError, FileNotFoundError):
    code = "missing-file"
    exit_code = 3


class CheckFailed(VarmionError, RuntimeError):
    """A numerical self-check did not meet its tolerance."""

    code = "check-failed"
    exit_code = 7
