"""
errors.py — QLIP Lab
Exception hierarchy shared by the engines and the CLI.
Engines raise; only cli.py turns these into process exit codes.
"""


class QlipError(Exception):
    """Base class for every error the lab raises on purpose."""

    exit_code = 1


class ConfigError(QlipError):
    exit_code = 2


class MissingPrerequisiteError(QlipError):
    exit_code = 3

    def __init__(self, stage: str, requires: str):
        self.stage = stage
        self.requires = requires
        super().__init__(
            f"Stage '{stage}' needs the output of '{requires}'; run '{requires}' first"
        )


class ArtifactMismatchError(QlipError):
    """An artifact on disk was produced under a different config hash."""

    exit_code = 3


class NumericFailure(QlipError):
    """NaN/Inf reached a tensor, gradient or loss."""

    exit_code = 4

    def __init__(self, message: str, snapshot=None):
        self.snapshot = snapshot
        super().__init__(message)


class ContractViolation(QlipError, ValueError):
    """A caller broke an operation's precondition (shape, range, normalisation)."""

    exit_code = 1


class CalibrationError(QlipError, ValueError):
    exit_code = 1
