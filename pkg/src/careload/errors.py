"""Exception hierarchy shared across the package.

Validation problems (bad config, bad schema, unusable input) exit the CLI
with status 1; model/numeric failures exit with status 2.
"""


class CareloadError(Exception):
    """Base class for package failures."""

    exit_code = 2


class ValidationError(CareloadError):
    """Input or configuration rejected before any model work starts."""

    exit_code = 1


class SchemaError(ValidationError):
    pass


class EmptyInputError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class ImputationError(CareloadError):
    pass


class NestingViolationError(CareloadError):
    pass


class DesignError(CareloadError):
    pass


class AssemblyError(CareloadError):
    pass


class NumericError(CareloadError):
    """Numeric breakdown (failed factorization, non-finite state)."""

    def __init__(self, message, iteration=None, snapshot_path=None):
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        if snapshot_path is not None:
            message = f"{message} (state snapshot: {snapshot_path})"
        super().__init__(message)
        self.iteration = iteration
        self.snapshot_path = snapshot_path


class StatisticError(CareloadError):
    """A requested statistic is undefined on the given draws."""


class DomainError(CareloadError):
    pass


class PredictionError(CareloadError):
    pass


class ComparisonError(CareloadError):
    pass


class CollinearityWarning(UserWarning):
    """A fixed-design column exactly duplicates another."""
