"""Exception hierarchy.

The CLI maps these onto exit codes: config problems exit 2, data problems
exit 3, numerical failures exit 4.
"""


class TsttError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(TsttError, ValueError):
    """Malformed or inconsistent run configuration."""


class DataError(TsttError, ValueError):
    """Input data that cannot be parsed or violates the cohort contract."""


class NumericalError(TsttError, ArithmeticError):
    """A model fit failed to produce a usable estimate."""


class RankDeficiencyError(NumericalError):
    def __init__(self, columns, message=None):
        self.columns = list(columns)
        super().__init__(message or f"design matrix is rank deficient; collinear columns: {self.columns}")


class SeparationError(NumericalError):
    """Fitted probabilities pinned at 0 or 1 while coefficients keep growing."""


class MonotoneLikelihoodError(NumericalError):
    """The partial likelihood has no finite maximizer."""


class ConvergenceError(NumericalError):
    def __init__(self, message, diagnostics=None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)
