"""Exception types shared across the package.

CLI exit codes are attached to the three operational error families so the
entry point can map any failure to the documented status.
"""


class EGPRError(Exception):
    exit_code = 1


class ConfigError(EGPRError, ValueError):
    exit_code = 2


class DataError(EGPRError):
    exit_code = 3


class LookAheadError(DataError):
    """Raised when a consumer asks a panel source for data not yet observable."""


class NumericalError(EGPRError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, month_id=None, diagnostic=None):
        if month_id is not None:
            message = f"{message} (month {month_id})"
        if diagnostic is not None:
            message = f"{message}: {diagnostic}"
        super().__init__(message)
        self.month_id = month_id
        self.diagnostic = diagnostic


class ConvergenceError(NumericalError):
    def __init__(self, message, residual=None):
        super().__init__(message, diagnostic=None if residual is None else f"KKT residual {residual:.3e}")
        self.residual = residual


class UndefinedMetricError(EGPRError, ValueError):
    pass
