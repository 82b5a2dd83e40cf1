"""Exception types. The CLI maps each family to an exit code."""


class GasolineError(Exception):
    exit_code = 1


class ConfigError(GasolineError, ValueError):
    exit_code = 2


class DataError(GasolineError, ValueError):
    exit_code = 3


class GraphFormatError(DataError):
    """A graph directory file is missing or malformed."""

    def __init__(self, path: str, line: int | None, message: str):
        self.path = path
        self.line = line
        where = f"{path}:{line}" if line is not None else path
        super().__init__(f"{where}: {message}")


class BudgetError(DataError):
    pass


class DivergenceError(GasolineError, ArithmeticError):
    exit_code = 4

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message if step is None else f"{message} (step {step})")


class NoSignalError(GasolineError, ArithmeticError):
    """Raised when a continuous update receives an all-zero gradient."""

    exit_code = 4
