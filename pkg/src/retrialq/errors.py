"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class RetrialQError(Exception):
    exit_code = 1


class ConfigError(RetrialQError, ValueError):
    exit_code = 2

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])


class IrreducibilityError(ConfigError):
    def __init__(self, message, classes=None):
        super().__init__(message)
        self.classes = classes or []


class NonConvergenceError(RetrialQError):
    exit_code = 3

    def __init__(self, message, m_cap=None, deltas=None):
        super().__init__(message)
        self.m_cap = m_cap
        self.deltas = deltas or {}


class DimensionCapError(RetrialQError):
    exit_code = 4

    def __init__(self, message, level=None, dimension=None):
        super().__init__(message)
        self.level = level
        self.dimension = dimension


class InfeasibleError(RetrialQError):
    exit_code = 5


class SolverError(RetrialQError, ArithmeticError):
    """Singular inner matrix, non-unique boundary solution, bad residual."""
    exit_code = 3

    def __init__(self, message, level=None):
        super().__init__(message)
        self.level = level


class UndefinedMeasureError(RetrialQError, ZeroDivisionError):
    pass
