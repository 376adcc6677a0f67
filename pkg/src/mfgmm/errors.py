"""Exception hierarchy shared by all modules.

The harness maps these onto process exit codes, so every failure raised by the
numerical code should derive from one of the classes below.
"""


class MfgmmError(Exception):
    """Base class for package errors."""


class ConfigError(MfgmmError, ValueError):
    """Invalid configuration or input that violates a type invariant."""


class BudgetError(MfgmmError):
    """An enumeration or lattice would exceed its configured size budget."""


class NumericalError(MfgmmError):
    """A numerical routine failed (non-convergence, indefinite Hessian, ...)."""


class CutoffError(NumericalError):
    """A point lies on or outside the parameter cut-off where a quantity is undefined."""


class ConvergenceError(NumericalError):
    """An iterative solver did not converge; ``best`` holds the best iterate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class DegenerateError(NumericalError):
    """A closed form is undefined because its weights vanish."""
