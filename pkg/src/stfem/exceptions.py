class SizeLimitError(ValueError):
    """Raised when a requested mesh or dense assembly exceeds a size guard."""


class PerturbationError(RuntimeError):
    """Raised when a random vertex perturbation inverts a cell."""


class NumericFailure(ArithmeticError):
    """Raised when an iterative solver meets NaN or Inf."""


class SolverDivergence(RuntimeError):
    """Raised by the time marcher when a batch solve does not converge."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
