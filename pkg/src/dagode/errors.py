"""Exception types shared across the toolkit."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class NumericError(FloatingPointError):
    """A computation produced NaN or overflowed.

    ``where`` identifies the offending location (tape node index, step index).
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class DecompositionError(ArithmeticError):
    pass


class GenerationError(RuntimeError):
    pass


class OptimizationError(RuntimeError):
    """Raised when the constrained optimizer diverges; carries the trace so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class ParseError(ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
