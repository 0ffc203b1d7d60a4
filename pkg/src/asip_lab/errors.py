"""Exception hierarchy shared by all modules.

Validation problems (bad parameters, malformed input) derive from
``ValueError``; numerical failures derive from ``ArithmeticError``.  The
command line maps the first family to exit code 2 and the second to 3.
"""


class DomainError(ValueError):
    """A parameter lies outside the domain where an operation is defined."""


class ConstructionError(ValueError):
    """An object (tower, observable, schedule) cannot be built from its inputs."""


class DataError(ValueError):
    """Not enough (or degenerate) data for an estimator."""


class CapacityError(ValueError):
    """An exact computation would exceed its memory guard."""


class NumericError(ArithmeticError):
    """A numerical routine failed to converge or produced an invalid value."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics

    def __str__(self):
        base = super().__str__()
        if not self.diagnostics:
            return base
        extra = ", ".join(f"{k}={v!r}" for k, v in self.diagnostics.items())
        return f"{base} ({extra})"


class CappedReturnError(NumericError):
    """The first return to the base exceeded the iteration cap."""

    def __init__(self, cap, x):
        super().__init__(f"return time exceeds cap {cap}", cap=cap, x=x)
        self.cap = cap


class ExtrapolationError(NumericError):
    """Extrapolation of E(S_n^2)/n did not settle; the curve is attached."""

    def __init__(self, message, curve):
        super().__init__(message)
        self.curve = curve
