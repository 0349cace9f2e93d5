"""Exception hierarchy. The CLI maps each family to its own exit code."""


class DrPolicyError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1
    kind = "error"


class ConfigError(DrPolicyError, ValueError):
    """Invalid parameters or run configuration."""

    exit_code = 2
    kind = "config"


class DataError(DrPolicyError, ValueError):
    """Input data violates a precondition (schema, types, shapes)."""

    exit_code = 3
    kind = "data"


class NumericError(DrPolicyError, ArithmeticError):
    """A numerical safeguard tripped (degenerate fold, weak instrument, ...)."""

    exit_code = 4
    kind = "numeric"


class WeakInstrumentError(NumericError):
    def __init__(self, indices, delta_min):
        self.indices = list(map(int, indices))
        self.delta_min = delta_min
        shown = self.indices[:20]
        more = "" if len(self.indices) <= 20 else f" (+{len(self.indices) - 20} more)"
        super().__init__(
            f"weak instrument: |compliance| < {delta_min} at indices {shown}{more}"
        )
