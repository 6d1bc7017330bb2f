"""Exception types shared across the package."""


class LatelabError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(LatelabError, ValueError):
    """Operand dimensions are incompatible with the requested operation."""


class ConfigError(LatelabError, ValueError):
    """A configuration object violates its documented invariants."""


class ContractError(LatelabError, ValueError):
    """An operation was invoked outside its documented contract."""


class FormatError(LatelabError, ValueError):
    """A serialized payload is malformed, truncated, or mismatched."""


class NonFiniteError(LatelabError, ArithmeticError):
    """A numeric operation produced NaN or infinity."""


class TrainingError(LatelabError, RuntimeError):
    """Training aborted; carries the failing step index when known."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
