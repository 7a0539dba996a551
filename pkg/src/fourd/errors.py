"""Exception types shared across the package."""


class InputError(ValueError):
    """Raised when arguments violate an operation's preconditions."""


class StateError(RuntimeError):
    """Raised when an object is used out of order (e.g. backward before forward)."""
