"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration (unsupported parameter, unknown key, bad preset)."""


class ShapeError(ValueError):
    """Array shape or size violates an operation's contract."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class StateError(RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class DataError(RuntimeError):
    """Dataset generation, persistence, or integrity failure."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss or gradients)."""


class ConditioningError(RuntimeError):
    """Linear system too close to singular to solve reliably."""


class InferenceError(RuntimeError):
    """Non-finite values produced during model evaluation."""
