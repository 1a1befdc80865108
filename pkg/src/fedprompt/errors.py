"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class DegenerateInputError(ValueError):
    """Input is outside the meaningful domain (e.g. zero vector for cosine)."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ProtocolError(RuntimeError):
    """Federation message sequence or payload shapes are inconsistent."""


class TrainingDivergenceError(RuntimeError):
    """Non-finite gradients or loss; the round must be aborted."""


class RunComplete(Exception):
    """Signal that all tasks of a run have been consumed."""
