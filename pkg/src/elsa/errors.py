"""Exception types shared across the package.

Every error raised on a user-facing path derives from ElsaError so the CLI
can map failures to exit codes without pattern-matching on messages.
"""


class ElsaError(Exception):
    """Base class for all package errors."""


class DimensionError(ElsaError):
    """Shapes are incompatible for the requested operation."""


class ContractError(ElsaError):
    """An API precondition was violated (wrong dtype, inactive tape, bad role...)."""


class ConfigurationError(ElsaError):
    """A config file or genome is malformed or out of range."""


class DivergenceError(ElsaError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")


class CheckpointError(ElsaError):
    """A checkpoint file is missing, truncated, or fails validation."""
