"""Error hierarchy shared by the simulator services, the CLI and the HTTP layer."""

from __future__ import annotations


class DeledaError(ValueError):
    """Base class; ``category`` is the one-word diagnostic printed by the CLI."""

    category = "error"


class ConfigurationError(DeledaError):
    category = "config"


class DataError(DeledaError):
    category = "data"


class NumericalError(DeledaError):
    category = "numerical"

    def __init__(self, message: str, *, position: int | None = None) -> None:
        super().__init__(message)
        self.position = position


class DegenerateRowError(NumericalError):
    pass


class SingularTopicsError(NumericalError):
    pass


class InfeasibleError(DeledaError):
    category = "infeasible"


class PreconditionError(DeledaError):
    category = "precondition"


class GenerationError(DeledaError):
    category = "generation"


class DomainError(DeledaError):
    category = "domain"


class InputError(DeledaError):
    category = "input"
