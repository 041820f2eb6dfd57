"""Exception hierarchy and process exit codes for the SWIRS toolkit."""
from typing import Optional, Sequence

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3


class SwirsError(Exception):
    """Base class for every error raised by the toolkit."""

    code: int = EXIT_NUMERICAL

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def to_dict(self) -> dict:
        return {"error": self.message, "code": self.code, "type": type(self).__name__}


class DomainError(SwirsError):
    """Non-finite or out-of-domain numerical input."""


class IntegrationDivergedError(SwirsError):
    """A state component left [-1e-6, 1 + 1e-6] during integration."""

    def __init__(self, message: str, time: float, state: Optional[Sequence[float]] = None):
        super().__init__(message)
        self.time = time
        self.state = None if state is None else [float(v) for v in state]


class UndefinedEquilibriumError(SwirsError):
    """The requested equilibrium does not exist for the given parameters."""


class ConsistencyError(SwirsError):
    """A runtime cross-check between two independent evaluations failed."""


class ConfigError(SwirsError):
    """Invalid scenario configuration."""

    code = EXIT_CONFIG

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")
        self.field = field
        self.line = line

    def to_dict(self) -> dict:
        data = super().to_dict()
        data.update({"field": self.field, "line": self.line})
        return data
