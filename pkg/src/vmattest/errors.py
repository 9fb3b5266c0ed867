"""Exception hierarchy shared by all simulator components."""

from __future__ import annotations


class SimulationError(Exception):
    """Base class for protocol-level failures raised inside the simulation.

    Scenario drivers treat any subclass as a *detected* outcome: a defense
    (or a fault) stopped the flow.
    """

    @property
    def kind(self) -> str:
        return type(self).__name__


class KeyFormatError(SimulationError, ValueError):
    pass


class ChainCycleError(SimulationError):
    pass


class TpmError(SimulationError, ValueError):
    """Malformed TPM command: bad PCR index, bank/length mismatch, ..."""


class LocalityViolation(SimulationError):
    pass


class UndefinedCounter(SimulationError, KeyError):
    pass


class AuthError(SimulationError):
    pass


class NotFound(SimulationError):
    pass


class Conflict(SimulationError):
    pass


class McsUnavailable(SimulationError):
    pass


class ConnectionRefused(SimulationError):
    pass


class IntegrityError(SimulationError):
    pass


class ChannelClosed(SimulationError):
    pass


class RollbackDetected(SimulationError):
    pass


class InstanceMismatch(SimulationError):
    pass


class NotProvisioned(SimulationError):
    pass


class PolicyViolation(SimulationError):
    def __init__(self, message: str, violations=()):
        super().__init__(message)
        self.violations = tuple(violations)


class PolicyError(SimulationError, ValueError):
    """Policy text failed to parse or violates a document invariant."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class VmShutdown(SimulationError):
    def __init__(self, message: str, cause: BaseException | None = None):
        super().__init__(message)
        self.cause = cause

    @property
    def kind(self) -> str:
        # report the root cause, the shutdown itself is always the reaction
        if isinstance(self.cause, SimulationError):
            return self.cause.kind
        return "VmShutdown"
