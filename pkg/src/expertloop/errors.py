"""Exception types shared across the runtime."""

from __future__ import annotations


class ExpertLoopError(Exception):
    """Base class for all runtime errors."""


# --- knowledge repository ---

class ContentInvalid(ExpertLoopError):
    pass


class UnknownKid(ExpertLoopError):
    pass


class InvalidTransition(ExpertLoopError):
    pass


class ClockSkew(ExpertLoopError):
    pass


# --- event log ---

class MalformedEvent(ExpertLoopError):
    pass


class NonMonotoneSequence(ExpertLoopError):
    pass


class SequenceViolation(ExpertLoopError):
    pass


class StorageFailure(ExpertLoopError):
    pass


# --- similarity ---

class DimensionMismatch(ExpertLoopError):
    pass


# --- model gateway ---

class ProviderError(ExpertLoopError):
    """Base for completion-provider failures; carries the request fingerprint."""

    def __init__(self, message: str, fingerprint: str | None = None):
        super().__init__(message)
        self.fingerprint = fingerprint


class TransportError(ProviderError):
    pass


class ProviderTimeout(ProviderError):
    pass


class RateLimited(ProviderError):
    pass


class ProviderRefusal(ProviderError):
    pass


class ScriptMiss(ProviderError):
    pass


class Unparseable(ExpertLoopError):
    pass


# --- budget / queries ---

class BudgetExceeded(ExpertLoopError):
    pass


# --- oracle ---

class MissingGroundTruth(ExpertLoopError):
    pass


class OracleUnavailable(ExpertLoopError):
    pass


class OracleTimeout(ExpertLoopError):
    pass


class AnswerConflict(ExpertLoopError):
    """A pending query already reached a terminal status."""


# --- configuration / generators ---

class ConfigInvalid(ExpertLoopError):
    pass


class InvalidPhaseSpec(ExpertLoopError):
    pass


class BindFailure(ExpertLoopError):
    pass
