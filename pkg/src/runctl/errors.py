"""Exception vocabulary shared by all services, with wire error-code mapping.

Every error that can cross a service boundary carries a stable ``code``
string; error envelopes embed ``{code, message, details}`` and clients can
re-raise the matching exception type via :func:`raise_from_body`.
"""

from __future__ import annotations

from typing import Any


class RcmsError(Exception):
    """Base class for all run-control errors."""

    code = "InternalError"

    def __init__(self, message: str = "", **details: Any):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.details = details

    def to_body(self) -> dict:
        details = {k: sorted(v) if isinstance(v, (set, frozenset)) else v
                   for k, v in self.details.items()}
        return {"code": self.code, "message": self.message, "details": details}


_BY_CODE: dict[str, type[RcmsError]] = {}


def _register(cls: type[RcmsError]) -> type[RcmsError]:
    _BY_CODE[cls.code] = cls
    return cls


class RemoteError(RcmsError):
    """Error envelope whose code has no local exception type."""

    def __init__(self, code: str, message: str = "", **details: Any):
        super().__init__(message, **details)
        self.code = code


def raise_from_body(body: dict) -> None:
    """Re-raise the typed exception an error envelope body describes."""
    code = body.get("code", "InternalError")
    message = body.get("message", "")
    details = body.get("details", {}) or {}
    cls = _BY_CODE.get(code)
    if cls is None:
        raise RemoteError(code, message, **details)
    exc = cls.__new__(cls)
    RcmsError.__init__(exc, message, **details)
    raise exc


# core-model

@_register
class IllegalTransition(RcmsError):
    code = "IllegalTransition"

    def __init__(self, state: Any = None, verb: Any = None, message: str = ""):
        state_name = getattr(state, "value", state)
        verb_name = getattr(verb, "value", verb)
        super().__init__(message or f"no transition for verb {verb_name!r} from state {state_name!r}",
                         state=state_name, verb=verb_name)


@_register
class EmptyChildSet(RcmsError):
    code = "EmptyChildSet"


@_register
class CycleDetected(RcmsError):
    code = "CycleDetected"


# wire / transport

@_register
class MalformedEnvelope(RcmsError):
    code = "MalformedEnvelope"


@_register
class UnknownKind(RcmsError):
    code = "UnknownKind"


@_register
class BodyMismatch(RcmsError):
    code = "BodyMismatch"


@_register
class UnencodableBody(RcmsError):
    code = "UnencodableBody"


@_register
class TransportError(RcmsError):
    code = "TransportError"


@_register
class Timeout(TransportError):
    code = "Timeout"


@_register
class ProtocolError(RcmsError):
    code = "ProtocolError"


@_register
class RegistryUnavailable(RcmsError):
    code = "RegistryUnavailable"


# resource service

@_register
class ConflictingDefinition(RcmsError):
    code = "ConflictingDefinition"


@_register
class UnknownResource(RcmsError):
    code = "UnknownResource"


@_register
class UnknownChild(RcmsError):
    code = "UnknownChild"


@_register
class UnknownPartition(RcmsError):
    code = "UnknownPartition"


@_register
class ResourceUnavailable(RcmsError):
    code = "ResourceUnavailable"

    def __init__(self, ids=(), message: str = ""):
        ids = sorted(ids)
        super().__init__(message or f"resources unavailable: {ids}", ids=ids)


@_register
class ContentionConflict(RcmsError):
    code = "ContentionConflict"

    def __init__(self, ids=(), holder: str = "", message: str = ""):
        ids = sorted(ids)
        super().__init__(message or f"resources {ids} held by session {holder!r}",
                         ids=ids, holder=holder)


@_register
class NoSuchAllocation(RcmsError):
    code = "NoSuchAllocation"


@_register
class AllocationExists(RcmsError):
    code = "AllocationExists"


@_register
class MalformedFilter(RcmsError):
    code = "MalformedFilter"


# control

@_register
class UnknownVerb(RcmsError):
    code = "UnknownVerb"


@_register
class FmSpawnFailure(RcmsError):
    code = "FmSpawnFailure"


@_register
class SessionClosed(RcmsError):
    code = "SessionClosed"


class PartialFailure(RcmsError):
    """Some controlled nodes failed a step; carries the full report."""

    code = "PartialFailure"

    def __init__(self, report: Any = None, message: str = ""):
        failed = sorted(getattr(report, "failed", ()) or ())
        super().__init__(message or f"nodes failed: {failed}", failed=failed)
        self.report = report


_BY_CODE[PartialFailure.code] = PartialFailure


# ims

@_register
class BackendFailure(RcmsError):
    code = "BackendFailure"


@_register
class CallbackUnreachable(RcmsError):
    code = "CallbackUnreachable"


@_register
class MalformedCriteria(RcmsError):
    code = "MalformedCriteria"


# jobctl

@_register
class SpawnFailure(RcmsError):
    code = "SpawnFailure"


@_register
class DuplicateJobId(RcmsError):
    code = "DuplicateJobId"


@_register
class UnknownJob(RcmsError):
    code = "UnknownJob"


# solver

@_register
class MalformedRule(RcmsError):
    code = "MalformedRule"


# simbench

@_register
class PortExhaustion(RcmsError):
    code = "PortExhaustion"


@_register
class ConservationViolation(RcmsError):
    code = "ConservationViolation"
