"""Canonical message envelope and its byte-exact JSON encoding.

One envelope shape carries every exchange in the system: commands, acks,
publishes, subscriptions, queries, registry traffic, event deliveries and
errors. The encoding is canonical so that two encoders always produce the
same bytes for the same value:

  * UTF-8 JSON object, compact separators,
  * top-level keys in the fixed order
    id, kind, correlation_id, session_id, source, target, issued_at, body,
  * absent optionals omitted entirely,
  * timestamps RFC 3339 UTC with microseconds and a ``Z`` suffix.

Decoding ignores unknown top-level fields (forward compatibility) but
rejects kind/body mismatches.
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Optional

from .errors import BodyMismatch, MalformedEnvelope, UnencodableBody, UnknownKind
from .model import FsmCommand, LogMessage, Severity, Subscription, utc_now


class Kind(Enum):
    COMMAND = "command"
    ACK = "ack"
    PUBLISH = "publish"
    SUBSCRIBE = "subscribe"
    UNSUBSCRIBE = "unsubscribe"
    QUERY = "query"
    RESULT = "result"
    EVENT = "event"
    REGISTER = "register"
    LOOKUP = "lookup"
    ERROR = "error"


# kinds a synchronous request() may carry / a one-way push() may carry
REQUEST_KINDS = frozenset({Kind.COMMAND, Kind.QUERY, Kind.SUBSCRIBE,
                           Kind.UNSUBSCRIBE, Kind.REGISTER, Kind.LOOKUP})
PUSH_KINDS = frozenset({Kind.PUBLISH, Kind.EVENT})
# kinds that answer another envelope and must point back at it
CORRELATED_KINDS = frozenset({Kind.ACK, Kind.RESULT, Kind.ERROR})


@dataclass(frozen=True)
class Envelope:
    id: str
    kind: Kind
    source: str
    target: str
    body: dict
    issued_at: datetime = field(default_factory=utc_now)
    correlation_id: Optional[str] = None
    session_id: Optional[str] = None


def make_envelope(kind: Kind, source: str, target: str, body: dict,
                  correlation_id: Optional[str] = None,
                  session_id: Optional[str] = None) -> Envelope:
    return Envelope(id=str(uuid.uuid4()), kind=kind, source=source, target=target,
                    body=body, correlation_id=correlation_id, session_id=session_id)


def reply_to(request: Envelope, kind: Kind, source: str, body: dict) -> Envelope:
    return make_envelope(kind, source=source, target=request.source, body=body,
                         correlation_id=request.id, session_id=request.session_id)


def format_timestamp(dt: datetime) -> str:
    if dt.tzinfo is None:
        raise ValueError("timestamps must be timezone-aware")
    return dt.astimezone(timezone.utc).isoformat(timespec="microseconds").replace("+00:00", "Z")


def parse_timestamp(text: str) -> datetime:
    if not isinstance(text, str):
        raise ValueError(f"expected timestamp string, got {type(text).__name__}")
    normalized = text[:-1] + "+00:00" if text.endswith("Z") else text
    dt = datetime.fromisoformat(normalized)
    if dt.tzinfo is None:
        raise ValueError(f"timestamp {text!r} is not timezone-aware")
    return dt.astimezone(timezone.utc)


# typed body converters ----------------------------------------------------

def command_to_body(cmd: FsmCommand) -> dict:
    return {"verb": cmd.verb, "parameters": dict(cmd.parameters)}


def command_from_body(body: dict) -> FsmCommand:
    return FsmCommand(verb=body["verb"], parameters=dict(body.get("parameters", {})))


def log_message_to_body(msg: LogMessage) -> dict:
    return {
        "source": msg.source,
        "msg_type": msg.msg_type,
        "severity": msg.severity.label,
        "timestamp": format_timestamp(msg.timestamp),
        "payload": msg.payload,
    }


def log_message_from_body(body: dict) -> LogMessage:
    return LogMessage(
        source=body["source"],
        msg_type=body["msg_type"],
        severity=Severity.from_label(body["severity"]),
        timestamp=parse_timestamp(body["timestamp"]),
        payload=body.get("payload", ""),
    )


def subscription_to_body(sub: Subscription) -> dict:
    body: dict[str, Any] = {
        "id": sub.id,
        "callback_url": sub.callback_url,
        "source_pattern": sub.source_pattern,
        "min_severity": sub.min_severity.label,
    }
    if sub.msg_types is not None:
        body["msg_types"] = sorted(sub.msg_types)
    if sub.since is not None:
        body["since"] = format_timestamp(sub.since)
    return body


def subscription_from_body(body: dict) -> Subscription:
    return Subscription(
        id=body["id"],
        callback_url=body["callback_url"],
        source_pattern=body.get("source_pattern", "*"),
        min_severity=Severity.from_label(body.get("min_severity", "debug")),
        msg_types=frozenset(body["msg_types"]) if body.get("msg_types") is not None else None,
        since=parse_timestamp(body["since"]) if body.get("since") is not None else None,
    )


# kind-specific body validation --------------------------------------------

def _check_str_map(value: Any) -> bool:
    return isinstance(value, dict) and all(
        isinstance(k, str) and isinstance(v, str) for k, v in value.items()
    )


def _validate_body(kind: Kind, body: Any) -> str | None:
    """Return a complaint string if the body does not fit the kind."""
    if not isinstance(body, dict):
        return "body must be a JSON object"
    if kind is Kind.COMMAND:
        if not isinstance(body.get("verb"), str) or not body["verb"]:
            return "command body requires a non-empty 'verb'"
        if "parameters" in body and not _check_str_map(body["parameters"]):
            return "command 'parameters' must map strings to strings"
    elif kind is Kind.PUBLISH:
        try:
            log_message_from_body(body)
        except (KeyError, ValueError, TypeError) as exc:
            return f"publish body is not a valid log message: {exc}"
    elif kind is Kind.SUBSCRIBE:
        try:
            subscription_from_body(body)
        except (KeyError, ValueError, TypeError) as exc:
            return f"subscribe body is not a valid subscription: {exc}"
    elif kind is Kind.ERROR:
        if not isinstance(body.get("code"), str) or not isinstance(body.get("message"), str):
            return "error body requires string 'code' and 'message'"
    elif kind is Kind.LOOKUP:
        if not isinstance(body.get("name"), str) or not body["name"]:
            return "lookup body requires a non-empty 'name'"
    return None


def encode(env: Envelope) -> bytes:
    """Encode to canonical bytes; raises UnencodableBody when the envelope
    violates its invariants (body/kind mismatch, missing correlation)."""
    if not isinstance(env.kind, Kind):
        raise UnencodableBody(f"unknown kind {env.kind!r}")
    complaint = _validate_body(env.kind, env.body)
    if complaint is not None:
        raise UnencodableBody(complaint)
    if env.kind in CORRELATED_KINDS and not env.correlation_id:
        raise UnencodableBody(f"{env.kind.value} envelopes must carry correlation_id")

    obj: dict[str, Any] = {"id": env.id, "kind": env.kind.value}
    if env.correlation_id is not None:
        obj["correlation_id"] = env.correlation_id
    if env.session_id is not None:
        obj["session_id"] = env.session_id
    obj["source"] = env.source
    obj["target"] = env.target
    obj["issued_at"] = format_timestamp(env.issued_at)
    obj["body"] = env.body
    try:
        return json.dumps(obj, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise UnencodableBody(f"body is not JSON-serializable: {exc}") from None


def decode(data: bytes | str) -> Envelope:
    """Parse canonical form. Unknown top-level fields are ignored; missing
    required fields, bad JSON/UTF-8, unknown kinds and kind/body mismatches
    are rejected with typed errors."""
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedEnvelope(f"invalid UTF-8: {exc}") from None
    else:
        text = data
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedEnvelope(f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedEnvelope("envelope must be a JSON object")

    for name in ("id", "kind", "source", "target", "issued_at", "body"):
        if name not in obj:
            raise MalformedEnvelope(f"missing required field {name!r}")
    for name in ("id", "kind", "source", "target", "issued_at"):
        if not isinstance(obj[name], str):
            raise MalformedEnvelope(f"field {name!r} must be a string")

    try:
        kind = Kind(obj["kind"])
    except ValueError:
        raise UnknownKind(f"unknown envelope kind {obj['kind']!r}") from None

    body = obj["body"]
    complaint = _validate_body(kind, body)
    if complaint is not None:
        raise BodyMismatch(complaint)

    correlation_id = obj.get("correlation_id")
    if correlation_id is not None and not isinstance(correlation_id, str):
        raise MalformedEnvelope("correlation_id must be a string")
    if kind in CORRELATED_KINDS and not correlation_id:
        raise BodyMismatch(f"{kind.value} envelopes must carry correlation_id")
    session_id = obj.get("session_id")
    if session_id is not None and not isinstance(session_id, str):
        raise MalformedEnvelope("session_id must be a string")

    try:
        issued_at = parse_timestamp(obj["issued_at"])
    except ValueError as exc:
        raise MalformedEnvelope(str(exc)) from None

    return Envelope(id=obj["id"], kind=kind, source=obj["source"], target=obj["target"],
                    body=body, issued_at=issued_at,
                    correlation_id=correlation_id, session_id=session_id)
