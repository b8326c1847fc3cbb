"""Problem solver: a sliding-window correlation engine over the monitor
stream that emits recovery suggestions.

Rules are threshold-in-window: when at least K matching messages land
within W seconds (measured on the messages' own timestamps, so a replayed
stream evaluates identically every time), the rule fires once and then
rests for its cooldown. Proposals are advisory only — the solver never
sends a command envelope, just suggestion events and warn messages.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
from collections import deque
from dataclasses import dataclass
from datetime import datetime
from typing import Callable, Optional

from . import transport, wire
from .errors import MalformedRule, RcmsError, TransportError
from .ims import ImsClient
from .model import LogMessage, Severity, Subscription
from .storage import StoredMessage

log = logging.getLogger(__name__)

SERVICE_NAME = "solver"


@dataclass(frozen=True)
class RuleAction:
    kind: str  # "propose" | "notify"
    verb: Optional[str] = None
    partition_id: Optional[str] = None
    text: Optional[str] = None

    def __post_init__(self):
        if self.kind == "propose":
            if not self.verb or not self.partition_id:
                raise MalformedRule("propose action needs 'verb' and 'partition_id'")
        elif self.kind == "notify":
            if not self.text:
                raise MalformedRule("notify action needs 'text'")
        else:
            raise MalformedRule(f"unknown action kind {self.kind!r}")

    def to_body(self) -> dict:
        if self.kind == "propose":
            return {"kind": "propose", "verb": self.verb, "partition_id": self.partition_id}
        return {"kind": "notify", "text": self.text}


@dataclass(frozen=True)
class Rule:
    id: str
    threshold: int
    window: float
    action: RuleAction
    source_pattern: str = "*"
    min_severity: Severity = Severity.DEBUG
    msg_types: Optional[frozenset[str]] = None
    cooldown: float = 0.0

    def __post_init__(self):
        if self.threshold < 1:
            raise MalformedRule(f"rule {self.id!r}: threshold must be >= 1")
        if self.window <= 0:
            raise MalformedRule(f"rule {self.id!r}: window must be > 0")
        if self.cooldown < 0:
            raise MalformedRule(f"rule {self.id!r}: cooldown must be >= 0")
        if self.msg_types is not None:
            object.__setattr__(self, "msg_types", frozenset(self.msg_types))

    def matches(self, msg: LogMessage) -> bool:
        from fnmatch import fnmatchcase
        if msg.severity < self.min_severity:
            return False
        if self.msg_types is not None and msg.msg_type not in self.msg_types:
            return False
        return fnmatchcase(msg.source, self.source_pattern)


@dataclass(frozen=True)
class Proposal:
    rule_id: str
    fired_at: datetime
    evidence: tuple[int, ...]
    action: RuleAction

    def to_body(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "fired_at": wire.format_timestamp(self.fired_at),
            "evidence": list(self.evidence),
            "action": self.action.to_body(),
        }


def rule_from_record(record: dict) -> Rule:
    try:
        action_rec = record["action"]
        action = RuleAction(
            kind=action_rec["kind"],
            verb=action_rec.get("verb"),
            partition_id=action_rec.get("partition_id"),
            text=action_rec.get("text"),
        )
        return Rule(
            id=record["id"],
            threshold=int(record["threshold"]),
            window=float(record["window"]),
            action=action,
            source_pattern=record.get("source_pattern", "*"),
            min_severity=Severity.from_label(record.get("min_severity", "debug")),
            msg_types=frozenset(record["msg_types"]) if record.get("msg_types") else None,
            cooldown=float(record.get("cooldown", 0.0)),
        )
    except MalformedRule:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedRule(f"bad rule record {record.get('id', '?')!r}: {exc}") from None


def load_rules(path: str) -> list[Rule]:
    with open(path, "rb") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MalformedRule(f"ruleset does not parse: {exc}") from None
    rules = [rule_from_record(rec) for rec in data.get("rules", [])]
    seen = set()
    for rule in rules:
        if rule.id in seen:
            raise MalformedRule(f"duplicate rule id {rule.id!r}")
        seen.add(rule.id)
    return rules


def merged_subscription(rules: list[Rule], sub_id: str, callback_url: str) -> Optional[Subscription]:
    """One subscription covering the union of all rule patterns (each rule
    still re-filters individually on delivery)."""
    if not rules:
        return None
    patterns = {r.source_pattern for r in rules}
    msg_types = None
    if all(r.msg_types is not None for r in rules):
        merged: set[str] = set()
        for r in rules:
            merged |= r.msg_types
        msg_types = frozenset(merged)
    return Subscription(
        id=sub_id,
        callback_url=callback_url,
        source_pattern=patterns.pop() if len(patterns) == 1 else "*",
        min_severity=min(r.min_severity for r in rules),
        msg_types=msg_types,
    )


class RuleEngine:
    """Deterministic single-stream evaluation: same ordered message stream
    plus ruleset always yields the same proposal sequence."""

    def __init__(self, rules: list[Rule]):
        self.rules = list(rules)
        self._buffers: dict[str, deque] = {r.id: deque() for r in self.rules}
        self._last_fired: dict[str, Optional[datetime]] = {r.id: None for r in self.rules}

    def ingest(self, stored: StoredMessage) -> list[Proposal]:
        proposals = []
        t = stored.msg.timestamp
        for rule in self.rules:
            if not rule.matches(stored.msg):
                continue
            buf = self._buffers[rule.id]
            buf.append((t, stored.seq))
            while buf and (t - buf[0][0]).total_seconds() > rule.window:
                buf.popleft()
            last = self._last_fired[rule.id]
            in_cooldown = (last is not None
                           and (t - last).total_seconds() < rule.cooldown)
            if len(buf) >= rule.threshold and not in_cooldown:
                self._last_fired[rule.id] = t
                proposals.append(Proposal(
                    rule_id=rule.id, fired_at=t,
                    evidence=tuple(seq for _, seq in buf),
                    action=rule.action))
        return proposals


class SolverService:
    """Wires the engine to a live monitor service: subscribes with the merged
    pattern, ingests deliveries in arrival order on one evaluation thread,
    and emits notify-warns / suggestion events."""

    def __init__(self, rules: list[Rule], ims_url: str,
                 session_manager_url: Optional[str] = None,
                 host: str = "127.0.0.1", port: int = 0,
                 push_fn: Callable = transport.push,
                 source: str = SERVICE_NAME):
        self.rules = rules
        self.engine = RuleEngine(rules)
        self._ims_url = ims_url
        self._sm_url = session_manager_url
        self._push = push_fn
        self._source = source
        self._queue: queue.Queue = queue.Queue()
        self._service = transport.EnvelopeService(source, self._receive, host=host, port=port)
        self._worker: Optional[threading.Thread] = None
        self._stop = threading.Event()
        self._client = ImsClient(ims_url, source=source)
        self._sub_id: Optional[str] = None
        self.emitted: list[Proposal] = []

    @property
    def url(self) -> str:
        return self._service.url

    def _receive(self, env: wire.Envelope) -> wire.Envelope:
        if env.kind is wire.Kind.EVENT:
            if not env.body.get("probe"):
                self._queue.put(StoredMessage.from_body(env.body))
            return wire.reply_to(env, wire.Kind.ACK, self._source, {})
        raise RcmsError(f"solver does not handle kind {env.kind.value!r}")

    def _emit(self, proposal: Proposal) -> None:
        self.emitted.append(proposal)
        if proposal.action.kind == "notify":
            try:
                self._client.publish(LogMessage(
                    source=self._source, msg_type="solver-notify", severity=Severity.WARN,
                    payload=f"rule={proposal.rule_id} {proposal.action.text} "
                            f"evidence={list(proposal.evidence)}"))
            except (TransportError, RcmsError):
                log.warning("could not publish notify for rule %s", proposal.rule_id)
        elif proposal.action.kind == "propose" and self._sm_url:
            env = wire.make_envelope(wire.Kind.EVENT, self._source, "session-manager",
                                     proposal.to_body())
            try:
                self._push(self._sm_url, env, timeout=2.0)
            except TransportError:
                log.warning("could not deliver proposal for rule %s", proposal.rule_id)

    def _run(self) -> None:
        while not self._stop.is_set():
            try:
                stored = self._queue.get(timeout=0.2)
            except queue.Empty:
                continue
            for proposal in self.engine.ingest(stored):
                self._emit(proposal)

    def start(self) -> "SolverService":
        self._service.start()
        if self.rules:
            sub = merged_subscription(self.rules, f"{self._source}-sub", self.url)
            self._sub_id = self._client.subscribe(sub)
        self._worker = threading.Thread(target=self._run, name="solver-eval", daemon=True)
        self._worker.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._worker is not None:
            self._worker.join(timeout=5)
        if self._sub_id is not None:
            try:
                self._client.unsubscribe(self._sub_id)
            except (TransportError, RcmsError):
                pass
        self._service.stop()

    def __enter__(self) -> "SolverService":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()
