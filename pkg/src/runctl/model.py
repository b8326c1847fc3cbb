"""Domain types shared by every service: resources, partitions, sessions,
the controlled-node finite-state machine, and monitor records.

Everything here is an immutable value; the operations are pure functions
and safe to call from any number of concurrent contexts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum, IntEnum
from fnmatch import fnmatchcase
from typing import Mapping, Optional

from .errors import CycleDetected, EmptyChildSet, IllegalTransition


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


class FsmState(Enum):
    INITIAL = "Initial"
    HALTED = "Halted"
    CONFIGURED = "Configured"
    RUNNING = "Running"
    PAUSED = "Paused"
    FAILED = "Failed"
    MIXED = "Mixed"  # aggregation sentinel, never held by a leaf


class FsmVerb(Enum):
    INITIALIZE = "initialize"
    CONFIGURE = "configure"
    START = "start"
    PAUSE = "pause"
    RESUME = "resume"
    STOP = "stop"
    HALT = "halt"
    RESET = "reset"


_LEAF_STATES = tuple(s for s in FsmState if s is not FsmState.MIXED)

_TRANSITIONS: dict[tuple[FsmState, FsmVerb], FsmState] = {
    (FsmState.INITIAL, FsmVerb.INITIALIZE): FsmState.HALTED,
    (FsmState.HALTED, FsmVerb.CONFIGURE): FsmState.CONFIGURED,
    (FsmState.CONFIGURED, FsmVerb.START): FsmState.RUNNING,
    (FsmState.RUNNING, FsmVerb.PAUSE): FsmState.PAUSED,
    (FsmState.PAUSED, FsmVerb.RESUME): FsmState.RUNNING,
    (FsmState.RUNNING, FsmVerb.STOP): FsmState.CONFIGURED,
    (FsmState.PAUSED, FsmVerb.STOP): FsmState.CONFIGURED,
    (FsmState.CONFIGURED, FsmVerb.HALT): FsmState.HALTED,
    (FsmState.RUNNING, FsmVerb.HALT): FsmState.HALTED,
    (FsmState.PAUSED, FsmVerb.HALT): FsmState.HALTED,
}
# reset is the recovery path: legal from every non-aggregated state, Failed included
for _state in _LEAF_STATES:
    _TRANSITIONS[(_state, FsmVerb.RESET)] = FsmState.INITIAL


class Severity(IntEnum):
    """Monitor-record severity ladder; comparisons follow the numeric rank."""

    DEBUG = 10
    INFO = 20
    WARN = 30
    ERROR = 40
    FATAL = 50

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "Severity":
        try:
            return cls[str(label).upper()]
        except KeyError:
            raise ValueError(f"unknown severity {label!r}") from None


class ResourceKind(Enum):
    HARDWARE = "hardware"
    SOFTWARE = "software"


class Availability(Enum):
    AVAILABLE = "available"
    UNREACHABLE = "unreachable"
    ALLOCATED = "allocated"


@dataclass(frozen=True)
class Resource:
    """A registrable hardware or software unit addressed by its endpoint URI."""

    id: str
    kind: ResourceKind
    uri: str
    attributes: Mapping[str, str] = field(default_factory=dict)
    exclusive: bool = False
    availability: Availability = Availability.AVAILABLE
    last_scanned: Optional[datetime] = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("resource id must be non-empty")
        if not self.uri:
            raise ValueError(f"resource {self.id!r}: uri must be non-empty")


@dataclass(frozen=True)
class Partition:
    """A shareable grouping of resources; partitions form a forest."""

    id: str
    resource_ids: frozenset[str] = frozenset()
    children: tuple[str, ...] = ()
    parent: Optional[str] = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("partition id must be non-empty")
        object.__setattr__(self, "resource_ids", frozenset(self.resource_ids))
        object.__setattr__(self, "children", tuple(self.children))


@dataclass(frozen=True)
class Session:
    """One running of a partition, owned by a session manager."""

    id: str
    partition_id: str
    state: FsmState = FsmState.INITIAL
    users: tuple[str, ...] = ()
    created_at: datetime = field(default_factory=utc_now)


@dataclass(frozen=True)
class FsmCommand:
    verb: str
    parameters: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.verb:
            raise ValueError("command verb must be non-empty")


@dataclass(frozen=True)
class LogMessage:
    """Catalogued monitor record; payload is opaque to the services."""

    source: str
    msg_type: str
    severity: Severity
    timestamp: datetime = field(default_factory=utc_now)
    payload: str = ""


@dataclass(frozen=True)
class Subscription:
    """Filter plus callback registration against the monitor service.

    A message matches iff every present criterion matches: source glob,
    minimum severity, optional type set, optional lower timestamp bound.
    """

    id: str
    callback_url: str
    source_pattern: str = "*"
    min_severity: Severity = Severity.DEBUG
    msg_types: Optional[frozenset[str]] = None
    since: Optional[datetime] = None

    def __post_init__(self):
        if self.msg_types is not None:
            object.__setattr__(self, "msg_types", frozenset(self.msg_types))

    def matches(self, msg: LogMessage) -> bool:
        if msg.severity < self.min_severity:
            return False
        if self.msg_types is not None and msg.msg_type not in self.msg_types:
            return False
        if self.since is not None and msg.timestamp < self.since:
            return False
        return fnmatchcase(msg.source, self.source_pattern)


def fsm_transition(state: FsmState, cmd: FsmCommand) -> FsmState:
    """Resolve one command against the fixed transition table.

    Raises IllegalTransition when the (state, verb) pair has no row, when
    the verb is not a state-machine verb, or when state is the aggregation
    sentinel Mixed (which no leaf may hold).
    """
    try:
        verb = FsmVerb(cmd.verb)
    except ValueError:
        raise IllegalTransition(state, cmd.verb) from None
    target = _TRANSITIONS.get((state, verb))
    if target is None:
        raise IllegalTransition(state, verb)
    return target


def legal_verbs(state: FsmState) -> list[FsmVerb]:
    return [verb for (src, verb) in _TRANSITIONS if src is state]


def transition_table() -> list[dict[str, str]]:
    """The table as plain records (what the console fetches at load)."""
    return [
        {"state": src.value, "verb": verb.value, "target": dst.value}
        for (src, verb), dst in sorted(
            _TRANSITIONS.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value)
        )
    ]


def aggregate_state(children: list[FsmState]) -> FsmState:
    """Roll child states up: failure dominates, unanimity passes through,
    anything else is the Mixed sentinel."""
    if not children:
        raise EmptyChildSet("cannot aggregate an empty child set")
    if any(c is FsmState.FAILED for c in children):
        return FsmState.FAILED
    first = children[0]
    if all(c is first for c in children):
        return first
    return FsmState.MIXED


def effective_resources(partition: Partition, partitions: Mapping[str, Partition]) -> set[str]:
    """Union of the partition's own resources and all descendants' sets.

    Raises CycleDetected if the stored data violates the forest invariant.
    """
    result: set[str] = set()
    on_path: set[str] = set()

    def visit(pid: str) -> None:
        if pid in on_path:
            raise CycleDetected(f"partition cycle through {pid!r}")
        node = partitions.get(pid)
        if node is None:
            return
        on_path.add(pid)
        result.update(node.resource_ids)
        for child in node.children:
            visit(child)
        on_path.discard(pid)

    result.update(partition.resource_ids)
    on_path.add(partition.id)
    for child in partition.children:
        visit(child)
    return result
