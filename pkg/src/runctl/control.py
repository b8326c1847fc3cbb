"""Session managers and the function-manager hierarchy: command expansion,
the three fan-out strategies, ack collection and state aggregation.

A FunctionManager owns a set of children (controlled leaf nodes, remote
child FMs, or in-process child FMs mirroring the partition hierarchy) and
delivers one command to all of them under a strategy:

  * sequential       - one request at a time, each waiting for its ack
  * bounded_parallel - at most ``worker_limit`` requests in flight
  * hierarchical     - a single request per child FM, which bounded-fans
                       to its own leaves

Fan-out never aborts on a child failure: a timeout or an error envelope is
an outcome like any other, so the per-child outcome map always covers every
addressed leaf.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from fnmatch import fnmatchcase
from typing import Callable, Mapping, Optional, Union

from . import transport, wire
from .errors import (
    EmptyChildSet,
    FmSpawnFailure,
    PartialFailure,
    RcmsError,
    SessionClosed,
    TransportError,
    UnknownVerb,
)
from .model import (
    FsmCommand,
    FsmState,
    FsmVerb,
    LogMessage,
    ResourceKind,
    Session,
    Severity,
    aggregate_state,
    transition_table,
    utc_now,
)

log = logging.getLogger(__name__)

DEFAULT_WORKER_LIMIT = 8
DEFAULT_CHILD_TIMEOUT = 5.0
SERVICE_NAME = "session-manager"


class Strategy(Enum):
    SEQUENTIAL = "sequential"
    BOUNDED_PARALLEL = "bounded_parallel"
    HIERARCHICAL = "hierarchical"


@dataclass(frozen=True)
class ErrorOutcome:
    code: str
    message: str = ""


Outcome = Union[FsmState, ErrorOutcome]


def outcome_to_body(outcome: Outcome) -> dict:
    if isinstance(outcome, FsmState):
        return {"state": outcome.value}
    return {"error": {"code": outcome.code, "message": outcome.message}}


def outcome_from_body(body: dict) -> Outcome:
    if "state" in body:
        return FsmState(body["state"])
    err = body.get("error", {})
    return ErrorOutcome(code=err.get("code", "InternalError"),
                        message=err.get("message", ""))


@dataclass(frozen=True)
class ChildRef:
    """One fan-out target: a leaf endpoint, a remote FM, or a local FM."""

    id: str
    url: Optional[str] = None
    is_fm: bool = False
    attributes: Mapping[str, str] = field(default_factory=dict)
    local_fm: Optional["FunctionManager"] = None


@dataclass
class FanoutResult:
    outcomes: dict[str, Outcome]
    elapsed: float

    @property
    def failed(self) -> set[str]:
        return {cid for cid, out in self.outcomes.items() if isinstance(out, ErrorOutcome)}

    @property
    def states(self) -> dict[str, FsmState]:
        return {cid: out for cid, out in self.outcomes.items() if isinstance(out, FsmState)}

    def state_multiset(self) -> list[str]:
        """Sorted per-child outcome labels, for strategy-equivalence checks."""
        labels = []
        for out in self.outcomes.values():
            labels.append(out.value if isinstance(out, FsmState) else f"error:{out.code}")
        return sorted(labels)


def _matches_selector(child: ChildRef, selector: str) -> bool:
    if selector == "*":
        return True
    if selector.startswith("attr:"):
        key, _, value = selector[len("attr:"):].partition("=")
        return child.attributes.get(key) == value
    return fnmatchcase(child.id, selector)


class FunctionManager:
    """Per-partition controller: expands nothing itself, just delivers one
    command to its children under the configured strategy and collects acks."""

    def __init__(self, fm_id: str, partition_id: str, children: list[ChildRef],
                 strategy: Strategy = Strategy.BOUNDED_PARALLEL,
                 worker_limit: int = DEFAULT_WORKER_LIMIT,
                 timeout: float = DEFAULT_CHILD_TIMEOUT,
                 request_fn: Callable = transport.request,
                 group_members: Optional[dict[str, list[str]]] = None):
        if worker_limit < 1:
            raise ValueError("worker_limit must be >= 1")
        if strategy is Strategy.HIERARCHICAL:
            bad = [c.id for c in children if not (c.is_fm or c.local_fm is not None)]
            if bad:
                raise ValueError(f"hierarchical FM must have only FM children, got leaves {bad}")
        self.id = fm_id
        self.partition_id = partition_id
        self.children = list(children)
        self.strategy = strategy
        self.worker_limit = worker_limit
        self.timeout = timeout
        self._request = request_fn
        # remote FM id -> leaf ids it covers; lets a dead FM's whole slice
        # surface as per-leaf outcomes instead of vanishing
        self._group_members = group_members or {}
        self.cached_child_states: dict[str, FsmState] = {}
        self._lock = threading.Lock()
        # persistent worker pool: keeps per-thread connections to children
        # alive across fan-outs instead of paying TCP setup every command
        self._executor: Optional[ThreadPoolExecutor] = None

    def _pool(self) -> ThreadPoolExecutor:
        with self._lock:
            if self._executor is None:
                size = (max(1, len(self.children)) if self.strategy is Strategy.HIERARCHICAL
                        else self.worker_limit)
                self._executor = ThreadPoolExecutor(max_workers=size,
                                                    thread_name_prefix=f"{self.id}-w")
            return self._executor

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=False)
            self._executor = None
        for child in self.children:
            if child.local_fm is not None:
                child.local_fm.close()

    # dispatch ----------------------------------------------------------------

    def _send_command(self, child: ChildRef, cmd: FsmCommand, selector: str) -> dict[str, Outcome]:
        if child.local_fm is not None:
            try:
                sub = child.local_fm.fanout(cmd, selector=selector)
                return dict(sub.outcomes)
            except EmptyChildSet:
                return {}
        body = wire.command_to_body(cmd)
        if child.is_fm and selector != "*":
            body["parameters"] = dict(body.get("parameters", {}), _selector=selector)
        env = wire.make_envelope(wire.Kind.COMMAND, self.id, child.id, body)
        try:
            resp = self._request(child.url, env, timeout=self.timeout)
        except transport.Timeout as exc:
            return self._whole_child_error(child, ErrorOutcome("Timeout", str(exc)))
        except (TransportError, transport.ProtocolError) as exc:
            return self._whole_child_error(child, ErrorOutcome("TransportError", str(exc)))
        if resp.kind is wire.Kind.ERROR:
            return self._whole_child_error(
                child, ErrorOutcome(resp.body.get("code", "InternalError"),
                                    resp.body.get("message", "")))
        if child.is_fm:
            return {cid: outcome_from_body(b)
                    for cid, b in resp.body.get("outcomes", {}).items()}
        return {child.id: FsmState(resp.body["state"])}

    def _whole_child_error(self, child: ChildRef, err: ErrorOutcome) -> dict[str, Outcome]:
        members = self._group_members.get(child.id)
        if child.is_fm and members:
            return {leaf: err for leaf in members}
        return {child.id: err}

    def fanout(self, cmd: FsmCommand, selector: str = "*") -> FanoutResult:
        """Deliver one command to every child the selector picks; wall time
        runs from the first send to the last ack."""
        targets = [c for c in self.children
                   if (c.is_fm or c.local_fm is not None) or _matches_selector(c, selector)]
        if not self.children:
            raise EmptyChildSet(f"fm {self.id!r} has no children")
        started = time.monotonic()
        merged: dict[str, Outcome] = {}

        if self.strategy is Strategy.SEQUENTIAL:
            for child in targets:
                merged.update(self._send_command(child, cmd, selector))
        elif targets:
            try:
                futures = [self._pool().submit(self._send_command, child, cmd, selector)
                           for child in targets]
            except RuntimeError as exc:  # racing a teardown
                raise RcmsError(f"fm {self.id!r} is shutting down: {exc}") from exc
            for future in futures:
                merged.update(future.result())

        elapsed = time.monotonic() - started
        with self._lock:
            for cid, outcome in merged.items():
                if isinstance(outcome, FsmState):
                    self.cached_child_states[cid] = outcome
        return FanoutResult(outcomes=merged, elapsed=elapsed)

    # state -------------------------------------------------------------------

    def _query_one(self, child: ChildRef) -> dict[str, FsmState]:
        if child.local_fm is not None:
            return child.local_fm.query_states()
        env = wire.make_envelope(wire.Kind.QUERY, self.id, child.id, {"subject": "state"})
        try:
            resp = self._request(child.url, env, timeout=self.timeout)
        except (TransportError, transport.ProtocolError):
            return {}
        if resp.kind is wire.Kind.ERROR:
            return {}
        if child.is_fm:
            return {cid: FsmState(v) for cid, v in resp.body.get("states", {}).items()}
        return {child.id: FsmState(resp.body["state"])}

    def query_states(self) -> dict[str, FsmState]:
        """Refresh and return leaf states (unreachable leaves are omitted)."""
        states: dict[str, FsmState] = {}
        if not self.children:
            return states
        for result in self._pool().map(self._query_one, self.children):
            states.update(result)
        with self._lock:
            self.cached_child_states.update(states)
        return states

    def aggregate(self) -> FsmState:
        with self._lock:
            states = list(self.cached_child_states.values())
        if not states:
            return FsmState.INITIAL
        return aggregate_state(states)


class FmServer:
    """Hosts a FunctionManager as an envelope service (the intermediate layer
    of a two-level hierarchy)."""

    def __init__(self, fm: FunctionManager, host: str = "127.0.0.1", port: int = 0):
        self.fm = fm
        self._service = transport.EnvelopeService(fm.id, self._handle, host=host, port=port)

    @property
    def url(self) -> str:
        return self._service.url

    def start(self) -> "FmServer":
        self._service.start()
        return self

    def stop(self) -> None:
        self._service.stop()
        self.fm.close()

    def __enter__(self) -> "FmServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()

    def _handle(self, env: wire.Envelope) -> wire.Envelope:
        if env.kind is wire.Kind.COMMAND:
            params = dict(env.body.get("parameters", {}))
            selector = params.pop("_selector", "*")
            cmd = FsmCommand(env.body["verb"], params)
            result = self.fm.fanout(cmd, selector=selector)
            return wire.reply_to(env, wire.Kind.ACK, self.fm.id, {
                "outcomes": {cid: outcome_to_body(out) for cid, out in result.outcomes.items()},
                "state": self.fm.aggregate().value,
            })
        if env.kind is wire.Kind.QUERY and env.body.get("subject") == "state":
            states = self.fm.query_states()
            return wire.reply_to(env, wire.Kind.ACK, self.fm.id, {
                "states": {cid: s.value for cid, s in states.items()},
                "state": self.fm.aggregate().value,
            })
        raise RcmsError(f"fm does not handle kind {env.kind.value!r}")


# command expansion -------------------------------------------------------------

@dataclass(frozen=True)
class PlanStep:
    selector: str
    command: FsmCommand


@dataclass(frozen=True)
class CommandPlan:
    high_level_verb: str
    steps: tuple[PlanStep, ...]

    def __post_init__(self):
        if not self.steps:
            raise ValueError("a command plan needs at least one step")


_FSM_VERBS = {v.value for v in FsmVerb}


class ExpansionTable:
    """Maps a high-level verb to ordered phases. The default behavior is a
    broadcast of the identical state-machine command to all children; records
    loaded from a table file override per subsystem (glob on the top-level
    partition id)."""

    def __init__(self, records: Optional[list[dict]] = None):
        self._records = list(records or [])
        for rec in self._records:
            if not rec.get("verb") or not isinstance(rec.get("phases"), list) or not rec["phases"]:
                raise UnknownVerb(f"malformed expansion record: {rec!r}")

    @classmethod
    def from_file(cls, path: str) -> "ExpansionTable":
        with open(path, "rb") as fh:
            data = json.load(fh)
        return cls(data.get("expansions", []))

    def expand(self, verb: str, subsystem: str = "*") -> CommandPlan:
        for rec in self._records:
            if rec["verb"] == verb and fnmatchcase(subsystem, rec.get("subsystem", "*")):
                steps = tuple(
                    PlanStep(selector=phase.get("selector", "*"),
                             command=FsmCommand(phase["verb"],
                                                phase.get("parameters", {})))
                    for phase in rec["phases"])
                return CommandPlan(high_level_verb=verb, steps=steps)
        if verb in _FSM_VERBS:
            return CommandPlan(high_level_verb=verb,
                               steps=(PlanStep(selector="*", command=FsmCommand(verb)),))
        raise UnknownVerb(f"verb {verb!r} is not in the expansion table")


# session management -------------------------------------------------------------

@dataclass
class StepReport:
    verb: str
    selector: str
    outcomes: dict[str, Outcome]
    elapsed: float

    def to_body(self) -> dict:
        return {
            "verb": self.verb,
            "selector": self.selector,
            "outcomes": {cid: outcome_to_body(out) for cid, out in self.outcomes.items()},
            "elapsed": self.elapsed,
        }


@dataclass
class SessionReport:
    session_id: str
    verb: str
    state: FsmState
    steps: list[StepReport]
    elapsed: float

    @property
    def outcomes(self) -> dict[str, Outcome]:
        merged: dict[str, Outcome] = {}
        for step in self.steps:
            merged.update(step.outcomes)
        return merged

    @property
    def failed(self) -> set[str]:
        return {cid for cid, out in self.outcomes.items() if isinstance(out, ErrorOutcome)}

    def to_body(self) -> dict:
        return {
            "session_id": self.session_id,
            "verb": self.verb,
            "state": self.state.value,
            "steps": [s.to_body() for s in self.steps],
            "elapsed": self.elapsed,
            "failed": sorted(self.failed),
        }


@dataclass
class _LiveSession:
    session: Session
    root_fm: FunctionManager
    fms: dict[str, FunctionManager]  # partition id -> FM
    lock: threading.Lock = field(default_factory=threading.Lock)
    closed: bool = False
    last_report: Optional[SessionReport] = None


class SessionManager:
    """Owns sessions: opens them against the resource service, drives command
    plans through the per-partition FM tree, reports aggregate state."""

    def __init__(self, resources, publish: Optional[Callable[[LogMessage], None]] = None,
                 expansion_table: Optional[ExpansionTable] = None,
                 strategy: Strategy = Strategy.BOUNDED_PARALLEL,
                 worker_limit: int = DEFAULT_WORKER_LIMIT,
                 timeout: float = DEFAULT_CHILD_TIMEOUT,
                 request_fn: Callable = transport.request,
                 manager_id: str = "smr-1"):
        self.id = manager_id
        self._resources = resources
        self._publish = publish
        self._table = expansion_table or ExpansionTable()
        self._strategy = strategy
        self._worker_limit = worker_limit
        self._timeout = timeout
        self._request_fn = request_fn
        self._sessions: dict[str, _LiveSession] = {}
        self._lock = threading.Lock()
        self.proposals: list[dict] = []

    # helpers --------------------------------------------------------------

    def _log(self, severity: Severity, msg_type: str, text: str) -> None:
        if self._publish is None:
            return
        try:
            self._publish(LogMessage(source=self.id, msg_type=msg_type,
                                     severity=severity, payload=text))
        except Exception:  # noqa: BLE001 - monitoring must never block control
            log.warning("could not publish %s to ims", msg_type)

    def _resource_map(self) -> dict:
        return {r.id: r for r in self._resources.query_resources()}

    def _build_fm_tree(self, partition_id: str, session_id: str,
                       resources: dict) -> tuple[FunctionManager, dict[str, FunctionManager]]:
        fms: dict[str, FunctionManager] = {}

        def build(pid: str) -> FunctionManager:
            partition = self._resources.get_partition(pid)
            children: list[ChildRef] = []
            for child_pid in partition.children:
                child_fm = build(child_pid)
                children.append(ChildRef(id=child_pid, local_fm=child_fm))
            for rid in sorted(partition.resource_ids):
                res = resources.get(rid)
                if res is None or res.kind is not ResourceKind.SOFTWARE:
                    continue  # hardware is allocated but not commanded
                children.append(ChildRef(id=rid, url=res.uri + transport.ENVELOPE_PATH,
                                         attributes=dict(res.attributes)))
            fm = FunctionManager(
                fm_id=f"fm-{pid}-{session_id}", partition_id=pid, children=children,
                strategy=self._strategy, worker_limit=self._worker_limit,
                timeout=self._timeout, request_fn=self._request_fn)
            fms[pid] = fm
            return fm

        try:
            root = build(partition_id)
        except RcmsError:
            raise
        except Exception as exc:
            raise FmSpawnFailure(f"could not build fm tree for {partition_id!r}: {exc}") from exc
        return root, fms

    # operations ------------------------------------------------------------

    def open_session(self, partition_id: str, user: str) -> Session:
        session_id = f"sess-{uuid.uuid4().hex[:8]}"
        self._resources.allocate(partition_id, session_id)
        try:
            root, fms = self._build_fm_tree(partition_id, session_id, self._resource_map())
        except Exception:
            self._resources.release(session_id)
            raise
        states = root.query_states()
        state = aggregate_state(list(states.values())) if states else FsmState.INITIAL
        session = Session(id=session_id, partition_id=partition_id, state=state,
                          users=(user,), created_at=utc_now())
        with self._lock:
            self._sessions[session_id] = _LiveSession(session=session, root_fm=root, fms=fms)
        self._log(Severity.INFO, "session-open",
                  f"session={session_id} partition={partition_id} user={user}")
        return session

    def _live(self, session_id: str) -> _LiveSession:
        with self._lock:
            live = self._sessions.get(session_id)
        if live is None or live.closed:
            raise SessionClosed(f"session {session_id!r} is not open")
        return live

    def expand(self, verb: str, partition_id: str) -> CommandPlan:
        return self._table.expand(verb, subsystem=partition_id)

    def control(self, session_id: str, verb: str) -> SessionReport:
        """Expand the verb and execute the plan through the root FM. Raises
        PartialFailure (carrying the full report) when any node failed."""
        live = self._live(session_id)
        with live.lock:  # one control verb at a time per session
            plan = self.expand(verb, live.session.partition_id)
            started = time.monotonic()
            steps: list[StepReport] = []
            for step in plan.steps:
                result = live.root_fm.fanout(step.command, selector=step.selector)
                if not result.outcomes:
                    raise EmptyChildSet(
                        f"plan step selector {step.selector!r} matched no nodes")
                steps.append(StepReport(verb=step.command.verb, selector=step.selector,
                                        outcomes=result.outcomes, elapsed=result.elapsed))
                self._log(Severity.INFO, "control-step",
                          f"session={session_id} verb={step.command.verb} "
                          f"selector={step.selector} failed={len(result.outcomes) - len(result.states)} "
                          f"elapsed={result.elapsed:.3f}s")
            state = live.root_fm.aggregate()
            report = SessionReport(session_id=session_id, verb=verb, state=state,
                                   steps=steps, elapsed=time.monotonic() - started)
            live.session = replace(live.session, state=state)
            live.last_report = report
        if report.failed:
            raise PartialFailure(report)
        return report

    def close_session(self, session_id: str) -> None:
        """Best-effort teardown: halt broadcast, then the allocation is
        released no matter what. A second close is a no-op."""
        with self._lock:
            live = self._sessions.get(session_id)
            if live is None or live.closed:
                return
            live.closed = True
        try:
            result = live.root_fm.fanout(FsmCommand("halt"))
            if result.failed:
                self._log(Severity.WARN, "session-close",
                          f"session={session_id} unreachable_leaves={sorted(result.failed)}")
        except RcmsError as exc:
            self._log(Severity.WARN, "session-close", f"session={session_id} halt failed: {exc}")
        try:
            self._resources.release(session_id)
        except RcmsError as exc:
            self._log(Severity.WARN, "session-close",
                      f"session={session_id} release failed: {exc}")
        live.session = replace(live.session, state=live.root_fm.aggregate())
        live.root_fm.close()
        self._log(Severity.INFO, "session-close", f"session={session_id} closed")

    # introspection -----------------------------------------------------------

    def list_sessions(self) -> list[dict]:
        with self._lock:
            lives = list(self._sessions.values())
        return [{
            "id": live.session.id,
            "partition_id": live.session.partition_id,
            "state": live.session.state.value,
            "users": list(live.session.users),
            "created_at": wire.format_timestamp(live.session.created_at),
            "closed": live.closed,
        } for live in lives]

    def session_tree(self, session_id: str) -> dict:
        with self._lock:
            live = self._sessions.get(session_id)
        if live is None:
            raise SessionClosed(f"session {session_id!r} is not open")

        def node(pid: str) -> dict:
            fm = live.fms[pid]
            leaves = []
            for c in fm.children:
                if c.local_fm is not None:
                    continue
                state = fm.cached_child_states.get(c.id)
                leaves.append({"id": c.id, "state": state.value if state else None})
            children = [node(c.id) for c in fm.children if c.local_fm is not None]
            return {"partition_id": pid, "state": fm.aggregate().value,
                    "leaves": leaves, "children": children}

        return node(live.session.partition_id)

    def add_proposal(self, proposal: dict) -> None:
        with self._lock:
            self.proposals.append(proposal)


class SessionManagerServer:
    """Envelope facade for the session manager (what the console talks to)."""

    def __init__(self, manager: SessionManager, host: str = "127.0.0.1", port: int = 0):
        self.manager = manager
        self._service = transport.EnvelopeService(SERVICE_NAME, self._handle,
                                                  host=host, port=port)

    @property
    def url(self) -> str:
        return self._service.url

    def start(self) -> "SessionManagerServer":
        self._service.start()
        return self

    def stop(self) -> None:
        self._service.stop()

    def __enter__(self) -> "SessionManagerServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()

    def _handle(self, env: wire.Envelope) -> wire.Envelope:
        mgr = self.manager
        if env.kind is wire.Kind.COMMAND:
            verb = env.body["verb"]
            params = env.body.get("parameters", {})
            if verb == "open_session":
                session = mgr.open_session(params["partition_id"], params.get("user", "unknown"))
                return wire.reply_to(env, wire.Kind.ACK, mgr.id, {
                    "session": {"id": session.id, "partition_id": session.partition_id,
                                "state": session.state.value, "users": list(session.users)}})
            if verb == "close_session":
                mgr.close_session(params["session_id"])
                return wire.reply_to(env, wire.Kind.ACK, mgr.id, {})
            if verb == "control":
                try:
                    report = mgr.control(params["session_id"], params["control_verb"])
                except PartialFailure as exc:
                    body = exc.to_body()
                    body["details"]["report"] = exc.report.to_body() if exc.report else None
                    return wire.reply_to(env, wire.Kind.ERROR, mgr.id, body)
                return wire.reply_to(env, wire.Kind.ACK, mgr.id, {"report": report.to_body()})
            raise RcmsError(f"unknown command verb {verb!r}")
        if env.kind is wire.Kind.QUERY:
            subject = env.body.get("subject")
            if subject == "sessions":
                return wire.reply_to(env, wire.Kind.RESULT, mgr.id,
                                     {"sessions": mgr.list_sessions()})
            if subject == "session":
                sid = env.body["id"]
                tree = mgr.session_tree(sid)
                with mgr._lock:
                    live = mgr._sessions[sid]
                    last = live.last_report.to_body() if live.last_report else None
                return wire.reply_to(env, wire.Kind.RESULT, mgr.id,
                                     {"tree": tree, "state": live.session.state.value,
                                      "closed": live.closed, "last_report": last})
            if subject == "fsm":
                return wire.reply_to(env, wire.Kind.RESULT, mgr.id, {
                    "states": [s.value for s in FsmState],
                    "verbs": [v.value for v in FsmVerb],
                    "table": transition_table()})
            if subject == "proposals":
                with mgr._lock:
                    proposals = list(mgr.proposals)
                return wire.reply_to(env, wire.Kind.RESULT, mgr.id, {"proposals": proposals})
            raise RcmsError(f"unknown query subject {subject!r}")
        if env.kind is wire.Kind.EVENT:
            # recovery suggestions from the problem solver land here
            mgr.add_proposal(dict(env.body))
            return wire.reply_to(env, wire.Kind.ACK, mgr.id, {})
        raise RcmsError(f"session manager does not handle kind {env.kind.value!r}")
