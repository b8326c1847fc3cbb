"""Resource service: the registry of resources and partitions, allocation
with contention checking, and the periodic availability scan.

Allocation and release go through a single writer lock so the exclusivity
check and the state mutation are atomic: a rejected allocation leaves
nothing marked. State is journaled as one canonical envelope per line and
replayed at startup, standing in for a configuration database.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime
from fnmatch import fnmatchcase
from typing import Callable, Optional

from . import transport, wire
from .errors import (
    AllocationExists,
    ConflictingDefinition,
    ContentionConflict,
    MalformedFilter,
    NoSuchAllocation,
    RcmsError,
    ResourceUnavailable,
    UnknownChild,
    UnknownPartition,
    UnknownResource,
)
from .model import (
    Availability,
    Partition,
    Resource,
    ResourceKind,
    effective_resources,
    utc_now,
)

log = logging.getLogger(__name__)

DEFAULT_SCAN_PERIOD = 30.0
DEFAULT_PROBE_TIMEOUT = 1.0
SERVICE_NAME = "resource-service"

FILTER_KEYS = {"kind", "availability", "attributes", "id_glob"}


@dataclass(frozen=True)
class Allocation:
    """Snapshot of a partition's effective set taken when a session claimed it."""

    session_id: str
    partition_id: str
    resource_ids: frozenset[str]
    allocated_at: datetime = field(default_factory=utc_now)

    def to_body(self) -> dict:
        return {
            "session_id": self.session_id,
            "partition_id": self.partition_id,
            "resource_ids": sorted(self.resource_ids),
            "allocated_at": wire.format_timestamp(self.allocated_at),
        }


@dataclass
class ScanReport:
    checked: int
    availability: dict[str, Availability]
    down: set[str]
    scanned_at: datetime = field(default_factory=utc_now)


def resource_to_body(res: Resource) -> dict:
    body = {
        "id": res.id,
        "kind": res.kind.value,
        "uri": res.uri,
        "attributes": dict(res.attributes),
        "exclusive": res.exclusive,
        "availability": res.availability.value,
    }
    if res.last_scanned is not None:
        body["last_scanned"] = wire.format_timestamp(res.last_scanned)
    return body


def resource_from_body(body: dict) -> Resource:
    return Resource(
        id=body["id"],
        kind=ResourceKind(body["kind"]),
        uri=body["uri"],
        attributes=dict(body.get("attributes", {})),
        exclusive=bool(body.get("exclusive", False)),
        availability=Availability(body.get("availability", "available")),
        last_scanned=wire.parse_timestamp(body["last_scanned"])
        if body.get("last_scanned") else None,
    )


def partition_to_body(p: Partition) -> dict:
    return {
        "id": p.id,
        "resource_ids": sorted(p.resource_ids),
        "children": list(p.children),
        "parent": p.parent,
    }


def partition_from_body(body: dict) -> Partition:
    return Partition(
        id=body["id"],
        resource_ids=frozenset(body.get("resource_ids", [])),
        children=tuple(body.get("children", [])),
        parent=body.get("parent"),
    )


def _compile_filter(spec: Optional[dict]) -> Callable[[Resource], bool]:
    spec = spec or {}
    if not isinstance(spec, dict):
        raise MalformedFilter(f"filter must be an object, got {type(spec).__name__}")
    unknown = set(spec) - FILTER_KEYS
    if unknown:
        raise MalformedFilter(f"unknown filter keys: {sorted(unknown)}")
    try:
        kind = ResourceKind(spec["kind"]) if "kind" in spec else None
        availability = Availability(spec["availability"]) if "availability" in spec else None
    except ValueError as exc:
        raise MalformedFilter(str(exc)) from None
    attributes = spec.get("attributes") or {}
    if not isinstance(attributes, dict):
        raise MalformedFilter("'attributes' must be an object")
    id_glob = spec.get("id_glob")

    def predicate(res: Resource) -> bool:
        if kind is not None and res.kind is not kind:
            return False
        if availability is not None and res.availability is not availability:
            return False
        for key, value in attributes.items():
            if res.attributes.get(key) != value:
                return False
        if id_glob is not None and not fnmatchcase(res.id, id_glob):
            return False
        return True

    return predicate


class ResourceService:
    def __init__(self, journal_path: Optional[str] = None,
                 prober: Optional[Callable[[str], bool]] = None,
                 probe_timeout: float = DEFAULT_PROBE_TIMEOUT,
                 scan_workers: int = 32):
        self._lock = threading.RLock()
        self._resources: dict[str, Resource] = {}
        self._partitions: dict[str, Partition] = {}
        self._allocations: dict[str, Allocation] = {}
        self._exclusive_holders: dict[str, str] = {}  # resource id -> session id
        self._version = 0
        self._prober = prober or (lambda uri: transport.probe_health(uri, timeout=probe_timeout))
        self._scan_workers = scan_workers
        self._scan_thread: Optional[threading.Thread] = None
        self._scan_stop = threading.Event()

        self._journal_fh = None
        self._journal_path = journal_path
        if journal_path:
            self._replay_journal(journal_path)
            self._journal_fh = open(journal_path, "ab")

    @property
    def version(self) -> int:
        with self._lock:
            return self._version

    # journal ---------------------------------------------------------------

    def _replay_journal(self, path: str) -> None:
        import os
        if not os.path.exists(path):
            return
        with open(path, "rb") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                env = wire.decode(line)
                if env.kind is wire.Kind.REGISTER:
                    entity = env.body["entity"]
                    if entity == "resource":
                        self.register_resource(resource_from_body(env.body["record"]),
                                               _journal=False)
                    elif entity == "partition":
                        self.define_partition(partition_from_body(env.body["record"]),
                                              _journal=False)
                elif env.kind is wire.Kind.EVENT:
                    event = env.body["event"]
                    if event == "allocate":
                        self.allocate(env.body["partition_id"], env.body["session_id"],
                                      _journal=False)
                    elif event == "release":
                        self.release(env.body["session_id"], _journal=False)

    def _journal(self, kind: wire.Kind, body: dict) -> None:
        if self._journal_fh is None:
            return
        env = wire.make_envelope(kind, SERVICE_NAME, "journal", body)
        self._journal_fh.write(wire.encode(env) + b"\n")
        self._journal_fh.flush()

    # registration ------------------------------------------------------------

    def register_resource(self, res: Resource, _journal: bool = True) -> str:
        """Idempotent upsert: re-registering an identical record is a no-op,
        a different uri/kind under the same id is a conflict."""
        with self._lock:
            existing = self._resources.get(res.id)
            if existing is not None:
                if existing.uri != res.uri or existing.kind != res.kind:
                    raise ConflictingDefinition(
                        f"resource {res.id!r} already registered with "
                        f"uri={existing.uri!r} kind={existing.kind.value!r}")
                return res.id
            stored = replace(res, availability=Availability.AVAILABLE, last_scanned=None)
            self._resources[res.id] = stored
            self._version += 1
            if _journal:
                self._journal(wire.Kind.REGISTER,
                              {"entity": "resource", "record": resource_to_body(stored)})
            return res.id

    def define_partition(self, p: Partition, _journal: bool = True) -> str:
        """Store (or redefine) a partition; referenced resources and children
        must exist and the resulting graph must stay a forest."""
        with self._lock:
            for rid in p.resource_ids:
                if rid not in self._resources:
                    raise UnknownResource(f"partition {p.id!r} references unknown resource {rid!r}")
            for child in p.children:
                if child not in self._partitions:
                    raise UnknownChild(f"partition {p.id!r} references unknown child {child!r}")
            trial = dict(self._partitions)
            trial[p.id] = p
            # a cycle created by this definition must surface now, not at use
            effective_resources(p, trial)
            parented = {c: replace(self._partitions[c], parent=p.id) for c in p.children}
            self._partitions.update(parented)
            self._partitions[p.id] = p
            self._version += 1
            if _journal:
                self._journal(wire.Kind.REGISTER,
                              {"entity": "partition", "record": partition_to_body(p)})
            return p.id

    def get_partition(self, pid: str) -> Partition:
        with self._lock:
            p = self._partitions.get(pid)
            if p is None:
                raise UnknownPartition(f"no partition {pid!r}")
            return p

    def list_partitions(self) -> list[Partition]:
        with self._lock:
            return sorted(self._partitions.values(), key=lambda p: p.id)

    def get_resource(self, rid: str) -> Resource:
        with self._lock:
            res = self._resources.get(rid)
            if res is None:
                raise UnknownResource(f"no resource {rid!r}")
            return res

    # allocation ----------------------------------------------------------------

    def effective_set(self, partition_id: str) -> set[str]:
        with self._lock:
            return effective_resources(self.get_partition(partition_id), self._partitions)

    def allocate(self, partition_id: str, session_id: str, _journal: bool = True) -> Allocation:
        """Atomically claim a partition's effective set for a session."""
        with self._lock:
            if session_id in self._allocations:
                raise AllocationExists(f"session {session_id!r} already holds an allocation")
            partition = self.get_partition(partition_id)
            wanted = effective_resources(partition, self._partitions)

            unreachable = set()
            contended = {}
            for rid in wanted:
                res = self._resources.get(rid)
                if res is None or res.availability is Availability.UNREACHABLE:
                    unreachable.add(rid)
                elif res.exclusive:
                    holder = self._exclusive_holders.get(rid)
                    if holder is not None and holder != session_id:
                        contended[rid] = holder
            if unreachable:
                raise ResourceUnavailable(unreachable)
            if contended:
                holder = sorted(set(contended.values()))[0]
                raise ContentionConflict(set(contended), holder)

            allocation = Allocation(session_id=session_id, partition_id=partition_id,
                                    resource_ids=frozenset(wanted))
            self._allocations[session_id] = allocation
            for rid in wanted:
                res = self._resources[rid]
                if res.exclusive:
                    self._exclusive_holders[rid] = session_id
                    self._resources[rid] = replace(res, availability=Availability.ALLOCATED)
            self._version += 1
            if _journal:
                self._journal(wire.Kind.EVENT,
                              {"event": "allocate", "partition_id": partition_id,
                               "session_id": session_id})
            return allocation

    def release(self, session_id: str, _journal: bool = True) -> None:
        with self._lock:
            allocation = self._allocations.pop(session_id, None)
            if allocation is None:
                raise NoSuchAllocation(f"session {session_id!r} holds no allocation")
            for rid in allocation.resource_ids:
                if self._exclusive_holders.get(rid) == session_id:
                    del self._exclusive_holders[rid]
                    res = self._resources.get(rid)
                    if res is not None:
                        self._resources[rid] = replace(res, availability=Availability.AVAILABLE)
            self._version += 1
            if _journal:
                self._journal(wire.Kind.EVENT,
                              {"event": "release", "session_id": session_id})

    def allocation_of(self, session_id: str) -> Optional[Allocation]:
        with self._lock:
            return self._allocations.get(session_id)

    # scanning -------------------------------------------------------------------

    def scan_once(self) -> ScanReport:
        """Probe every registered endpoint and refresh availability. Live
        exclusive allocations keep their allocated status; released resources
        pick up the probe verdict."""
        with self._lock:
            targets = {rid: res.uri for rid, res in self._resources.items()}
        results: dict[str, bool] = {}
        if targets:
            with ThreadPoolExecutor(max_workers=min(self._scan_workers, len(targets))) as pool:
                futures = {rid: pool.submit(self._prober, uri) for rid, uri in targets.items()}
                for rid, future in futures.items():
                    try:
                        results[rid] = bool(future.result())
                    except Exception:  # noqa: BLE001 - a probe crash means unreachable
                        results[rid] = False

        now = utc_now()
        report_availability: dict[str, Availability] = {}
        down: set[str] = set()
        changed = False
        with self._lock:
            for rid, reachable in results.items():
                res = self._resources.get(rid)
                if res is None:
                    continue
                if self._exclusive_holders.get(rid) is not None:
                    new_availability = Availability.ALLOCATED
                else:
                    new_availability = (Availability.AVAILABLE if reachable
                                        else Availability.UNREACHABLE)
                if res.availability is not new_availability:
                    changed = True
                self._resources[rid] = replace(res, availability=new_availability,
                                               last_scanned=now)
                report_availability[rid] = new_availability
                if not reachable:
                    down.add(rid)
            if changed:
                self._version += 1
        return ScanReport(checked=len(results), availability=report_availability, down=down,
                          scanned_at=now)

    def start_scanning(self, period: float = DEFAULT_SCAN_PERIOD) -> None:
        if self._scan_thread is not None:
            return
        self._scan_stop.clear()

        def loop():
            while not self._scan_stop.wait(period):
                try:
                    self.scan_once()
                except Exception:  # noqa: BLE001
                    log.exception("availability scan failed")

        self._scan_thread = threading.Thread(target=loop, name="rs-scan", daemon=True)
        self._scan_thread.start()

    def stop_scanning(self) -> None:
        self._scan_stop.set()
        if self._scan_thread is not None:
            self._scan_thread.join(timeout=5)
            self._scan_thread = None

    # queries -----------------------------------------------------------------

    def query_resources(self, filter_spec: Optional[dict] = None) -> list[Resource]:
        predicate = _compile_filter(filter_spec)
        with self._lock:
            return sorted((r for r in self._resources.values() if predicate(r)),
                          key=lambda r: r.id)

    def close(self) -> None:
        self.stop_scanning()
        if self._journal_fh is not None:
            self._journal_fh.close()
            self._journal_fh = None


class ResourceServiceServer:
    """Envelope facade: register/query plus allocate/release commands."""

    def __init__(self, service: Optional[ResourceService] = None,
                 host: str = "127.0.0.1", port: int = 0):
        self.service = service or ResourceService()
        self._host = transport.EnvelopeService(SERVICE_NAME, self._handle,
                                               host=host, port=port)

    @property
    def url(self) -> str:
        return self._host.url

    def start(self) -> "ResourceServiceServer":
        self._host.start()
        return self

    def stop(self) -> None:
        self._host.stop()
        self.service.close()

    def __enter__(self) -> "ResourceServiceServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()

    def _handle(self, env: wire.Envelope) -> wire.Envelope:
        svc = self.service
        if env.kind is wire.Kind.REGISTER:
            entity = env.body.get("entity")
            if entity == "resource":
                rid = svc.register_resource(resource_from_body(env.body["record"]))
                return wire.reply_to(env, wire.Kind.ACK, SERVICE_NAME, {"id": rid})
            if entity == "partition":
                pid = svc.define_partition(partition_from_body(env.body["record"]))
                return wire.reply_to(env, wire.Kind.ACK, SERVICE_NAME, {"id": pid})
            raise RcmsError(f"unknown register entity {entity!r}")
        if env.kind is wire.Kind.QUERY:
            subject = env.body.get("subject", "resources")
            if subject == "resources":
                resources = svc.query_resources(env.body.get("filter"))
                return wire.reply_to(env, wire.Kind.RESULT, SERVICE_NAME,
                                     {"resources": [resource_to_body(r) for r in resources],
                                      "version": svc.version})
            if subject == "partitions":
                return wire.reply_to(env, wire.Kind.RESULT, SERVICE_NAME,
                                     {"partitions": [partition_to_body(p)
                                                     for p in svc.list_partitions()],
                                      "version": svc.version})
            if subject == "partition":
                p = svc.get_partition(env.body["id"])
                return wire.reply_to(env, wire.Kind.RESULT, SERVICE_NAME,
                                     {"partition": partition_to_body(p)})
            if subject == "version":
                return wire.reply_to(env, wire.Kind.RESULT, SERVICE_NAME,
                                     {"version": svc.version})
            raise RcmsError(f"unknown query subject {subject!r}")
        if env.kind is wire.Kind.COMMAND:
            verb = env.body["verb"]
            params = env.body.get("parameters", {})
            if verb == "allocate":
                allocation = svc.allocate(params["partition_id"], params["session_id"])
                return wire.reply_to(env, wire.Kind.ACK, SERVICE_NAME,
                                     {"allocation": allocation.to_body()})
            if verb == "release":
                svc.release(params["session_id"])
                return wire.reply_to(env, wire.Kind.ACK, SERVICE_NAME, {})
            if verb == "scan":
                report = svc.scan_once()
                return wire.reply_to(env, wire.Kind.ACK, SERVICE_NAME,
                                     {"checked": report.checked,
                                      "down": sorted(report.down)})
            raise RcmsError(f"unknown command verb {verb!r}")
        raise RcmsError(f"resource service does not handle kind {env.kind.value!r}")


class ResourceServiceClient:
    """Typed remote access, with an optional read-through query cache that the
    registry's version counter invalidates."""

    def __init__(self, url: str, source: str = "client",
                 timeout: float = transport.DEFAULT_TIMEOUT, cache: bool = False):
        self.url = url
        self._source = source
        self._timeout = timeout
        self._cache_enabled = cache
        self._cache: dict[str, tuple[int, list[Resource]]] = {}

    def _exchange(self, kind: wire.Kind, body: dict) -> wire.Envelope:
        env = wire.make_envelope(kind, self._source, SERVICE_NAME, body)
        return transport.raise_for_error(
            transport.request(self.url, env, timeout=self._timeout))

    def register_resource(self, res: Resource) -> str:
        resp = self._exchange(wire.Kind.REGISTER,
                              {"entity": "resource", "record": resource_to_body(res)})
        return resp.body["id"]

    def define_partition(self, p: Partition) -> str:
        resp = self._exchange(wire.Kind.REGISTER,
                              {"entity": "partition", "record": partition_to_body(p)})
        return resp.body["id"]

    def version(self) -> int:
        return self._exchange(wire.Kind.QUERY, {"subject": "version"}).body["version"]

    def query_resources(self, filter_spec: Optional[dict] = None) -> list[Resource]:
        if self._cache_enabled:
            key = repr(sorted((filter_spec or {}).items()))
            cached = self._cache.get(key)
            if cached is not None and cached[0] == self.version():
                return cached[1]
        resp = self._exchange(wire.Kind.QUERY,
                              {"subject": "resources", "filter": filter_spec or {}})
        resources = [resource_from_body(b) for b in resp.body["resources"]]
        if self._cache_enabled:
            self._cache[repr(sorted((filter_spec or {}).items()))] = (
                resp.body["version"], resources)
        return resources

    def get_partition(self, pid: str) -> Partition:
        resp = self._exchange(wire.Kind.QUERY, {"subject": "partition", "id": pid})
        return partition_from_body(resp.body["partition"])

    def list_partitions(self) -> list[Partition]:
        resp = self._exchange(wire.Kind.QUERY, {"subject": "partitions"})
        return [partition_from_body(b) for b in resp.body["partitions"]]

    def allocate(self, partition_id: str, session_id: str) -> dict:
        resp = self._exchange(wire.Kind.COMMAND,
                              {"verb": "allocate",
                               "parameters": {"partition_id": partition_id,
                                              "session_id": session_id}})
        return resp.body["allocation"]

    def release(self, session_id: str) -> None:
        self._exchange(wire.Kind.COMMAND,
                       {"verb": "release", "parameters": {"session_id": session_id}})

    def effective_set(self, partition_id: str) -> set[str]:
        # resolved client-side from the partition forest
        partitions = {p.id: p for p in self.list_partitions()}
        if partition_id not in partitions:
            raise UnknownPartition(f"no partition {partition_id!r}")
        return effective_resources(partitions[partition_id], partitions)
