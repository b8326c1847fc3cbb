"""Storage backends for the monitor service.

A backend assigns the global, gap-free sequence numbers and answers catalog
queries. Three flavors share the interface: an in-process memory list, a
flat file of canonical envelopes (fsynced per batch of 64), and a socket
client to the shared relational-style store in :mod:`runctl.store`.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from datetime import datetime
from fnmatch import fnmatchcase
from typing import Iterable, Optional

from . import wire
from .errors import BackendFailure, MalformedCriteria
from .model import LogMessage, Severity

FILE_FSYNC_BATCH = 64


@dataclass(frozen=True)
class StoredMessage:
    """A catalogued record: the message plus what the service added."""

    seq: int
    msg: LogMessage
    received_at: datetime
    instance_id: str

    def to_body(self) -> dict:
        return {
            "seq": self.seq,
            "received_at": wire.format_timestamp(self.received_at),
            "instance_id": self.instance_id,
            "msg": wire.log_message_to_body(self.msg),
        }

    @classmethod
    def from_body(cls, body: dict) -> "StoredMessage":
        return cls(
            seq=int(body["seq"]),
            received_at=wire.parse_timestamp(body["received_at"]),
            instance_id=body["instance_id"],
            msg=wire.log_message_from_body(body["msg"]),
        )


@dataclass(frozen=True)
class QueryCriteria:
    """Catalog selection: source glob, severity floor, type set, time range,
    and seq-based pagination."""

    source_pattern: str = "*"
    min_severity: Severity = Severity.DEBUG
    msg_types: Optional[frozenset[str]] = None
    since: Optional[datetime] = None
    until: Optional[datetime] = None
    after_seq: int = 0
    limit: Optional[int] = None

    def __post_init__(self):
        if self.msg_types is not None:
            object.__setattr__(self, "msg_types", frozenset(self.msg_types))
        if self.limit is not None and self.limit < 0:
            raise MalformedCriteria(f"limit must be >= 0, got {self.limit}")
        if self.after_seq < 0:
            raise MalformedCriteria(f"after_seq must be >= 0, got {self.after_seq}")

    def matches(self, msg: LogMessage) -> bool:
        if msg.severity < self.min_severity:
            return False
        if self.msg_types is not None and msg.msg_type not in self.msg_types:
            return False
        if self.since is not None and msg.timestamp < self.since:
            return False
        if self.until is not None and msg.timestamp > self.until:
            return False
        return fnmatchcase(msg.source, self.source_pattern)

    def to_body(self) -> dict:
        body: dict = {
            "source_pattern": self.source_pattern,
            "min_severity": self.min_severity.label,
            "after_seq": self.after_seq,
        }
        if self.msg_types is not None:
            body["msg_types"] = sorted(self.msg_types)
        if self.since is not None:
            body["since"] = wire.format_timestamp(self.since)
        if self.until is not None:
            body["until"] = wire.format_timestamp(self.until)
        if self.limit is not None:
            body["limit"] = self.limit
        return body

    @classmethod
    def from_body(cls, body: dict) -> "QueryCriteria":
        known = {"source_pattern", "min_severity", "msg_types", "since",
                 "until", "after_seq", "limit"}
        unknown = set(body) - known
        if unknown:
            raise MalformedCriteria(f"unknown criteria fields: {sorted(unknown)}")
        try:
            return cls(
                source_pattern=body.get("source_pattern", "*"),
                min_severity=Severity.from_label(body.get("min_severity", "debug")),
                msg_types=frozenset(body["msg_types"]) if body.get("msg_types") is not None else None,
                since=wire.parse_timestamp(body["since"]) if body.get("since") else None,
                until=wire.parse_timestamp(body["until"]) if body.get("until") else None,
                after_seq=int(body.get("after_seq", 0)),
                limit=int(body["limit"]) if body.get("limit") is not None else None,
            )
        except (ValueError, TypeError, KeyError) as exc:
            raise MalformedCriteria(str(exc)) from None


def filter_stored(records: Iterable[StoredMessage], criteria: QueryCriteria) -> list[StoredMessage]:
    """Reference filter: linear scan in seq order honoring pagination."""
    out = []
    for rec in sorted(records, key=lambda r: r.seq):
        if rec.seq <= criteria.after_seq:
            continue
        if not criteria.matches(rec.msg):
            continue
        out.append(rec)
        if criteria.limit is not None and len(out) >= criteria.limit:
            break
    return out


class StorageBackend:
    """Interface: append is the only serialization point; query must equal a
    brute-force filter over everything appended."""

    def append(self, msg: LogMessage, received_at: datetime, instance_id: str) -> int:
        raise NotImplementedError

    def query(self, criteria: QueryCriteria) -> list[StoredMessage]:
        raise NotImplementedError

    def count(self) -> int:
        raise NotImplementedError

    def close(self) -> None:
        pass


class MemoryBackend(StorageBackend):
    def __init__(self):
        self._lock = threading.Lock()
        self._records: list[StoredMessage] = []

    def append(self, msg, received_at, instance_id) -> int:
        with self._lock:
            seq = len(self._records) + 1
            self._records.append(StoredMessage(seq, msg, received_at, instance_id))
        return seq

    def query(self, criteria: QueryCriteria) -> list[StoredMessage]:
        with self._lock:
            snapshot = list(self._records)
        return filter_stored(snapshot, criteria)

    def count(self) -> int:
        with self._lock:
            return len(self._records)


class FileBackend(StorageBackend):
    """Append-only flat file, one canonical event envelope per stored message,
    fsynced every FILE_FSYNC_BATCH appends. An in-memory mirror serves queries;
    existing files are replayed on startup."""

    def __init__(self, path: str):
        self._path = path
        self._lock = threading.Lock()
        self._records: list[StoredMessage] = []
        if os.path.exists(path):
            self._replay()
        self._fh = open(path, "ab")
        self._unsynced = 0

    def _replay(self) -> None:
        with open(self._path, "rb") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                env = wire.decode(line)
                self._records.append(StoredMessage.from_body(env.body))
        self._records.sort(key=lambda r: r.seq)

    def append(self, msg, received_at, instance_id) -> int:
        with self._lock:
            seq = len(self._records) + 1
            record = StoredMessage(seq, msg, received_at, instance_id)
            env = wire.make_envelope(wire.Kind.EVENT, instance_id, "store", record.to_body())
            try:
                self._fh.write(wire.encode(env) + b"\n")
                self._unsynced += 1
                if self._unsynced >= FILE_FSYNC_BATCH:
                    self._fh.flush()
                    os.fsync(self._fh.fileno())
                    self._unsynced = 0
            except OSError as exc:
                raise BackendFailure(f"append to {self._path} failed: {exc}") from exc
            self._records.append(record)
        return seq

    def query(self, criteria: QueryCriteria) -> list[StoredMessage]:
        with self._lock:
            snapshot = list(self._records)
        return filter_stored(snapshot, criteria)

    def count(self) -> int:
        with self._lock:
            return len(self._records)

    def close(self) -> None:
        with self._lock:
            try:
                self._fh.flush()
                os.fsync(self._fh.fileno())
            except (OSError, ValueError):
                pass
            self._fh.close()
