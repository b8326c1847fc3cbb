"""Shared message store: one process owns the sqlite catalog and serves
append/query/count to any number of monitor-service instances.

Appends are durably group-committed: the single writer batches everything
that arrived during the commit interval into one transaction and only then
acknowledges, so an acked seq is always query-visible (store-before-forward
holds across instances) and seqs are globally unique and gap-free.

Wire protocol is one JSON object per line over TCP; instances talk to it
through :class:`SocketStoreBackend`, a small fixed-size connection pool that
is the only serialization point on the instance side.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import sqlite3
import threading
from typing import Optional

from . import wire
from .errors import BackendFailure
from .model import Severity
from .storage import QueryCriteria, StorageBackend, StoredMessage

log = logging.getLogger(__name__)

DEFAULT_COMMIT_INTERVAL = 0.008
DEFAULT_POOL_SIZE = 2

_SCHEMA = """
CREATE TABLE IF NOT EXISTS messages (
    seq INTEGER PRIMARY KEY,
    source TEXT NOT NULL,
    msg_type TEXT NOT NULL,
    severity INTEGER NOT NULL,
    ts TEXT NOT NULL,
    payload TEXT NOT NULL,
    received_at TEXT NOT NULL,
    instance_id TEXT NOT NULL
)
"""


def _record_to_row(record: dict, seq: int) -> tuple:
    return (seq, record["source"], record["msg_type"], int(record["severity"]),
            record["timestamp"], record["payload"], record["received_at"],
            record["instance_id"])


def _row_to_stored(row: tuple) -> StoredMessage:
    seq, source, msg_type, severity, ts, payload, received_at, instance_id = row
    return StoredMessage.from_body({
        "seq": seq,
        "received_at": received_at,
        "instance_id": instance_id,
        "msg": {"source": source, "msg_type": msg_type,
                "severity": Severity(severity).label,
                "timestamp": ts, "payload": payload},
    })


class _Waiter:
    __slots__ = ("event", "seq", "error")

    def __init__(self):
        self.event = threading.Event()
        self.seq = -1
        self.error: Optional[str] = None


class StoreServer:
    def __init__(self, db_path: str, host: str = "127.0.0.1", port: int = 0,
                 commit_interval: float = DEFAULT_COMMIT_INTERVAL):
        self._db_path = db_path
        self._commit_interval = commit_interval
        self._pending: list[tuple[dict, _Waiter]] = []
        self._pending_lock = threading.Lock()
        self._stop = threading.Event()
        self._read_local = threading.local()

        bootstrap = sqlite3.connect(db_path)
        bootstrap.execute("PRAGMA journal_mode=WAL")
        bootstrap.execute(_SCHEMA)
        bootstrap.commit()
        row = bootstrap.execute("SELECT COALESCE(MAX(seq), 0) FROM messages").fetchone()
        bootstrap.close()
        self._next_seq = row[0] + 1

        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(128)
        self.host, self.port = self._listener.getsockname()

        self._threads: list[threading.Thread] = []

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "StoreServer":
        writer = threading.Thread(target=self._writer_loop, name="store-writer", daemon=True)
        acceptor = threading.Thread(target=self._accept_loop, name="store-accept", daemon=True)
        writer.start()
        acceptor.start()
        self._threads += [writer, acceptor]
        return self

    def stop(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        for t in self._threads:
            t.join(timeout=5)

    def __enter__(self) -> "StoreServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()

    # writer side ----------------------------------------------------------

    def _writer_loop(self) -> None:
        conn = sqlite3.connect(self._db_path)
        conn.execute("PRAGMA journal_mode=WAL")
        conn.execute("PRAGMA synchronous=NORMAL")
        while True:
            stopping = self._stop.wait(self._commit_interval)
            with self._pending_lock:
                batch, self._pending = self._pending, []
            if batch:
                rows = []
                waiters = []
                for record, waiter in batch:
                    waiter.seq = self._next_seq
                    self._next_seq += 1
                    rows.append(_record_to_row(record, waiter.seq))
                    waiters.append(waiter)
                try:
                    conn.executemany("INSERT INTO messages VALUES (?,?,?,?,?,?,?,?)", rows)
                    conn.commit()
                except sqlite3.Error as exc:
                    conn.rollback()
                    for waiter in waiters:
                        waiter.error = f"store insert failed: {exc}"
                for waiter in waiters:
                    waiter.event.set()
            if stopping:
                break
        conn.close()

    def _enqueue_append(self, record: dict) -> _Waiter:
        waiter = _Waiter()
        with self._pending_lock:
            self._pending.append((record, waiter))
        return waiter

    # connection side --------------------------------------------------------

    def _read_conn(self) -> sqlite3.Connection:
        conn = getattr(self._read_local, "conn", None)
        if conn is None:
            conn = sqlite3.connect(self._db_path)
            conn.execute("PRAGMA journal_mode=WAL")
            self._read_local.conn = conn
        return conn

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                client, _ = self._listener.accept()
            except OSError:
                break
            t = threading.Thread(target=self._serve_conn, args=(client,), daemon=True)
            t.start()

    def _serve_conn(self, client: socket.socket) -> None:
        client.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        reader = client.makefile("rb")
        try:
            for line in reader:
                if self._stop.is_set():
                    break
                try:
                    req = json.loads(line)
                    resp = self._handle(req)
                except Exception as exc:  # noqa: BLE001 - protocol errors go to the peer
                    resp = {"ok": False, "error": str(exc)}
                client.sendall(json.dumps(resp, separators=(",", ":")).encode() + b"\n")
        except (ConnectionError, OSError):
            pass
        finally:
            reader.close()
            client.close()

    def _handle(self, req: dict) -> dict:
        op = req.get("op")
        if op == "append":
            waiter = self._enqueue_append(req["record"])
            if not waiter.event.wait(timeout=30):
                return {"ok": False, "error": "commit timed out"}
            if waiter.error:
                return {"ok": False, "error": waiter.error}
            return {"ok": True, "seq": waiter.seq}
        if op == "query":
            criteria = QueryCriteria.from_body(req.get("criteria", {}))
            return {"ok": True, "messages": [m.to_body() for m in self._run_query(criteria)]}
        if op == "count":
            n = self._read_conn().execute("SELECT COUNT(*) FROM messages").fetchone()[0]
            return {"ok": True, "n": n}
        if op == "ping":
            return {"ok": True}
        return {"ok": False, "error": f"unknown op {op!r}"}

    def _run_query(self, criteria: QueryCriteria) -> list[StoredMessage]:
        # SQL narrows by seq/severity/time (timestamps are fixed-width UTC, so
        # lexicographic order is chronological); pattern/type/limit are applied
        # in Python to keep semantics identical to the reference filter.
        clauses = ["seq > ?", "severity >= ?"]
        args: list = [criteria.after_seq, int(criteria.min_severity)]
        if criteria.since is not None:
            clauses.append("ts >= ?")
            args.append(wire.format_timestamp(criteria.since))
        if criteria.until is not None:
            clauses.append("ts <= ?")
            args.append(wire.format_timestamp(criteria.until))
        sql = f"SELECT * FROM messages WHERE {' AND '.join(clauses)} ORDER BY seq"
        out: list[StoredMessage] = []
        for row in self._read_conn().execute(sql, args):
            stored = _row_to_stored(row)
            if not criteria.matches(stored.msg):
                continue
            out.append(stored)
            if criteria.limit is not None and len(out) >= criteria.limit:
                break
        return out


class SocketStoreBackend(StorageBackend):
    """Client side of the shared store; implements the backend interface over
    a fixed pool of persistent connections."""

    def __init__(self, address: str, pool_size: int = DEFAULT_POOL_SIZE,
                 timeout: float = 30.0):
        host, _, port = address.partition(":")
        self._addr = (host, int(port))
        self._timeout = timeout
        self._pool: queue.Queue = queue.Queue()
        for _ in range(max(1, pool_size)):
            self._pool.put(None)  # lazily connected slots

    def _connect(self):
        sock = socket.create_connection(self._addr, timeout=self._timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock, sock.makefile("rb")

    def _roundtrip(self, req: dict) -> dict:
        slot = self._pool.get()
        try:
            if slot is None:
                slot = self._connect()
            sock, reader = slot
            try:
                sock.sendall(json.dumps(req, separators=(",", ":")).encode() + b"\n")
                line = reader.readline()
            except (ConnectionError, OSError):
                # one reconnect: the store may have restarted between calls
                sock.close()
                slot = self._connect()
                sock, reader = slot
                sock.sendall(json.dumps(req, separators=(",", ":")).encode() + b"\n")
                line = reader.readline()
            if not line:
                raise BackendFailure("store closed the connection")
            resp = json.loads(line)
        except (ConnectionError, OSError, socket.timeout, json.JSONDecodeError) as exc:
            if slot is not None:
                slot[0].close()
            slot = None
            raise BackendFailure(f"store at {self._addr[0]}:{self._addr[1]}: {exc}") from exc
        finally:
            self._pool.put(slot)
        if not resp.get("ok"):
            raise BackendFailure(resp.get("error", "store error"))
        return resp

    def append(self, msg, received_at, instance_id) -> int:
        record = dict(wire.log_message_to_body(msg))
        record["severity"] = int(msg.severity)
        record["received_at"] = wire.format_timestamp(received_at)
        record["instance_id"] = instance_id
        return int(self._roundtrip({"op": "append", "record": record})["seq"])

    def query(self, criteria: QueryCriteria) -> list[StoredMessage]:
        resp = self._roundtrip({"op": "query", "criteria": criteria.to_body()})
        return [StoredMessage.from_body(b) for b in resp["messages"]]

    def count(self) -> int:
        return int(self._roundtrip({"op": "count"})["n"])

    def ping(self) -> bool:
        try:
            return bool(self._roundtrip({"op": "ping"})["ok"])
        except BackendFailure:
            return False

    def close(self) -> None:
        while True:
            try:
                slot = self._pool.get_nowait()
            except queue.Empty:
                break
            if slot is not None:
                slot[0].close()
