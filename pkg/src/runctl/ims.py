"""Information and monitor service: accepts published log messages, catalogs
them in a storage backend, and forwards them to matching subscribers.

Publishing is store-before-forward: the ack carries the seq the backend
assigned, and only already-stored messages are ever enqueued for delivery.
Each subscription gets its own FIFO queue and delivery worker (in-order by
seq, at-least-once, retry-then-drop with drop accounting). Browser clients
follow the same catalog through the server-sent-events endpoint.
"""

from __future__ import annotations

import logging
import multiprocessing
import os
import queue
import signal
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import transport, wire
from .errors import BackendFailure, CallbackUnreachable, RcmsError, TransportError
from .model import LogMessage, Severity, Subscription, utc_now
from .registry import Heartbeater, RegistryClient
from .storage import MemoryBackend, QueryCriteria, StorageBackend, StoredMessage
from .store import SocketStoreBackend

log = logging.getLogger(__name__)

DEFAULT_QUEUE_LIMIT = 10_000
DEFAULT_RETRY_ATTEMPTS = 3
DEFAULT_RETRY_BACKOFF = 1.0

SERVICE_NAME = "ims"

_STOP = object()  # delivery queue sentinel


@dataclass
class _Delivery:
    sub: Subscription
    q: "queue.Queue" = field(default_factory=lambda: queue.Queue(maxsize=DEFAULT_QUEUE_LIMIT))
    worker: Optional[threading.Thread] = None
    drops: int = 0
    overflow: int = 0
    last_seq: int = 0


class ImsCore:
    """Backend + subscription table + delivery workers, transport-agnostic."""

    def __init__(self, backend: Optional[StorageBackend] = None,
                 instance_id: Optional[str] = None,
                 push_fn: Callable = transport.push,
                 retry_attempts: int = DEFAULT_RETRY_ATTEMPTS,
                 retry_backoff: float = DEFAULT_RETRY_BACKOFF,
                 queue_limit: int = DEFAULT_QUEUE_LIMIT,
                 probe_callbacks: bool = True):
        self.backend = backend if backend is not None else MemoryBackend()
        self.instance_id = instance_id or f"ims-{os.getpid()}-{uuid.uuid4().hex[:6]}"
        self._push = push_fn
        self._retry_attempts = retry_attempts
        self._retry_backoff = retry_backoff
        self._queue_limit = queue_limit
        self._probe_callbacks = probe_callbacks
        self._subs_lock = threading.Lock()
        self._deliveries: dict[str, _Delivery] = {}
        self._streams: list[tuple[QueryCriteria, queue.Queue]] = []
        self._closed = False

    # publishing -------------------------------------------------------------

    def publish(self, msg: LogMessage) -> int:
        """Append to the backend, then fan the stored record out to every
        matching subscription queue. The returned seq is already durable."""
        received_at = utc_now()
        try:
            seq = self.backend.append(msg, received_at, self.instance_id)
        except BackendFailure:
            raise
        except Exception as exc:  # backend contract: anything else is a failure
            raise BackendFailure(f"append failed: {exc}") from exc
        stored = StoredMessage(seq=seq, msg=msg, received_at=received_at,
                               instance_id=self.instance_id)
        with self._subs_lock:
            for delivery in self._deliveries.values():
                if delivery.sub.matches(msg):
                    try:
                        delivery.q.put_nowait(stored)
                    except queue.Full:
                        delivery.overflow += 1
            for criteria, stream_q in self._streams:
                if criteria.matches(msg):
                    try:
                        stream_q.put_nowait(stored)
                    except queue.Full:
                        pass
        return seq

    # subscriptions ------------------------------------------------------------

    def subscribe(self, sub: Subscription) -> str:
        """Activate a subscription. The callback must answer a probe push;
        when ``since`` is set, matching stored messages are enqueued first,
        in seq order, before any live traffic."""
        if self._probe_callbacks:
            probe = wire.make_envelope(
                wire.Kind.EVENT, self.instance_id, sub.id,
                {"probe": True, "subscription_id": sub.id})
            try:
                self._push(sub.callback_url, probe, timeout=2.0)
            except TransportError as exc:
                raise CallbackUnreachable(
                    f"callback {sub.callback_url} did not answer probe: {exc}") from exc

        delivery = _Delivery(sub=sub, q=queue.Queue(maxsize=self._queue_limit))
        with self._subs_lock:
            if sub.since is not None:
                backfill = self.backend.query(QueryCriteria(
                    source_pattern=sub.source_pattern,
                    min_severity=sub.min_severity,
                    msg_types=sub.msg_types,
                    since=sub.since))
                for stored in backfill:
                    delivery.q.put(stored)
            self._deliveries[sub.id] = delivery
        delivery.worker = threading.Thread(
            target=self._deliver_loop, args=(delivery,),
            name=f"deliver-{sub.id}", daemon=True)
        delivery.worker.start()
        return sub.id

    def unsubscribe(self, sub_id: str) -> None:
        with self._subs_lock:
            delivery = self._deliveries.pop(sub_id, None)
        if delivery is not None:
            delivery.q.put(_STOP)

    def _deliver_loop(self, delivery: _Delivery) -> None:
        """Drain one subscription queue; in-order by seq, at-least-once, and
        after exhausted retries drop with accounting (warn published back
        into the service itself)."""
        while True:
            item = delivery.q.get()
            if item is _STOP:
                return
            if item.seq <= delivery.last_seq:
                # a racing publisher enqueued behind a newer seq; skipping
                # keeps per-subscription delivery monotone
                delivery.drops += 1
                continue
            env = wire.make_envelope(wire.Kind.EVENT, self.instance_id,
                                     delivery.sub.id, item.to_body())
            delivered = False
            for attempt in range(self._retry_attempts):
                try:
                    self._push(delivery.sub.callback_url, env, timeout=2.0)
                    delivered = True
                    break
                except TransportError:
                    if attempt + 1 < self._retry_attempts:
                        time.sleep(self._retry_backoff)
            if delivered:
                delivery.last_seq = item.seq
            else:
                delivery.drops += 1
                try:
                    self.publish(LogMessage(
                        source=self.instance_id, msg_type="delivery-drop",
                        severity=Severity.WARN,
                        payload=f"subscription={delivery.sub.id} seq={item.seq} "
                                f"drops={delivery.drops}"))
                except BackendFailure:
                    log.warning("could not record delivery drop for %s", delivery.sub.id)

    # queries -----------------------------------------------------------------

    def query(self, criteria: QueryCriteria) -> list[StoredMessage]:
        return self.backend.query(criteria)

    def count(self) -> int:
        return self.backend.count()

    def drop_counts(self) -> dict[str, int]:
        with self._subs_lock:
            return {sid: d.drops + d.overflow for sid, d in self._deliveries.items()}

    # streams (server-sent events) ---------------------------------------------

    def open_stream(self, criteria: QueryCriteria) -> "queue.Queue":
        stream_q: queue.Queue = queue.Queue(maxsize=1000)
        with self._subs_lock:
            self._streams.append((criteria, stream_q))
        return stream_q

    def close_stream(self, stream_q: "queue.Queue") -> None:
        with self._subs_lock:
            self._streams = [(c, q) for (c, q) in self._streams if q is not stream_q]

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        with self._subs_lock:
            deliveries = list(self._deliveries.values())
            self._deliveries.clear()
        for delivery in deliveries:
            delivery.q.put(_STOP)
        for delivery in deliveries:
            if delivery.worker is not None:
                delivery.worker.join(timeout=2)
        self.backend.close()


class ImsServer:
    """Envelope + stream host around an ImsCore; optionally announces itself
    in the service registry and heartbeats until stopped."""

    def __init__(self, core: Optional[ImsCore] = None,
                 host: str = "127.0.0.1", port: int = 0,
                 registry_url: Optional[str] = None):
        self.core = core or ImsCore()
        self._service = transport.EnvelopeService(
            self.core.instance_id, self._handle, host=host, port=port,
            stream_handler=self._stream)
        self._registry_url = registry_url
        self._heartbeater: Optional[Heartbeater] = None

    @property
    def url(self) -> str:
        return self._service.url

    @property
    def base_url(self) -> str:
        return self._service.base_url

    def start(self) -> "ImsServer":
        self._service.start()
        if self._registry_url:
            client = RegistryClient(self._registry_url, source=self.core.instance_id)
            self._heartbeater = Heartbeater(
                client, SERVICE_NAME, self.core.instance_id, self.url).start()
        return self

    def stop(self) -> None:
        if self._heartbeater is not None:
            self._heartbeater.stop()
        self._service.stop()
        self.core.close()

    def __enter__(self) -> "ImsServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()

    def _handle(self, env: wire.Envelope) -> wire.Envelope:
        me = self.core.instance_id
        if env.kind is wire.Kind.PUBLISH:
            seq = self.core.publish(wire.log_message_from_body(env.body))
            return wire.reply_to(env, wire.Kind.ACK, me, {"seq": seq})
        if env.kind is wire.Kind.SUBSCRIBE:
            sub_id = self.core.subscribe(wire.subscription_from_body(env.body))
            return wire.reply_to(env, wire.Kind.ACK, me, {"subscription_id": sub_id})
        if env.kind is wire.Kind.UNSUBSCRIBE:
            self.core.unsubscribe(env.body["subscription_id"])
            return wire.reply_to(env, wire.Kind.ACK, me, {})
        if env.kind is wire.Kind.QUERY:
            subject = env.body.get("subject", "messages")
            if subject == "messages":
                criteria = QueryCriteria.from_body(env.body.get("criteria", {}))
                messages = self.core.query(criteria)
                return wire.reply_to(env, wire.Kind.RESULT, me,
                                     {"messages": [m.to_body() for m in messages]})
            if subject == "stats":
                return wire.reply_to(env, wire.Kind.RESULT, me,
                                     {"count": self.core.count(),
                                      "drops": self.core.drop_counts()})
            raise RcmsError(f"unknown query subject {subject!r}")
        raise RcmsError(f"ims does not handle kind {env.kind.value!r}")

    def _stream(self, params: dict, writer: transport.SseWriter) -> None:
        body = {}
        if "source_pattern" in params:
            body["source_pattern"] = params["source_pattern"]
        if "min_severity" in params:
            body["min_severity"] = params["min_severity"]
        if "msg_types" in params:
            body["msg_types"] = [t for t in params["msg_types"].split(",") if t]
        if "since" in params:
            body["since"] = params["since"]
        criteria = QueryCriteria.from_body(body)
        stream_q = self.core.open_stream(criteria)
        try:
            while not writer.closed:
                try:
                    stored = stream_q.get(timeout=2.0)
                except queue.Empty:
                    if not writer.comment():
                        return
                    continue
                env = wire.make_envelope(wire.Kind.EVENT, self.core.instance_id,
                                         "stream", stored.to_body())
                if not writer.emit(wire.encode(env)):
                    return
        finally:
            self.core.close_stream(stream_q)


class ImsClient:
    """Typed client for one instance (or a lazily discovered one)."""

    def __init__(self, url: Optional[str] = None, registry_url: Optional[str] = None,
                 source: str = "client", timeout: float = transport.DEFAULT_TIMEOUT):
        if url is None:
            if registry_url is None:
                raise ValueError("need an instance url or a registry url")
            instances = RegistryClient(registry_url, source=source).lookup(SERVICE_NAME)
            if not instances:
                raise TransportError("no live ims instance registered")
            url = instances[0].url
        self.url = url
        self._source = source
        self._timeout = timeout

    def publish(self, msg: LogMessage) -> int:
        env = wire.make_envelope(wire.Kind.PUBLISH, self._source, SERVICE_NAME,
                                 wire.log_message_to_body(msg))
        resp = transport.push(self.url, env, timeout=self._timeout)
        if resp is None:
            raise TransportError("publish was not acknowledged with a seq")
        transport.raise_for_error(resp)
        return int(resp.body["seq"])

    def subscribe(self, sub: Subscription) -> str:
        env = wire.make_envelope(wire.Kind.SUBSCRIBE, self._source, SERVICE_NAME,
                                 wire.subscription_to_body(sub))
        resp = transport.raise_for_error(transport.request(self.url, env, timeout=self._timeout))
        return resp.body["subscription_id"]

    def unsubscribe(self, sub_id: str) -> None:
        env = wire.make_envelope(wire.Kind.UNSUBSCRIBE, self._source, SERVICE_NAME,
                                 {"subscription_id": sub_id})
        transport.raise_for_error(transport.request(self.url, env, timeout=self._timeout))

    def query(self, criteria: QueryCriteria) -> list[StoredMessage]:
        env = wire.make_envelope(wire.Kind.QUERY, self._source, SERVICE_NAME,
                                 {"subject": "messages", "criteria": criteria.to_body()})
        resp = transport.raise_for_error(transport.request(self.url, env, timeout=self._timeout))
        return [StoredMessage.from_body(b) for b in resp.body["messages"]]

    def stats(self) -> dict:
        env = wire.make_envelope(wire.Kind.QUERY, self._source, SERVICE_NAME,
                                 {"subject": "stats"})
        resp = transport.raise_for_error(transport.request(self.url, env, timeout=self._timeout))
        return resp.body


# multi-instance cluster -------------------------------------------------------

def _instance_main(store_address: str, registry_url: Optional[str],
                   instance_id: str, ready_q, pool_size: int) -> None:
    """Child-process entry: one ims instance over the shared store."""
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    backend = SocketStoreBackend(store_address, pool_size=pool_size)
    core = ImsCore(backend=backend, instance_id=instance_id)
    server = ImsServer(core=core, registry_url=registry_url).start()
    ready_q.put((instance_id, server.url))
    stop.wait()
    server.stop()


class ImsCluster:
    """K instance processes registered under one service name, sharing one
    store so seqs stay globally unique and gap-free."""

    def __init__(self, k: int, store_address: str, registry_url: Optional[str] = None,
                 backend_pool_size: int = 2):
        if k < 1:
            raise ValueError("cluster needs at least one instance")
        self._k = k
        self._store_address = store_address
        self._registry_url = registry_url
        self._pool_size = backend_pool_size
        self._procs: list = []
        self.urls: list[str] = []

    def start(self, timeout: float = 30.0) -> "ImsCluster":
        ctx = multiprocessing.get_context("spawn")
        ready_q = ctx.SimpleQueue()
        for i in range(self._k):
            instance_id = f"ims-{i + 1}"
            proc = ctx.Process(
                target=_instance_main,
                args=(self._store_address, self._registry_url, instance_id,
                      ready_q, self._pool_size),
                daemon=True)
            proc.start()
            self._procs.append(proc)
        deadline = time.monotonic() + timeout
        by_id = {}
        while len(by_id) < self._k:
            if time.monotonic() > deadline:
                self.stop()
                raise TransportError("ims cluster instances did not come up in time")
            instance_id, url = ready_q.get()
            by_id[instance_id] = url
        self.urls = [by_id[f"ims-{i + 1}"] for i in range(self._k)]
        return self

    def stop(self) -> None:
        for proc in self._procs:
            if proc.is_alive():
                proc.terminate()
        for proc in self._procs:
            proc.join(timeout=10)
        self._procs = []

    def __enter__(self) -> "ImsCluster":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()
