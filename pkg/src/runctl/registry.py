"""Service registry: instances announce themselves under a service name and
clients discover live endpoints. Liveness is heartbeat-gated — records whose
last heartbeat is older than the TTL are excluded from lookups.

The registry URL is seeded through the ``RCMS_REGISTRY_URL`` environment
variable for every process in a deployment.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Optional

from . import transport, wire
from .errors import RegistryUnavailable
from .model import utc_now

REGISTRY_URL_ENV = "RCMS_REGISTRY_URL"

DEFAULT_TTL = 10.0
DEFAULT_HEARTBEAT_INTERVAL = 3.0


@dataclass(frozen=True)
class ServiceRecord:
    name: str
    instance_id: str
    url: str
    registered_at: datetime = field(default_factory=utc_now)
    last_heartbeat: datetime = field(default_factory=utc_now)

    def to_body(self) -> dict:
        return {
            "name": self.name,
            "instance_id": self.instance_id,
            "url": self.url,
            "registered_at": wire.format_timestamp(self.registered_at),
            "last_heartbeat": wire.format_timestamp(self.last_heartbeat),
        }

    @classmethod
    def from_body(cls, body: dict) -> "ServiceRecord":
        return cls(
            name=body["name"],
            instance_id=body["instance_id"],
            url=body["url"],
            registered_at=wire.parse_timestamp(body["registered_at"]),
            last_heartbeat=wire.parse_timestamp(body["last_heartbeat"]),
        )


class RegistryCore:
    """In-memory record table; writes serialized, reads cheap."""

    def __init__(self, ttl: float = DEFAULT_TTL, now_fn: Callable[[], float] = time.monotonic):
        self._ttl = ttl
        self._now = now_fn
        self._lock = threading.RLock()
        # (name, instance_id) -> (record, heartbeat on the injected clock)
        self._records: dict[tuple[str, str], tuple[ServiceRecord, float]] = {}

    def register(self, name: str, instance_id: str, url: str) -> ServiceRecord:
        """Upsert by (name, instance_id); refreshes the heartbeat, preserves
        the original registration time while the record is still known."""
        with self._lock:
            key = (name, instance_id)
            existing = self._records.get(key)
            registered_at = existing[0].registered_at if existing else utc_now()
            record = ServiceRecord(name=name, instance_id=instance_id, url=url,
                                   registered_at=registered_at, last_heartbeat=utc_now())
            self._records[key] = (record, self._now())
        return record

    def lookup(self, name: str) -> list[ServiceRecord]:
        """All non-stale instances of ``name``, stable-ordered by registration.
        A never-registered name yields an empty list, not an error."""
        cutoff = self._now() - self._ttl
        with self._lock:
            live = [rec for (n, _), (rec, hb) in self._records.items()
                    if n == name and hb >= cutoff]
        live.sort(key=lambda r: (r.registered_at, r.instance_id))
        return live

    def prune(self) -> int:
        cutoff = self._now() - self._ttl
        with self._lock:
            stale = [k for k, (_, hb) in self._records.items() if hb < cutoff]
            for k in stale:
                del self._records[k]
        return len(stale)


class RegistryServer:
    """Hosts a RegistryCore at /rcms/v1/registry."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 ttl: float = DEFAULT_TTL, core: Optional[RegistryCore] = None):
        self.core = core or RegistryCore(ttl=ttl)
        self._service = transport.EnvelopeService(
            "registry", self._handle, host=host, port=port,
            envelope_path=transport.REGISTRY_PATH)

    def _handle(self, env: wire.Envelope) -> wire.Envelope:
        if env.kind is wire.Kind.REGISTER:
            body = env.body
            record = self.core.register(body["name"], body["instance_id"], body["url"])
            return wire.reply_to(env, wire.Kind.ACK, "registry", {"record": record.to_body()})
        if env.kind is wire.Kind.LOOKUP:
            records = self.core.lookup(env.body["name"])
            return wire.reply_to(env, wire.Kind.RESULT, "registry",
                                 {"instances": [r.to_body() for r in records]})
        from .errors import RcmsError
        raise RcmsError(f"registry does not handle kind {env.kind.value!r}")

    @property
    def url(self) -> str:
        return self._service.url

    def start(self) -> "RegistryServer":
        self._service.start()
        return self

    def stop(self) -> None:
        self._service.stop()

    def __enter__(self) -> "RegistryServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()


def registry_url_from_env() -> Optional[str]:
    return os.environ.get(REGISTRY_URL_ENV) or None


class RegistryClient:
    def __init__(self, url: Optional[str] = None, source: str = "client",
                 timeout: float = transport.DEFAULT_TIMEOUT):
        url = url or registry_url_from_env()
        if not url:
            raise RegistryUnavailable(
                f"no registry URL given and {REGISTRY_URL_ENV} is not set")
        self.url = url
        self._source = source
        self._timeout = timeout

    def register(self, name: str, instance_id: str, service_url: str) -> ServiceRecord:
        env = wire.make_envelope(wire.Kind.REGISTER, self._source, "registry",
                                 {"name": name, "instance_id": instance_id, "url": service_url})
        try:
            resp = transport.request(self.url, env, timeout=self._timeout)
        except (transport.TransportError, transport.ProtocolError) as exc:
            raise RegistryUnavailable(f"registry at {self.url}: {exc}") from exc
        transport.raise_for_error(resp)
        return ServiceRecord.from_body(resp.body["record"])

    def lookup(self, name: str) -> list[ServiceRecord]:
        env = wire.make_envelope(wire.Kind.LOOKUP, self._source, "registry", {"name": name})
        try:
            resp = transport.request(self.url, env, timeout=self._timeout)
        except (transport.TransportError, transport.ProtocolError) as exc:
            raise RegistryUnavailable(f"registry at {self.url}: {exc}") from exc
        transport.raise_for_error(resp)
        return [ServiceRecord.from_body(b) for b in resp.body["instances"]]


class Heartbeater:
    """Re-registers a service instance on a fixed cadence until stopped."""

    def __init__(self, client: RegistryClient, name: str, instance_id: str, service_url: str,
                 interval: float = DEFAULT_HEARTBEAT_INTERVAL):
        self._client = client
        self._name = name
        self._instance_id = instance_id
        self._service_url = service_url
        self._interval = interval
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def start(self) -> "Heartbeater":
        self._client.register(self._name, self._instance_id, self._service_url)
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name=f"heartbeat-{self._name}-{self._instance_id}")
        self._thread.start()
        return self

    def _run(self) -> None:
        while not self._stop.wait(self._interval):
            try:
                self._client.register(self._name, self._instance_id, self._service_url)
            except RegistryUnavailable:
                # keep trying: the registry may come back before our TTL runs out
                continue

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)
            self._thread = None
