"""HTTP transport: synchronous envelope exchange, one-way pushes, and the
threaded service host every component runs on.

Every service accepts canonical envelopes POSTed to ``/rcms/v1/envelope``
(the registry listens on ``/rcms/v1/registry``) and answers with an
envelope of kind ack/result/error whose correlation_id points back at the
request. Connections are kept alive and pooled per calling thread, so hot
paths pay one TCP setup per (thread, peer) rather than per request.
"""

from __future__ import annotations

import http.client
import json
import logging
import socket
import threading
import urllib.parse
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional

from . import wire
from .errors import ProtocolError, RcmsError, Timeout, TransportError

log = logging.getLogger(__name__)

ENVELOPE_PATH = "/rcms/v1/envelope"
REGISTRY_PATH = "/rcms/v1/registry"
STREAM_PATH = "/rcms/v1/stream"
HEALTH_PATH = "/rcms/v1/health"

DEFAULT_TIMEOUT = 5.0

EnvelopeHandler = Callable[[wire.Envelope], wire.Envelope]
# stream handler: (query params, event writer) -> returns when the client is gone
StreamHandler = Callable[[dict, "SseWriter"], None]


class _ConnPool(threading.local):
    """Per-thread keep-alive connections keyed by host:port."""

    def __init__(self):
        self.conns: dict[str, http.client.HTTPConnection] = {}

    def get(self, netloc: str, timeout: float) -> http.client.HTTPConnection:
        conn = self.conns.get(netloc)
        if conn is None:
            host, _, port = netloc.partition(":")
            conn = http.client.HTTPConnection(host, int(port or 80), timeout=timeout)
            self.conns[netloc] = conn
        elif conn.sock is not None:
            conn.sock.settimeout(timeout)
        conn.timeout = timeout
        return conn

    def drop(self, netloc: str) -> None:
        conn = self.conns.pop(netloc, None)
        if conn is not None:
            conn.close()


_pool = _ConnPool()


def _post(url: str, payload: bytes, timeout: float) -> tuple[int, bytes]:
    parsed = urllib.parse.urlsplit(url)
    netloc = parsed.netloc
    path = parsed.path or "/"
    headers = {"Content-Type": "application/json", "Content-Length": str(len(payload))}
    fresh = netloc not in _pool.conns
    conn = _pool.get(netloc, timeout)
    try:
        conn.request("POST", path, payload, headers)
    except (ConnectionError, BrokenPipeError, OSError, http.client.HTTPException):
        # A pooled connection may have gone stale while idle; since nothing
        # was delivered yet, one silent rebuild is safe.
        _pool.drop(netloc)
        if fresh:
            raise
        conn = _pool.get(netloc, timeout)
        conn.request("POST", path, payload, headers)
    resp = conn.getresponse()
    data = resp.read()
    return resp.status, data


def request(url: str, env: wire.Envelope, timeout: float = DEFAULT_TIMEOUT) -> wire.Envelope:
    """Synchronous exchange: POST the envelope, decode the response, verify
    the correlation. Returns the response envelope (which may be kind=error;
    see :func:`raise_for_error`)."""
    if env.kind not in wire.REQUEST_KINDS:
        raise ValueError(f"kind {env.kind.value!r} cannot be sent as a request")
    payload = wire.encode(env)
    try:
        status, data = _post(url, payload, timeout)
    except socket.timeout as exc:
        _pool.drop(urllib.parse.urlsplit(url).netloc)
        raise Timeout(f"no response from {url} within {timeout}s") from exc
    except (ConnectionError, OSError, http.client.HTTPException) as exc:
        _pool.drop(urllib.parse.urlsplit(url).netloc)
        raise TransportError(f"request to {url} failed: {exc}") from exc
    try:
        response = wire.decode(data)
    except RcmsError as exc:
        raise ProtocolError(
            f"response from {url} (HTTP {status}) is not a canonical envelope: {exc}"
        ) from exc
    if response.correlation_id != env.id:
        raise ProtocolError(
            f"response correlation {response.correlation_id!r} does not match request {env.id!r}")
    return response


def push(url: str, env: wire.Envelope,
         timeout: float = DEFAULT_TIMEOUT) -> Optional[wire.Envelope]:
    """One-way delivery: success is an HTTP 2xx from the receiver. If the
    receiver chose to respond with an envelope it is returned, else None."""
    if env.kind not in wire.PUSH_KINDS:
        raise ValueError(f"kind {env.kind.value!r} cannot be pushed")
    payload = wire.encode(env)
    try:
        status, data = _post(url, payload, timeout)
    except socket.timeout as exc:
        _pool.drop(urllib.parse.urlsplit(url).netloc)
        raise TransportError(f"push to {url} timed out after {timeout}s") from exc
    except (ConnectionError, OSError, http.client.HTTPException) as exc:
        _pool.drop(urllib.parse.urlsplit(url).netloc)
        raise TransportError(f"push to {url} failed: {exc}") from exc
    if not 200 <= status < 300:
        raise TransportError(f"push to {url} rejected with HTTP {status}")
    if data:
        try:
            return wire.decode(data)
        except RcmsError:
            return None
    return None


def raise_for_error(env: wire.Envelope) -> wire.Envelope:
    """Pass result/ack envelopes through; re-raise error envelopes typed."""
    if env.kind is wire.Kind.ERROR:
        from .errors import raise_from_body
        raise_from_body(env.body)
    return env


class SseWriter:
    """Hands server-sent events to one stream client; read side is the
    handler thread, so writes fail when the client goes away."""

    def __init__(self, wfile):
        self._wfile = wfile
        self.closed = False

    def emit(self, data: bytes) -> bool:
        try:
            self._wfile.write(b"data: " + data + b"\n\n")
            self._wfile.flush()
            return True
        except (ConnectionError, BrokenPipeError, OSError):
            self.closed = True
            return False

    def comment(self) -> bool:
        # heartbeat so both sides notice a dead peer
        try:
            self._wfile.write(b": keep-alive\n\n")
            self._wfile.flush()
            return True
        except (ConnectionError, BrokenPipeError, OSError):
            self.closed = True
            return False


class EnvelopeService:
    """Threaded HTTP host for one service.

    ``handler`` receives each decoded request envelope and returns the
    response envelope; RcmsError raised inside becomes an error envelope.
    An optional ``stream_handler`` serves GET /rcms/v1/stream connections.
    """

    def __init__(self, name: str, handler: EnvelopeHandler,
                 host: str = "127.0.0.1", port: int = 0,
                 envelope_path: str = ENVELOPE_PATH,
                 stream_handler: Optional[StreamHandler] = None):
        self.name = name
        self._handler = handler
        self._stream_handler = stream_handler
        self._envelope_path = envelope_path
        service = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                log.debug("%s %s", service.name, fmt % args)

            def _cors(self):
                self.send_header("Access-Control-Allow-Origin", "*")

            def _respond(self, status: int, data: bytes,
                         content_type: str = "application/json"):
                try:
                    self.send_response(status)
                    self._cors()
                    self.send_header("Content-Type", content_type)
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)
                except (ConnectionError, BrokenPipeError, OSError):
                    # client gave up while we were handling; nothing to tell it
                    self.close_connection = True

            def do_OPTIONS(self):
                self.send_response(204)
                self._cors()
                self.send_header("Access-Control-Allow-Methods", "POST, GET, OPTIONS")
                self.send_header("Access-Control-Allow-Headers", "Content-Type")
                self.send_header("Content-Length", "0")
                self.end_headers()

            def do_GET(self):
                parsed = urllib.parse.urlsplit(self.path)
                if parsed.path == HEALTH_PATH:
                    self._respond(200, json.dumps({"status": "ok", "service": service.name}).encode())
                    return
                if parsed.path == STREAM_PATH and service._stream_handler is not None:
                    params = {k: v[-1] for k, v in urllib.parse.parse_qs(parsed.query).items()}
                    self.send_response(200)
                    self._cors()
                    self.send_header("Content-Type", "text/event-stream")
                    self.send_header("Cache-Control", "no-cache")
                    self.send_header("Connection", "close")
                    self.end_headers()
                    writer = SseWriter(self.wfile)
                    try:
                        service._stream_handler(params, writer)
                    except (ConnectionError, BrokenPipeError, OSError):
                        pass
                    self.close_connection = True
                    return
                self._respond(404, b'{"error":"not found"}')

            def do_POST(self):
                if self.path != service._envelope_path:
                    self._respond(404, b'{"error":"not found"}')
                    return
                length = int(self.headers.get("Content-Length", 0))
                data = self.rfile.read(length)
                try:
                    env = wire.decode(data)
                except RcmsError as exc:
                    self._respond(400, json.dumps({"error": str(exc)}).encode())
                    return
                try:
                    response = service._handler(env)
                except RcmsError as exc:
                    response = wire.reply_to(env, wire.Kind.ERROR, service.name, exc.to_body())
                except Exception:  # noqa: BLE001 - service must answer something
                    log.exception("%s: handler crashed on %s", service.name, env.kind.value)
                    response = wire.reply_to(
                        env, wire.Kind.ERROR, service.name,
                        {"code": "InternalError", "message": "handler crashed", "details": {}})
                self._respond(200, wire.encode(response))

        class Server(ThreadingHTTPServer):
            daemon_threads = True
            # generous backlog: the benches open many connections at once
            request_queue_size = 128

        try:
            self._server = Server((host, port), Handler)
        except OSError as exc:
            from .errors import PortExhaustion
            raise PortExhaustion(f"cannot bind {host}:{port}: {exc}") from exc
        self._thread: Optional[threading.Thread] = None

    @property
    def host(self) -> str:
        return self._server.server_address[0]

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}{self._envelope_path}"

    @property
    def base_url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> "EnvelopeService":
        self._thread = threading.Thread(
            target=lambda: self._server.serve_forever(poll_interval=0.05),
            name=f"svc-{self.name}", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None

    def __enter__(self) -> "EnvelopeService":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()


def probe_health(base_url: str, timeout: float = 1.0) -> bool:
    """Lightweight GET used by availability scans and readiness waits."""
    parsed = urllib.parse.urlsplit(base_url)
    try:
        conn = http.client.HTTPConnection(parsed.hostname, parsed.port or 80, timeout=timeout)
        try:
            conn.request("GET", HEALTH_PATH)
            resp = conn.getresponse()
            resp.read()
            return 200 <= resp.status < 300
        finally:
            conn.close()
    except (ConnectionError, OSError, http.client.HTTPException):
        return False
