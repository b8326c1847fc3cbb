"""Job control: local execution and supervision of the processes that make
up a session, with captured output routed through the monitor service.

Each job runs in its own process group so a stop (or a jobctl shutdown)
takes the whole subtree with it: graceful signal first, forced kill after
the grace period. Output is forwarded line-wise, stdout as info and stderr
as warn, under the spec's log source tag.
"""

from __future__ import annotations

import json
import logging
import os
import signal
import subprocess
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from datetime import datetime
from enum import Enum
from typing import Callable, Optional

from . import transport, wire
from .errors import DuplicateJobId, RcmsError, SpawnFailure, UnknownJob
from .model import LogMessage, Severity, utc_now

log = logging.getLogger(__name__)

DEFAULT_POLL_INTERVAL = 0.2
DEFAULT_RESTART_BACKOFF = 1.0
ENDED_RING_SIZE = 1000
SERVICE_NAME = "jobctl"


class JobState(Enum):
    STARTING = "starting"
    RUNNING = "running"
    EXITED = "exited"
    KILLED = "killed"
    FAILED = "failed"


@dataclass(frozen=True)
class RestartPolicy:
    on_failure: bool = False
    max_restarts: int = 0

    def __post_init__(self):
        if self.max_restarts < 0:
            raise ValueError("max_restarts must be >= 0")

    @classmethod
    def never(cls) -> "RestartPolicy":
        return cls()

    @classmethod
    def retries(cls, n: int) -> "RestartPolicy":
        return cls(on_failure=True, max_restarts=n)


@dataclass(frozen=True)
class JobSpec:
    id: str
    command: tuple[str, ...]
    env: dict = field(default_factory=dict)
    working_dir: Optional[str] = None
    restart: RestartPolicy = field(default_factory=RestartPolicy.never)
    log_source: Optional[str] = None

    def __post_init__(self):
        if not self.command:
            raise ValueError("job command must be non-empty")
        object.__setattr__(self, "command", tuple(self.command))
        if self.log_source is None:
            object.__setattr__(self, "log_source", f"job-{self.id}")

    def to_body(self) -> dict:
        return {
            "id": self.id,
            "command": list(self.command),
            "env": dict(self.env),
            "working_dir": self.working_dir,
            "restart": {"on_failure": self.restart.on_failure,
                        "max_restarts": self.restart.max_restarts},
            "log_source": self.log_source,
        }

    @classmethod
    def from_body(cls, body: dict) -> "JobSpec":
        restart = body.get("restart", {})
        return cls(
            id=body["id"],
            command=tuple(body["command"]),
            env=dict(body.get("env", {})),
            working_dir=body.get("working_dir"),
            restart=RestartPolicy(on_failure=bool(restart.get("on_failure", False)),
                                  max_restarts=int(restart.get("max_restarts", 0))),
            log_source=body.get("log_source"),
        )


@dataclass(frozen=True)
class JobStatus:
    id: str
    state: JobState
    pid: Optional[int] = None
    exit_code: Optional[int] = None
    restarts_used: int = 0
    started_at: Optional[datetime] = None
    ended_at: Optional[datetime] = None

    def to_body(self) -> dict:
        return {
            "id": self.id,
            "state": self.state.value,
            "pid": self.pid,
            "exit_code": self.exit_code,
            "restarts_used": self.restarts_used,
            "started_at": wire.format_timestamp(self.started_at) if self.started_at else None,
            "ended_at": wire.format_timestamp(self.ended_at) if self.ended_at else None,
        }


class _Job:
    def __init__(self, spec: JobSpec):
        self.spec = spec
        self.lock = threading.Lock()
        self.status = JobStatus(id=spec.id, state=JobState.STARTING)
        self.proc: Optional[subprocess.Popen] = None
        self.readers: list[threading.Thread] = []
        self.stop_requested = False
        self.force_killed = False
        self.supervisor: Optional[threading.Thread] = None
        self.spawned_pids: list[int] = []


class JobManager:
    def __init__(self, publish: Optional[Callable[[LogMessage], None]] = None,
                 poll_interval: float = DEFAULT_POLL_INTERVAL,
                 restart_backoff: float = DEFAULT_RESTART_BACKOFF):
        self._publish = publish
        self._poll = poll_interval
        self._backoff = restart_backoff
        self._lock = threading.Lock()
        self._live: dict[str, _Job] = {}
        self._ended: deque[JobStatus] = deque(maxlen=ENDED_RING_SIZE)

    # helpers --------------------------------------------------------------

    def _forward(self, job: _Job, stream, severity: Severity, tag: str) -> None:
        for raw in iter(stream.readline, b""):
            line = raw.decode("utf-8", errors="replace").rstrip("\n")
            if self._publish is not None:
                try:
                    self._publish(LogMessage(source=job.spec.log_source, msg_type=tag,
                                             severity=severity, payload=line))
                except RcmsError:
                    log.warning("job %s: could not forward output line", job.spec.id)
        stream.close()

    def _spawn_attempt(self, job: _Job) -> tuple[subprocess.Popen, list[threading.Thread]]:
        spec = job.spec
        try:
            proc = subprocess.Popen(
                list(spec.command),
                env={**os.environ, **spec.env},
                cwd=spec.working_dir,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                start_new_session=True,  # own process group: kills take the subtree
            )
        except (FileNotFoundError, PermissionError, NotADirectoryError, OSError) as exc:
            raise SpawnFailure(f"cannot start job {spec.id!r}: {exc}") from exc
        readers = [
            threading.Thread(target=self._forward,
                             args=(job, proc.stdout, Severity.INFO, "stdout"),
                             daemon=True),
            threading.Thread(target=self._forward,
                             args=(job, proc.stderr, Severity.WARN, "stderr"),
                             daemon=True),
        ]
        for t in readers:
            t.start()
        job.spawned_pids.append(proc.pid)
        return proc, readers

    def _supervise(self, job: _Job) -> None:
        proc = job.proc
        readers = job.readers
        while True:
            while proc.poll() is None:
                time.sleep(self._poll)
            rc = proc.returncode
            for t in readers:
                t.join(timeout=5)

            with job.lock:
                stopping = job.stop_requested
                restarts = job.status.restarts_used
            policy = job.spec.restart
            if (not stopping and rc != 0 and policy.on_failure
                    and restarts < policy.max_restarts):
                time.sleep(self._backoff)
                with job.lock:
                    if job.stop_requested:
                        stopping = True
                if not stopping:
                    try:
                        proc, readers = self._spawn_attempt(job)
                    except SpawnFailure:
                        self._finish(job, JobState.FAILED, rc)
                        return
                    with job.lock:
                        job.proc = proc
                        job.readers = readers
                        job.status = replace(job.status, state=JobState.RUNNING,
                                             pid=proc.pid,
                                             restarts_used=restarts + 1)
                    continue

            if stopping:
                state = JobState.KILLED if job.force_killed else JobState.EXITED
            elif rc == 0:
                state = JobState.EXITED
            else:
                state = JobState.FAILED
            self._finish(job, state, rc)
            return

    def _finish(self, job: _Job, state: JobState, rc: Optional[int]) -> None:
        with job.lock:
            job.status = replace(job.status, state=state, exit_code=rc, ended_at=utc_now())
            final = job.status
        with self._lock:
            self._live.pop(job.spec.id, None)
            self._ended.append(final)

    # operations ------------------------------------------------------------

    def start(self, spec: JobSpec) -> JobStatus:
        with self._lock:
            if spec.id in self._live:
                raise DuplicateJobId(f"job {spec.id!r} is already live")
            job = _Job(spec)
            self._live[spec.id] = job
        try:
            proc, readers = self._spawn_attempt(job)
        except SpawnFailure:
            with self._lock:
                self._live.pop(spec.id, None)
            raise
        with job.lock:
            job.proc = proc
            job.readers = readers
            job.status = JobStatus(id=spec.id, state=JobState.RUNNING, pid=proc.pid,
                                   started_at=utc_now())
        job.supervisor = threading.Thread(target=self._supervise, args=(job,),
                                          name=f"job-{spec.id}", daemon=True)
        job.supervisor.start()
        return job.status

    def stop(self, job_id: str, grace: float = 2.0) -> JobStatus:
        with self._lock:
            job = self._live.get(job_id)
        if job is None:
            raise UnknownJob(f"no live job {job_id!r}")
        with job.lock:
            job.stop_requested = True
            proc = job.proc
        try:
            os.killpg(proc.pid, signal.SIGTERM)
        except ProcessLookupError:
            pass
        deadline = time.monotonic() + grace
        while proc.poll() is None and time.monotonic() < deadline:
            time.sleep(0.01)
        if proc.poll() is None:
            job.force_killed = True
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
        if job.supervisor is not None:
            job.supervisor.join(timeout=10)
        return self.status(job_id)

    def status(self, job_id: str) -> JobStatus:
        with self._lock:
            job = self._live.get(job_id)
            if job is not None:
                with job.lock:
                    return job.status
            for ended in reversed(self._ended):
                if ended.id == job_id:
                    return ended
        raise UnknownJob(f"job {job_id!r} was never seen")

    def list(self) -> list[JobStatus]:
        with self._lock:
            live = []
            for job in self._live.values():
                with job.lock:
                    live.append(job.status)
            return live + list(self._ended)

    def live_pids(self) -> list[int]:
        with self._lock:
            jobs = list(self._live.values())
        pids = []
        for job in jobs:
            with job.lock:
                if job.proc is not None and job.proc.poll() is None:
                    pids.append(job.proc.pid)
        return pids

    def shutdown(self, grace: float = 1.0) -> None:
        """Stop everything; after this no spawned process survives."""
        with self._lock:
            ids = list(self._live)
        for job_id in ids:
            try:
                self.stop(job_id, grace=grace)
            except UnknownJob:
                pass


class JobCtlServer:
    """Envelope facade: start/stop commands, status/list queries."""

    def __init__(self, manager: Optional[JobManager] = None,
                 host: str = "127.0.0.1", port: int = 0):
        self.manager = manager or JobManager()
        self._service = transport.EnvelopeService(SERVICE_NAME, self._handle,
                                                  host=host, port=port)

    @property
    def url(self) -> str:
        return self._service.url

    def start(self) -> "JobCtlServer":
        self._service.start()
        return self

    def stop(self) -> None:
        self.manager.shutdown()
        self._service.stop()

    def __enter__(self) -> "JobCtlServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()

    def _handle(self, env: wire.Envelope) -> wire.Envelope:
        mgr = self.manager
        if env.kind is wire.Kind.COMMAND:
            verb = env.body["verb"]
            params = env.body.get("parameters", {})
            if verb == "start":
                spec = JobSpec.from_body(json.loads(params["spec"]))
                status = mgr.start(spec)
                return wire.reply_to(env, wire.Kind.ACK, SERVICE_NAME,
                                     {"status": status.to_body()})
            if verb == "stop":
                status = mgr.stop(params["id"], grace=float(params.get("grace", "2.0")))
                return wire.reply_to(env, wire.Kind.ACK, SERVICE_NAME,
                                     {"status": status.to_body()})
            raise RcmsError(f"unknown command verb {verb!r}")
        if env.kind is wire.Kind.QUERY:
            subject = env.body.get("subject")
            if subject == "status":
                return wire.reply_to(env, wire.Kind.RESULT, SERVICE_NAME,
                                     {"status": mgr.status(env.body["id"]).to_body()})
            if subject == "list":
                return wire.reply_to(env, wire.Kind.RESULT, SERVICE_NAME,
                                     {"jobs": [s.to_body() for s in mgr.list()]})
            raise RcmsError(f"unknown query subject {subject!r}")
        raise RcmsError(f"jobctl does not handle kind {env.kind.value!r}")
