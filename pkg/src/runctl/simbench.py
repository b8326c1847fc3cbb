"""Simulated DAQ nodes and the benchmark harness.

The three demonstrators measure curve shapes, not absolute numbers tied
to any particular hardware:

  * fan-out       - time to drive a state change into N loopback nodes under
                    each strategy (sequential / bounded / two-level hierarchy)
  * ims scaling   - stored msgs/sec against instance count over one shared
                    store, with message conservation enforced
  * registry      - a trivial durable logging service scaled behind the
                    service registry, fixed client population

Simulated nodes run in-process (their command delay sleeps, so threads
overlap honestly); monitor instances, publishers and log-service instances
run as separate OS processes so scaling reflects real parallelism.
"""

from __future__ import annotations

import csv
import math
import multiprocessing
import os
import signal
import statistics
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

from . import transport, wire
from .control import ChildRef, FmServer, FunctionManager, Strategy
from .errors import ConservationViolation, RcmsError
from .ims import ImsClient, ImsCluster
from .model import FsmCommand, FsmState, LogMessage, Severity, fsm_transition
from .registry import RegistryClient, RegistryServer
from .storage import QueryCriteria
from .store import SocketStoreBackend, StoreServer

NODE_SERVICE_NAME = "sim-node"
LOGSVC_NAME = "logsvc"

DEFAULT_REPETITIONS = 5
DEFAULT_PAYLOAD_BYTES = 400


class FailMode(Enum):
    NONE = "none"
    DROP = "drop"      # never answers (the client times out)
    ERROR = "error"    # answers with an error envelope


class SimNode:
    """A dummy controlled application: applies the state machine to itself,
    takes ``command_delay`` seconds per command, and serializes its own
    command handling like one real DAQ process would."""

    def __init__(self, node_id: str, command_delay: float = 0.0,
                 fail_mode: FailMode = FailMode.NONE, drop_hold: float = 10.0):
        self.id = node_id
        self.command_delay = command_delay
        self.fail_mode = fail_mode
        self.drop_hold = drop_hold
        self.state = FsmState.INITIAL
        self._lock = threading.Lock()

    def handle(self, env: wire.Envelope) -> wire.Envelope:
        if env.kind is wire.Kind.COMMAND:
            if env.body["verb"] == "set_fail_mode":
                # harness knob, reachable over the wire for fault injection
                self.fail_mode = FailMode(env.body.get("parameters", {}).get("mode", "none"))
                return wire.reply_to(env, wire.Kind.ACK, self.id,
                                     {"fail_mode": self.fail_mode.value})
            if self.fail_mode is FailMode.DROP:
                time.sleep(self.drop_hold)
                raise RcmsError("dropped")
            if self.fail_mode is FailMode.ERROR:
                raise RcmsError(f"node {self.id} simulated fault")
            cmd = wire.command_from_body(env.body)
            with self._lock:
                if self.command_delay > 0:
                    time.sleep(self.command_delay)  # the dummy action
                self.state = fsm_transition(self.state, cmd)
                new_state = self.state
            return wire.reply_to(env, wire.Kind.ACK, self.id, {"state": new_state.value})
        if env.kind is wire.Kind.QUERY and env.body.get("subject") == "state":
            return wire.reply_to(env, wire.Kind.ACK, self.id, {"state": self.state.value})
        raise RcmsError(f"sim node does not handle kind {env.kind.value!r}")


@dataclass
class SpawnedNode:
    node: SimNode
    server: transport.EnvelopeService

    @property
    def url(self) -> str:
        return self.server.url

    @property
    def base_url(self) -> str:
        return self.server.base_url


class NodePool:
    def __init__(self, nodes: list[SpawnedNode]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def child_refs(self, n: Optional[int] = None) -> list[ChildRef]:
        picked = self.nodes if n is None else self.nodes[:n]
        return [ChildRef(id=sn.node.id, url=sn.url) for sn in picked]

    def set_states(self, state: FsmState, n: Optional[int] = None) -> None:
        for sn in (self.nodes if n is None else self.nodes[:n]):
            sn.node.state = state

    def states(self, n: Optional[int] = None) -> list[FsmState]:
        return [sn.node.state for sn in (self.nodes if n is None else self.nodes[:n])]

    def close(self) -> None:
        for sn in self.nodes:
            sn.server.stop()


def spawn_nodes(n: int, command_delay: float = 0.0,
                fail: Iterable[int] = (), fail_mode: FailMode = FailMode.DROP,
                drop_hold: float = 10.0,
                registry_url: Optional[str] = None,
                host: str = "127.0.0.1") -> NodePool:
    """Bring up n nodes on loopback ports (a per-machine deployment collapsed
    onto one host); optionally announce them in the registry."""
    if n < 1:
        raise ValueError("need at least one node")
    failing = set(fail)
    nodes: list[SpawnedNode] = []
    registry = RegistryClient(registry_url, source="simbench") if registry_url else None
    try:
        for i in range(n):
            node = SimNode(f"node-{i:03d}", command_delay=command_delay,
                           fail_mode=fail_mode if i in failing else FailMode.NONE,
                           drop_hold=drop_hold)
            server = transport.EnvelopeService(node.id, node.handle, host=host).start()
            nodes.append(SpawnedNode(node=node, server=server))
            if registry is not None:
                registry.register(NODE_SERVICE_NAME, node.id, server.url)
    except Exception:
        for sn in nodes:
            sn.server.stop()
        raise
    return NodePool(nodes)


def build_two_level(leaves: Sequence[ChildRef], worker_limit: int = 8,
                    timeout: float = transport.DEFAULT_TIMEOUT,
                    branch: Optional[int] = None,
                    request_fn=transport.request) -> tuple[FunctionManager, list[FmServer]]:
    """The hierarchical layout: ceil(sqrt(N)) intermediate FMs with balanced
    leaf slices, each applying bounded fan-out to its slice."""
    m = branch or max(1, math.ceil(math.sqrt(len(leaves))))
    servers: list[FmServer] = []
    children: list[ChildRef] = []
    groups: dict[str, list[str]] = {}
    for i in range(m):
        slice_leaves = list(leaves[i::m])
        if not slice_leaves:
            continue
        fm = FunctionManager(fm_id=f"fm-mid-{i}", partition_id=f"slice-{i}",
                             children=slice_leaves, strategy=Strategy.BOUNDED_PARALLEL,
                             worker_limit=worker_limit, timeout=timeout,
                             request_fn=request_fn)
        server = FmServer(fm).start()
        servers.append(server)
        children.append(ChildRef(id=fm.id, url=server.url, is_fm=True))
        groups[fm.id] = [c.id for c in slice_leaves]
    root = FunctionManager(fm_id="fm-root", partition_id="root", children=children,
                           strategy=Strategy.HIERARCHICAL, worker_limit=worker_limit,
                           timeout=timeout, group_members=groups,
                           request_fn=request_fn)
    return root, servers


# results ------------------------------------------------------------------

@dataclass
class BenchResult:
    experiment: str
    parameters: dict
    samples: list[float]
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.samples) < 5:
            raise ValueError(f"a data point needs >= 5 samples, got {len(self.samples)}")
        ordered = sorted(self.samples)
        self.summary = {
            "median": statistics.median(ordered),
            "p90": ordered[min(len(ordered) - 1, math.ceil(0.9 * len(ordered)) - 1)],
        }

    @property
    def median(self) -> float:
        return self.summary["median"]


def write_csv(results: list[BenchResult], path: str) -> None:
    """One row per data point; parameters verbatim, fixed column order."""
    if not results:
        return
    param_keys = sorted({k for r in results for k in r.parameters})
    header = ["experiment", *param_keys, "samples", "median", "p90"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in results:
            writer.writerow([r.experiment,
                             *[r.parameters.get(k, "") for k in param_keys],
                             len(r.samples),
                             f"{r.summary['median']:.6f}",
                             f"{r.summary['p90']:.6f}"])


def write_gnuplot(results: list[BenchResult], csv_path: str, x_column: str,
                  series_column: Optional[str] = None) -> str:
    """Companion plot script next to the CSV."""
    gp_path = os.path.splitext(csv_path)[0] + ".gp"
    param_keys = sorted({k for r in results for k in r.parameters})
    columns = ["experiment", *param_keys, "samples", "median", "p90"]
    x_idx = columns.index(x_column) + 1
    y_idx = columns.index("median") + 1
    lines = [
        "set datafile separator ','",
        "set key top left",
        f"set xlabel '{x_column}'",
        "set ylabel 'median'",
        "set style data linespoints",
    ]
    if series_column:
        s_idx = columns.index(series_column) + 1
        values = sorted({str(r.parameters.get(series_column)) for r in results})
        plots = ", ".join(
            f"'{os.path.basename(csv_path)}' using {x_idx}:(strcol({s_idx}) eq '{v}' ? ${y_idx} : 1/0) title '{v}'"
            for v in values)
        lines.append(f"plot {plots}")
    else:
        lines.append(f"plot '{os.path.basename(csv_path)}' using {x_idx}:{y_idx} notitle")
    with open(gp_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return gp_path


def linear_fit_r2(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares goodness of fit for the registry scaling criterion."""
    n = len(xs)
    mean_x = sum(xs) / n
    mean_y = sum(ys) / n
    sxx = sum((x - mean_x) ** 2 for x in xs)
    sxy = sum((x - mean_x) * (y - mean_y) for x, y in zip(xs, ys))
    if sxx == 0:
        return 0.0
    slope = sxy / sxx
    intercept = mean_y - slope * mean_x
    ss_res = sum((y - (slope * x + intercept)) ** 2 for x, y in zip(xs, ys))
    ss_tot = sum((y - mean_y) ** 2 for y in ys)
    if ss_tot == 0:
        return 1.0
    return 1.0 - ss_res / ss_tot


# fan-out demonstrator ------------------------------------------------------

def bench_fanout(n_list: Sequence[int], strategies: Sequence[Strategy],
                 repetitions: int = DEFAULT_REPETITIONS,
                 command_delay: float = 0.025,
                 worker_limit: int = 8,
                 branch: Optional[int] = None,
                 timeout: float = transport.DEFAULT_TIMEOUT) -> list[BenchResult]:
    """Drive one state transition into n nodes per strategy and record the
    wall time. Every sample is validated (all n nodes really moved) before
    its timing counts; a partial failure aborts that sample and is recorded.

    The default per-node work time keeps the measurement in the regime the
    curves are about (command latency, not loopback protocol overhead).
    """
    pool = spawn_nodes(max(n_list), command_delay=command_delay)
    results: list[BenchResult] = []
    try:
        for n in n_list:
            leaves = pool.child_refs(n)
            for strategy in strategies:
                servers: list[FmServer] = []
                if strategy is Strategy.HIERARCHICAL:
                    fm, servers = build_two_level(leaves, worker_limit=worker_limit,
                                                  timeout=timeout, branch=branch)
                else:
                    fm = FunctionManager(fm_id=f"fm-{strategy.value}", partition_id="bench",
                                         children=leaves, strategy=strategy,
                                         worker_limit=worker_limit, timeout=timeout)
                samples: list[float] = []
                failures = 0
                try:
                    # untimed warm-up: pay connection setup outside the samples
                    pool.set_states(FsmState.INITIAL, n)
                    fm.fanout(FsmCommand("initialize"))
                    for _ in range(repetitions):
                        pool.set_states(FsmState.INITIAL, n)
                        result = fm.fanout(FsmCommand("initialize"))
                        ok = (not result.failed
                              and len(result.outcomes) == n
                              and all(s is FsmState.HALTED for s in result.states.values())
                              and all(s is FsmState.HALTED for s in pool.states(n)))
                        if not ok:
                            failures += 1
                            continue
                        samples.append(result.elapsed)
                finally:
                    fm.close()
                    for server in servers:
                        server.stop()
                if len(samples) < 5:
                    raise RcmsError(
                        f"fan-out point n={n} strategy={strategy.value} lost too many "
                        f"samples to partial failures ({failures} failed)")
                results.append(BenchResult(
                    experiment="fanout",
                    parameters={"n": n, "strategy": strategy.value,
                                "command_delay": command_delay,
                                "worker_limit": worker_limit,
                                "failed_samples": failures},
                    samples=samples))
    finally:
        pool.close()
    return results


# ims demonstrator ------------------------------------------------------------

def _ims_publisher_main(registry_url, k, go, stop, result_q, idx, payload_bytes, ready_q):
    # discover the instance set through the registry, then spread round-robin
    urls = []
    deadline = time.monotonic() + 30
    while len(urls) < k and time.monotonic() < deadline:
        urls = [r.url for r in RegistryClient(registry_url, source=f"pub-{idx}").lookup("ims")]
    clients = [ImsClient(u, source=f"pub-{idx}", timeout=30.0) for u in urls]
    payload = "x" * payload_bytes
    acked = 0
    errors = 0
    ready_q.put(idx)
    go.wait()
    i = 0
    while not stop.is_set():
        client = clients[i % len(clients)]
        i += 1
        try:
            client.publish(LogMessage(source=f"pub-{idx}", msg_type="bench",
                                      severity=Severity.INFO, payload=payload))
            acked += 1
        except RcmsError:
            errors += 1
    result_q.put((idx, acked, errors))


def _ims_subscriber_main(instance_url, idx, ready_q, stop):
    received = [0]

    def handler(env):
        received[0] += 1
        return wire.reply_to(env, wire.Kind.ACK, f"sub-{idx}", {})

    server = transport.EnvelopeService(f"sub-{idx}", handler).start()
    from .model import Subscription
    client = ImsClient(instance_url, source=f"sub-{idx}")
    client.subscribe(Subscription(id=f"bench-sub-{idx}", callback_url=server.url,
                                  msg_types=frozenset({"bench"})))
    ready_q.put(idx)
    stop.wait()
    server.stop()


def bench_ims(k_list: Sequence[int], publishers: int = 16, subscribers: int = 0,
              duration: float = 4.0, windows: int = 5,
              payload_bytes: int = DEFAULT_PAYLOAD_BYTES,
              warmup: float = 1.5,
              backend_pool_size: int = 2,
              commit_interval: float = 0.012,
              workdir: Optional[str] = None) -> list[BenchResult]:
    """Flat-out publishing against k instances over one shared store.

    Throughput samples are stored-count deltas over equal windows; at the end
    the run fails unless every stored message is accounted for (publisher
    acks plus the instances' own drop-warning records).

    The defaults keep every k point bound by the store connection pools (the
    durability wait), not by host CPU, so consecutive k gaps stay far above
    scheduling noise on small machines."""
    import tempfile
    ctx = multiprocessing.get_context("spawn")
    results: list[BenchResult] = []
    for k in k_list:
        with tempfile.TemporaryDirectory(dir=workdir) as tmp:
            with StoreServer(os.path.join(tmp, "store.db"),
                             commit_interval=commit_interval) as store:
                with RegistryServer() as registry:
                    cluster = ImsCluster(k, store.address, registry_url=registry.url,
                                         backend_pool_size=backend_pool_size).start()
                    reader = SocketStoreBackend(store.address, pool_size=1)
                    go = ctx.Event()
                    stop = ctx.Event()
                    sub_stop = ctx.Event()
                    result_q = ctx.SimpleQueue()
                    sub_ready = ctx.SimpleQueue()
                    pub_ready = ctx.SimpleQueue()
                    sub_procs = []
                    pub_procs = []
                    try:
                        for s in range(subscribers):
                            proc = ctx.Process(
                                target=_ims_subscriber_main,
                                args=(cluster.urls[s % k], s, sub_ready, sub_stop),
                                daemon=True)
                            proc.start()
                            sub_procs.append(proc)
                        for _ in range(subscribers):
                            sub_ready.get()
                        for i in range(publishers):
                            proc = ctx.Process(
                                target=_ims_publisher_main,
                                args=(registry.url, k, go, stop, result_q, i,
                                      payload_bytes, pub_ready),
                                daemon=True)
                            proc.start()
                            pub_procs.append(proc)
                        for _ in range(publishers):
                            pub_ready.get()  # measure only a fully spawned population
                        go.set()
                        time.sleep(warmup)
                        window_s = duration / windows
                        samples = []
                        last = reader.count()
                        for _ in range(windows):
                            time.sleep(window_s)
                            now = reader.count()
                            samples.append((now - last) / window_s)
                            last = now
                        stop.set()
                        acked_total = 0
                        errors_total = 0
                        for _ in range(publishers):
                            _, acked, errors = result_q.get()
                            acked_total += acked
                            errors_total += errors
                        for proc in pub_procs:
                            proc.join(timeout=30)
                        stored_total = reader.count()
                        drop_warns = len(reader.query(QueryCriteria(
                            min_severity=Severity.WARN,
                            msg_types=frozenset({"delivery-drop"}))))
                        if errors_total or stored_total != acked_total + drop_warns:
                            raise ConservationViolation(
                                f"k={k}: stored={stored_total} acked={acked_total} "
                                f"drop_warns={drop_warns} publish_errors={errors_total}")
                        results.append(BenchResult(
                            experiment="ims",
                            parameters={"k": k, "publishers": publishers,
                                        "subscribers": subscribers, "backend": "db",
                                        "window_s": round(window_s, 3),
                                        "stored_total": stored_total,
                                        "acked_total": acked_total},
                            samples=samples))
                    finally:
                        stop.set()
                        sub_stop.set()
                        for proc in pub_procs + sub_procs:
                            proc.join(timeout=10)
                            if proc.is_alive():
                                proc.terminate()
                        reader.close()
                        cluster.stop()
    return results


# registry demonstrator -----------------------------------------------------

class LogSink:
    """The trivial logging service: every accepted record is durable by the
    next group flush (write + fsync), and a small worker pool bounds how many
    requests ride each flush. Count queries let the harness sample rates."""

    def __init__(self, name: str, log_path: str, pool_size: int = 2,
                 flush_interval: float = 0.008):
        self._name = name
        self._fh = open(log_path, "ab")
        self._sem = threading.Semaphore(pool_size)
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._pending: list[bytes] = []
        self._accepted = 0   # ticket counter
        self._flushed = 0    # highest durable ticket
        self._stop = threading.Event()
        self._flusher = threading.Thread(target=self._flush_loop, daemon=True,
                                         name=f"{name}-flush")
        self._interval = flush_interval
        self._flusher.start()
        self.service = transport.EnvelopeService(name, self._handle)

    def _flush_loop(self):
        while not self._stop.wait(self._interval):
            with self._lock:
                batch, self._pending = self._pending, []
                upto = self._accepted
            if batch:
                self._fh.write(b"".join(batch))
                self._fh.flush()
                os.fsync(self._fh.fileno())
            with self._cond:
                self._flushed = upto
                self._cond.notify_all()

    def _handle(self, env: wire.Envelope) -> wire.Envelope:
        if env.kind is wire.Kind.PUBLISH:
            with self._sem:
                with self._lock:
                    self._accepted += 1
                    ticket = self._accepted
                    self._pending.append(wire.encode(env) + b"\n")
                with self._cond:
                    self._cond.wait_for(lambda: self._flushed >= ticket, timeout=10)
            return wire.reply_to(env, wire.Kind.ACK, self._name, {"n": ticket})
        if env.kind is wire.Kind.QUERY and env.body.get("subject") == "count":
            with self._lock:
                n = self._flushed
            return wire.reply_to(env, wire.Kind.RESULT, self._name, {"n": n})
        raise RcmsError(f"log sink does not handle kind {env.kind.value!r}")

    @property
    def url(self) -> str:
        return self.service.url

    def start(self) -> "LogSink":
        self.service.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._flusher.join(timeout=5)
        self.service.stop()
        self._fh.close()


def _logsink_main(registry_url, idx, ready_q, stop, pool_size, flush_interval, tmpdir):
    term = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: term.set())
    sink = LogSink(f"logsvc-{idx}", os.path.join(tmpdir, f"sink-{idx}.log"),
                   pool_size=pool_size, flush_interval=flush_interval).start()
    RegistryClient(registry_url, source=sink._name).register(
        LOGSVC_NAME, f"logsvc-{idx}", sink.url)
    ready_q.put(idx)
    while not stop.is_set() and not term.is_set():
        stop.wait(0.2)
    sink.stop()


def _logclient_main(registry_url, go, stop, result_q, idx, ready_q):
    instances = RegistryClient(registry_url, source=f"client-{idx}").lookup(LOGSVC_NAME)
    urls = [r.url for r in instances]
    acked = 0
    errors = 0
    ready_q.put(idx)
    go.wait()
    i = 0
    while not stop.is_set():
        url = urls[i % len(urls)]
        i += 1
        env = wire.make_envelope(wire.Kind.PUBLISH, f"client-{idx}", LOGSVC_NAME,
                                 wire.log_message_to_body(LogMessage(
                                     source=f"client-{idx}", msg_type="log",
                                     severity=Severity.INFO, payload="y" * 120)))
        try:
            transport.push(url, env, timeout=30.0)
            acked += 1
        except RcmsError:
            errors += 1
    result_q.put((idx, acked, errors))


def _query_sink_count(url: str) -> int:
    env = wire.make_envelope(wire.Kind.QUERY, "bench", LOGSVC_NAME, {"subject": "count"})
    resp = transport.raise_for_error(transport.request(url, env, timeout=10.0))
    return int(resp.body["n"])


def bench_registry(k_list: Sequence[int], clients: int = 15,
                   duration: float = 3.0, windows: int = 5,
                   warmup: float = 1.0,
                   pool_size: int = 2, flush_interval: float = 0.008,
                   workdir: Optional[str] = None) -> list[BenchResult]:
    """Clients discover logsvc instances through the registry and spread load
    round-robin; aggregate throughput is sampled per window for k=1..max."""
    import tempfile
    ctx = multiprocessing.get_context("spawn")
    results: list[BenchResult] = []
    for k in k_list:
        with tempfile.TemporaryDirectory(dir=workdir) as tmp:
            with RegistryServer() as registry:
                go = ctx.Event()
                stop = ctx.Event()
                ready_q = ctx.SimpleQueue()
                result_q = ctx.SimpleQueue()
                sink_procs = []
                client_procs = []
                try:
                    for i in range(k):
                        proc = ctx.Process(
                            target=_logsink_main,
                            args=(registry.url, i, ready_q, stop, pool_size,
                                  flush_interval, tmp),
                            daemon=True)
                        proc.start()
                        sink_procs.append(proc)
                    for _ in range(k):
                        ready_q.get()
                    sink_urls = [r.url for r in
                                 RegistryClient(registry.url, source="bench").lookup(LOGSVC_NAME)]
                    assert len(sink_urls) == k
                    client_ready = ctx.SimpleQueue()
                    for i in range(clients):
                        proc = ctx.Process(
                            target=_logclient_main,
                            args=(registry.url, go, stop, result_q, i, client_ready),
                            daemon=True)
                        proc.start()
                        client_procs.append(proc)
                    for _ in range(clients):
                        client_ready.get()
                    go.set()
                    time.sleep(warmup)
                    window_s = duration / windows
                    samples = []
                    last = sum(_query_sink_count(u) for u in sink_urls)
                    for _ in range(windows):
                        time.sleep(window_s)
                        now = sum(_query_sink_count(u) for u in sink_urls)
                        samples.append((now - last) / window_s)
                        last = now
                    stop.set()
                    acked_total = 0
                    for _ in range(clients):
                        _, acked, errors = result_q.get()
                        acked_total += acked
                    results.append(BenchResult(
                        experiment="registry",
                        parameters={"k": k, "clients": clients,
                                    "window_s": round(window_s, 3),
                                    "acked_total": acked_total},
                        samples=samples))
                finally:
                    stop.set()
                    for proc in client_procs + sink_procs:
                        proc.join(timeout=10)
                        if proc.is_alive():
                            proc.terminate()
    return results
