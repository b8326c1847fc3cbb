"""Command-line entry points: run services, drive sessions, run benchmarks.

Service commands stay in the foreground until SIGINT/SIGTERM. Client
commands locate their peers either through an explicit --url flag or the
registry seeded by RCMS_REGISTRY_URL.
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
import threading

from . import transport, wire
from .control import ExpansionTable, SessionManager, SessionManagerServer, Strategy
from .errors import RcmsError
from .ims import ImsClient, ImsCore, ImsServer, SERVICE_NAME as IMS_NAME
from .jobctl import JobCtlServer, JobManager, JobSpec, RestartPolicy
from .model import Partition, Resource, ResourceKind
from .registry import RegistryClient, RegistryServer, registry_url_from_env
from .resource_service import ResourceService, ResourceServiceClient, ResourceServiceServer
from .simbench import (
    bench_fanout,
    bench_ims,
    bench_registry,
    linear_fit_r2,
    spawn_nodes,
    write_csv,
    write_gnuplot,
)
from .solver import SolverService, load_rules
from .storage import FileBackend, MemoryBackend
from .store import SocketStoreBackend, StoreServer


def _wait_for_signal() -> None:
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    stop.wait()


def _discover(name: str, explicit: str | None) -> str:
    if explicit:
        return explicit
    registry_url = registry_url_from_env()
    if registry_url:
        records = RegistryClient(registry_url, source="runctl").lookup(name)
        if records:
            return records[0].url
    raise SystemExit(f"no --url given and no live {name!r} instance discoverable "
                     f"(set RCMS_REGISTRY_URL or pass the url)")


def _parse_int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


# service commands ----------------------------------------------------------

def cmd_registry(args) -> int:
    server = RegistryServer(host=args.host, port=args.port, ttl=args.ttl).start()
    print(f"registry listening at {server.url}")
    print(f"export RCMS_REGISTRY_URL={server.url}")
    _wait_for_signal()
    server.stop()
    return 0


def cmd_store(args) -> int:
    server = StoreServer(args.db, host=args.host, port=args.port,
                         commit_interval=args.commit_interval_ms / 1000.0).start()
    print(f"store listening at {server.address} (db: {args.db})")
    _wait_for_signal()
    server.stop()
    return 0


def cmd_ims(args) -> int:
    if args.backend == "memory":
        backend = MemoryBackend()
    elif args.backend == "file":
        if not args.file:
            raise SystemExit("--file is required with --backend file")
        backend = FileBackend(args.file)
    elif args.backend == "db":
        if not args.db_addr:
            raise SystemExit("--db-addr is required with --backend db")
        backend = SocketStoreBackend(args.db_addr, pool_size=args.db_pool)
    else:
        raise SystemExit(f"unknown backend {args.backend!r}")
    core = ImsCore(backend=backend, instance_id=args.instance_id)
    server = ImsServer(core, host=args.host, port=args.port,
                       registry_url=args.registry or registry_url_from_env()).start()
    print(f"ims instance {core.instance_id} listening at {server.url}")
    print(f"stream endpoint: {server.base_url}{transport.STREAM_PATH}")
    _wait_for_signal()
    server.stop()
    return 0


def cmd_resource_service(args) -> int:
    service = ResourceService(journal_path=args.journal)
    if args.scan_period > 0:
        service.start_scanning(period=args.scan_period)
    server = ResourceServiceServer(service, host=args.host, port=args.port).start()
    registry_url = args.registry or registry_url_from_env()
    if registry_url:
        RegistryClient(registry_url, source="resource-service").register(
            "resource-service", "rs-1", server.url)
    print(f"resource service listening at {server.url}")
    _wait_for_signal()
    server.stop()
    return 0


def cmd_session_manager(args) -> int:
    rs_url = _discover("resource-service", args.resource_service)
    resources = ResourceServiceClient(rs_url, source="session-manager", cache=True)
    publish = None
    ims_url = args.ims or None
    registry_url = args.registry or registry_url_from_env()
    if not ims_url and registry_url:
        records = RegistryClient(registry_url, source="session-manager").lookup(IMS_NAME)
        if records:
            ims_url = records[0].url
    if ims_url:
        publish = ImsClient(ims_url, source="session-manager").publish
    table = ExpansionTable.from_file(args.expansion_table) if args.expansion_table \
        else ExpansionTable()
    manager = SessionManager(resources, publish=publish, expansion_table=table,
                             strategy=Strategy(args.strategy),
                             worker_limit=args.worker_limit)
    server = SessionManagerServer(manager, host=args.host, port=args.port).start()
    if registry_url:
        RegistryClient(registry_url, source="session-manager").register(
            "session-manager", manager.id, server.url)
    print(f"session manager listening at {server.url}")
    _wait_for_signal()
    server.stop()
    return 0


def cmd_jobctl(args) -> int:
    publish = None
    ims_url = args.ims or None
    registry_url = registry_url_from_env()
    if not ims_url and registry_url:
        records = RegistryClient(registry_url, source="jobctl").lookup(IMS_NAME)
        if records:
            ims_url = records[0].url
    if ims_url:
        publish = ImsClient(ims_url, source="jobctl").publish
    server = JobCtlServer(JobManager(publish=publish), host=args.host, port=args.port).start()
    print(f"job control listening at {server.url}")
    _wait_for_signal()
    server.stop()
    return 0


def cmd_solver(args) -> int:
    rules = load_rules(args.rules)
    ims_url = _discover(IMS_NAME, args.ims)
    sm_url = args.session_manager
    if not sm_url:
        registry_url = registry_url_from_env()
        if registry_url:
            records = RegistryClient(registry_url, source="solver").lookup("session-manager")
            sm_url = records[0].url if records else None
    service = SolverService(rules, ims_url=ims_url, session_manager_url=sm_url,
                            host=args.host, port=args.port).start()
    print(f"solver running with {len(rules)} rules, callback at {service.url}")
    _wait_for_signal()
    service.stop()
    return 0


def cmd_sim_nodes(args) -> int:
    pool = spawn_nodes(args.count, command_delay=args.delay,
                       fail=set(args.fail or []),
                       registry_url=args.registry or registry_url_from_env())
    for sn in pool.nodes:
        print(f"{sn.node.id} {sn.url}")
    _wait_for_signal()
    pool.close()
    return 0


# session / job client commands ----------------------------------------------

def _sm_command(url: str, verb: str, **params) -> wire.Envelope:
    env = wire.make_envelope(wire.Kind.COMMAND, "runctl", "session-manager",
                             {"verb": verb, "parameters": params})
    return transport.request(url, env, timeout=60.0)


def cmd_session(args) -> int:
    url = _discover("session-manager", args.manager)
    if args.action == "open":
        resp = _sm_command(url, "open_session", partition_id=args.partition,
                           user=args.user)
        transport.raise_for_error(resp)
        print(json.dumps(resp.body["session"], indent=2))
    elif args.action == "control":
        resp = _sm_command(url, "control", session_id=args.session,
                           control_verb=args.verb)
        if resp.kind is wire.Kind.ERROR:
            print(json.dumps(resp.body, indent=2))
            return 1
        print(json.dumps(resp.body["report"], indent=2))
    elif args.action == "close":
        transport.raise_for_error(_sm_command(url, "close_session", session_id=args.session))
        print("closed")
    elif args.action == "list":
        env = wire.make_envelope(wire.Kind.QUERY, "runctl", "session-manager",
                                 {"subject": "sessions"})
        resp = transport.raise_for_error(transport.request(url, env))
        print(json.dumps(resp.body["sessions"], indent=2))
    return 0


def cmd_job(args) -> int:
    url = _discover("jobctl", args.jobctl)
    if args.action == "start":
        spec = JobSpec(id=args.id, command=tuple(args.cmd),
                       restart=RestartPolicy.retries(args.restarts)
                       if args.restarts else RestartPolicy.never())
        env = wire.make_envelope(wire.Kind.COMMAND, "runctl", "jobctl",
                                 {"verb": "start",
                                  "parameters": {"spec": json.dumps(spec.to_body())}})
    elif args.action == "stop":
        env = wire.make_envelope(wire.Kind.COMMAND, "runctl", "jobctl",
                                 {"verb": "stop",
                                  "parameters": {"id": args.id, "grace": str(args.grace)}})
    elif args.action == "status":
        env = wire.make_envelope(wire.Kind.QUERY, "runctl", "jobctl",
                                 {"subject": "status", "id": args.id})
    else:
        env = wire.make_envelope(wire.Kind.QUERY, "runctl", "jobctl",
                                 {"subject": "list"})
    resp = transport.raise_for_error(transport.request(url, env, timeout=30.0))
    print(json.dumps(resp.body, indent=2))
    return 0


# benches ----------------------------------------------------------------------

def cmd_bench(args) -> int:
    if args.experiment == "fanout":
        strategies = [Strategy(s) for s in (args.strategies.split(",") if args.strategies
                                            else [s.value for s in Strategy])]
        results = bench_fanout(_parse_int_list(args.n_list), strategies,
                               repetitions=args.reps, command_delay=args.delay,
                               branch=args.branch)
        write_csv(results, args.out)
        if args.gnuplot:
            write_gnuplot(results, args.out, x_column="n", series_column="strategy")
    elif args.experiment == "ims":
        results = bench_ims(_parse_int_list(args.k_list), publishers=args.publishers,
                            subscribers=args.subscribers, duration=args.duration)
        write_csv(results, args.out)
        if args.gnuplot:
            write_gnuplot(results, args.out, x_column="k")
    elif args.experiment == "registry":
        results = bench_registry(_parse_int_list(args.k_list), clients=args.clients,
                                 duration=args.duration)
        write_csv(results, args.out)
        ks = [r.parameters["k"] for r in results]
        medians = [r.median for r in results]
        if len(ks) >= 2:
            print(f"linear fit R^2 over k={ks}: {linear_fit_r2(ks, medians):.4f}")
        if args.gnuplot:
            write_gnuplot(results, args.out, x_column="k")
    for r in results:
        print(f"{r.experiment} {r.parameters}: median={r.median:.4f} p90={r.summary['p90']:.4f}")
    print(f"wrote {args.out}")
    return 0


# demo stack ---------------------------------------------------------------------

def cmd_demo_stack(args) -> int:
    """Everything a console needs, in one process: registry, monitor service,
    resource service with a demo partition tree, session manager, solver, and
    a handful of simulated nodes."""
    registry = RegistryServer().start()
    ims = ImsServer(ImsCore(), registry_url=registry.url).start()

    rs = ResourceService(probe_timeout=0.5)
    rs_server = ResourceServiceServer(rs).start()

    pool = spawn_nodes(args.nodes, command_delay=args.delay)
    for i, sn in enumerate(pool.nodes):
        rs.register_resource(Resource(
            id=sn.node.id, kind=ResourceKind.SOFTWARE, uri=sn.base_url,
            attributes={"type": "readout" if i % 2 == 0 else "builder"},
            exclusive=True))
    half = max(1, args.nodes // 2)
    left = {sn.node.id for sn in pool.nodes[:half]}
    right = {sn.node.id for sn in pool.nodes[half:]}
    rs.define_partition(Partition(id="daq-left", resource_ids=left))
    if right:
        rs.define_partition(Partition(id="daq-right", resource_ids=right))
        rs.define_partition(Partition(id="daq", children=("daq-left", "daq-right")))
    else:
        rs.define_partition(Partition(id="daq", children=("daq-left",)))
    rs.start_scanning(period=args.scan_period)

    manager = SessionManager(rs, publish=ImsClient(ims.url, source="session-manager").publish)
    sm_server = SessionManagerServer(manager).start()
    RegistryClient(registry.url, source="demo").register(
        "session-manager", manager.id, sm_server.url)
    RegistryClient(registry.url, source="demo").register(
        "resource-service", "rs-1", rs_server.url)

    solver = None
    if args.rules:
        solver = SolverService(load_rules(args.rules), ims_url=ims.url,
                               session_manager_url=sm_server.url).start()

    stack = {
        "registry": registry.url,
        "ims": ims.url,
        "stream": ims.base_url + transport.STREAM_PATH,
        "resource_service": rs_server.url,
        "session_manager": sm_server.url,
        "partitions": ["daq", "daq-left"] + (["daq-right"] if right else []),
        "nodes": {sn.node.id: sn.url for sn in pool.nodes},
    }
    print(json.dumps(stack, indent=2), flush=True)
    if args.ports_file:
        with open(args.ports_file, "w") as fh:
            json.dump(stack, fh)

    _wait_for_signal()
    if solver:
        solver.stop()
    sm_server.stop()
    rs_server.stop()
    pool.close()
    ims.stop()
    registry.stop()
    return 0


# parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="runctl",
        description="Distributed run-control framework: services, sessions, benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_host_port(p):
        p.add_argument("--host", default="127.0.0.1")
        p.add_argument("--port", type=int, default=0)

    p = sub.add_parser("registry", help="run the service registry")
    add_host_port(p)
    p.add_argument("--ttl", type=float, default=10.0)
    p.set_defaults(fn=cmd_registry)

    p = sub.add_parser("store", help="run the shared message store")
    add_host_port(p)
    p.add_argument("--db", required=True)
    p.add_argument("--commit-interval-ms", type=float, default=8.0)
    p.set_defaults(fn=cmd_store)

    p = sub.add_parser("ims", help="run a monitor-service instance")
    add_host_port(p)
    p.add_argument("--backend", choices=["memory", "file", "db"], default="memory")
    p.add_argument("--file", help="catalog path for the file backend")
    p.add_argument("--db-addr", help="host:port of the shared store for the db backend")
    p.add_argument("--db-pool", type=int, default=2)
    p.add_argument("--registry", help="registry url (defaults to RCMS_REGISTRY_URL)")
    p.add_argument("--instance-id")
    p.set_defaults(fn=cmd_ims)

    p = sub.add_parser("resource-service", help="run the resource service")
    add_host_port(p)
    p.add_argument("--journal", help="append-only journal path")
    p.add_argument("--scan-period", type=float, default=30.0,
                   help="availability scan period in seconds (0 disables)")
    p.add_argument("--registry")
    p.set_defaults(fn=cmd_resource_service)

    p = sub.add_parser("session-manager", help="run the session manager")
    add_host_port(p)
    p.add_argument("--resource-service", help="resource service url")
    p.add_argument("--ims", help="ims url for control logging")
    p.add_argument("--registry")
    p.add_argument("--expansion-table", help="expansion table json path")
    p.add_argument("--strategy", choices=[s.value for s in Strategy],
                   default=Strategy.BOUNDED_PARALLEL.value)
    p.add_argument("--worker-limit", type=int, default=8)
    p.set_defaults(fn=cmd_session_manager)

    p = sub.add_parser("jobctl", help="run the job control service")
    add_host_port(p)
    p.add_argument("--ims")
    p.set_defaults(fn=cmd_jobctl)

    p = sub.add_parser("solver", help="run the problem solver")
    add_host_port(p)
    p.add_argument("--rules", required=True)
    p.add_argument("--ims")
    p.add_argument("--session-manager")
    p.set_defaults(fn=cmd_solver)

    p = sub.add_parser("sim-nodes", help="spawn simulated controlled nodes")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--delay", type=float, default=0.0)
    p.add_argument("--fail", type=int, nargs="*")
    p.add_argument("--registry")
    p.set_defaults(fn=cmd_sim_nodes)

    p = sub.add_parser("session", help="drive sessions on a session manager")
    p.add_argument("action", choices=["open", "control", "close", "list"])
    p.add_argument("--manager", help="session manager url")
    p.add_argument("--partition")
    p.add_argument("--session")
    p.add_argument("--verb")
    p.add_argument("--user", default="operator")
    p.set_defaults(fn=cmd_session)

    p = sub.add_parser("job", help="drive jobs on a job control service")
    p.add_argument("action", choices=["start", "stop", "status", "list"])
    p.add_argument("--jobctl", help="jobctl url")
    p.add_argument("--id")
    p.add_argument("--cmd", nargs=argparse.REMAINDER,
                   help="command line for job start (everything after --cmd)")
    p.add_argument("--restarts", type=int, default=0)
    p.add_argument("--grace", type=float, default=2.0)
    p.set_defaults(fn=cmd_job)

    p = sub.add_parser("bench", help="run a scalability demonstrator")
    p.add_argument("experiment", choices=["fanout", "ims", "registry"])
    p.add_argument("--out", default="results.csv")
    p.add_argument("--gnuplot", action="store_true")
    p.add_argument("--n-list", default="10,20,30,40,50,60,70,80,90,100,110,120")
    p.add_argument("--strategies")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--delay", type=float, default=0.025)
    p.add_argument("--branch", type=int, help="intermediate FM count override")
    p.add_argument("--k-list", default="1,2,3,4")
    p.add_argument("--publishers", type=int, default=16)
    p.add_argument("--subscribers", type=int, default=0)
    p.add_argument("--clients", type=int, default=15)
    p.add_argument("--duration", type=float, default=4.0)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("demo-stack", help="run every service plus demo nodes in one process")
    p.add_argument("--nodes", type=int, default=4)
    p.add_argument("--delay", type=float, default=0.0)
    p.add_argument("--scan-period", type=float, default=5.0)
    p.add_argument("--rules", help="solver ruleset path")
    p.add_argument("--ports-file", help="write the stack's urls to this json file")
    p.set_defaults(fn=cmd_demo_stack)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except RcmsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
