"""Function-manager and session-manager tests against live simulated nodes."""

import json
import random
import threading

import pytest

from runctl import transport
from runctl.control import (
    ChildRef,
    ExpansionTable,
    FunctionManager,
    SessionManager,
    SessionManagerServer,
    Strategy,
)
from runctl.errors import (
    ContentionConflict,
    EmptyChildSet,
    PartialFailure,
    SessionClosed,
    UnknownVerb,
)
from runctl.ims import ImsCore
from runctl.model import (
    FsmCommand,
    FsmState,
    Partition,
    Resource,
    ResourceKind,
    Severity,
)
from runctl.resource_service import ResourceService
from runctl.simbench import FailMode, build_two_level, spawn_nodes
from runctl.storage import QueryCriteria


@pytest.fixture(scope="module")
def pool():
    nodes = spawn_nodes(12, drop_hold=0.7)
    yield nodes
    nodes.close()


def fresh(pool, n, state=FsmState.INITIAL):
    pool.set_states(state, n)
    for sn in pool.nodes:
        sn.node.fail_mode = FailMode.NONE
    return pool.child_refs(n)


class TestExpansion:
    def test_default_broadcast(self):
        table = ExpansionTable()
        plan = table.expand("start", "p1")
        assert len(plan.steps) == 1
        assert plan.steps[0].selector == "*"
        assert plan.steps[0].command.verb == "start"

    def test_two_phase_override(self):
        table = ExpansionTable([{
            "subsystem": "daq-*",
            "verb": "configure",
            "phases": [
                {"selector": "attr:type=readout", "verb": "configure"},
                {"selector": "attr:type=builder", "verb": "configure"},
            ],
        }])
        plan = table.expand("configure", "daq-main")
        assert [s.selector for s in plan.steps] == ["attr:type=readout", "attr:type=builder"]
        # non-matching subsystem falls back to the default broadcast
        fallback = table.expand("configure", "other")
        assert [s.selector for s in fallback.steps] == ["*"]

    def test_unknown_verb(self):
        with pytest.raises(UnknownVerb):
            ExpansionTable().expand("fly", "p1")

    def test_from_file(self, tmp_path):
        path = tmp_path / "expansion.json"
        path.write_text(json.dumps({"expansions": [{
            "subsystem": "*", "verb": "cold-start",
            "phases": [{"selector": "*", "verb": "initialize"},
                       {"selector": "*", "verb": "configure"}],
        }]}))
        table = ExpansionTable.from_file(str(path))
        plan = table.expand("cold-start", "anything")
        assert [s.command.verb for s in plan.steps] == ["initialize", "configure"]


class TestFanout:
    def test_single_leaf_all_strategies_identical(self, pool):
        for strategy in (Strategy.SEQUENTIAL, Strategy.BOUNDED_PARALLEL):
            leaves = fresh(pool, 1)
            fm = FunctionManager("fm", "p", leaves, strategy=strategy)
            result = fm.fanout(FsmCommand("initialize"))
            assert result.state_multiset() == ["Halted"]
        leaves = fresh(pool, 1)
        fm, servers = build_two_level(leaves)
        try:
            result = fm.fanout(FsmCommand("initialize"))
            assert result.state_multiset() == ["Halted"]
        finally:
            for s in servers:
                s.stop()

    def test_dead_endpoint_partial_failure(self, pool):
        leaves = fresh(pool, 10)
        pool.nodes[3].node.fail_mode = FailMode.ERROR
        fm = FunctionManager("fm", "p", leaves, strategy=Strategy.BOUNDED_PARALLEL)
        result = fm.fanout(FsmCommand("initialize"))
        assert result.failed == {"node-003"}
        assert len(result.outcomes) == 10
        ok_states = [s for s in result.states.values()]
        assert len(ok_states) == 9 and all(s is FsmState.HALTED for s in ok_states)

    def test_timeout_is_an_outcome(self, pool):
        leaves = fresh(pool, 3)
        pool.nodes[1].node.fail_mode = FailMode.DROP
        fm = FunctionManager("fm", "p", leaves, strategy=Strategy.SEQUENTIAL, timeout=0.3)
        result = fm.fanout(FsmCommand("initialize"))
        assert len(result.outcomes) == 3
        assert result.failed == {"node-001"}
        [err] = [o for cid, o in result.outcomes.items() if cid == "node-001"]
        assert err.code == "Timeout"

    def test_in_flight_bound(self, pool):
        leaves = fresh(pool, 12)
        in_flight = [0]
        peak = [0]
        lock = threading.Lock()

        def counting_request(url, env, timeout=None):
            with lock:
                in_flight[0] += 1
                peak[0] = max(peak[0], in_flight[0])
            try:
                return transport.request(url, env, timeout=timeout)
            finally:
                with lock:
                    in_flight[0] -= 1

        fm = FunctionManager("fm", "p", leaves, strategy=Strategy.BOUNDED_PARALLEL,
                             worker_limit=4, request_fn=counting_request)
        result = fm.fanout(FsmCommand("initialize"))
        assert not result.failed
        assert peak[0] <= 4

    def test_strategy_equivalence_randomized(self, pool):
        """Per-child outcome multisets are identical across the three
        strategies for randomized (N, command, fault-set) cases."""
        rnd = random.Random(1203)
        for case in range(12):
            n = rnd.randint(2, 12)
            start_state, verb = rnd.choice([
                (FsmState.INITIAL, "initialize"),
                (FsmState.HALTED, "configure"),
                (FsmState.CONFIGURED, "start"),
                (FsmState.RUNNING, "stop"),
                (FsmState.INITIAL, "configure"),  # everyone answers IllegalTransition
            ])
            n_faults = rnd.randint(0, min(2, n - 1))
            fault_ids = rnd.sample(range(n), n_faults)

            def arm():
                pool.set_states(start_state, n)
                for sn in pool.nodes:
                    sn.node.fail_mode = FailMode.NONE
                for i in fault_ids:
                    pool.nodes[i].node.fail_mode = rnd_mode
                return pool.child_refs(n)

            rnd_mode = rnd.choice([FailMode.ERROR, FailMode.DROP])
            multisets = []
            for strategy in (Strategy.SEQUENTIAL, Strategy.BOUNDED_PARALLEL):
                leaves = arm()
                fm = FunctionManager("fm", "p", leaves, strategy=strategy,
                                     worker_limit=4, timeout=0.25)
                multisets.append(fm.fanout(FsmCommand(verb)).state_multiset())
            leaves = arm()
            root, servers = build_two_level(leaves, timeout=0.25)
            try:
                root.timeout = 3.0  # outer hop must outlive inner timeouts
                multisets.append(root.fanout(FsmCommand(verb)).state_multiset())
            finally:
                for s in servers:
                    s.stop()
            assert multisets[0] == multisets[1] == multisets[2], f"case {case}"

    def test_empty_children_rejected(self):
        fm = FunctionManager("fm", "p", [])
        with pytest.raises(EmptyChildSet):
            fm.fanout(FsmCommand("initialize"))

    def test_hierarchical_requires_fm_children(self):
        with pytest.raises(ValueError):
            FunctionManager("fm", "p", [ChildRef(id="leaf", url="http://x")],
                            strategy=Strategy.HIERARCHICAL)


def build_world(pool, n_leaves=4, split=True):
    """Resource service with one partition tree over the first n pool nodes."""
    rs = ResourceService(prober=lambda uri: True)
    for i in range(n_leaves):
        sn = pool.nodes[i]
        rs.register_resource(Resource(
            id=sn.node.id, kind=ResourceKind.SOFTWARE, uri=sn.base_url,
            attributes={"type": "readout" if i % 2 == 0 else "builder"},
            exclusive=True))
    half = n_leaves // 2
    if split:
        rs.define_partition(Partition(id="p-left",
                                      resource_ids={pool.nodes[i].node.id for i in range(half)}))
        rs.define_partition(Partition(id="p-right",
                                      resource_ids={pool.nodes[i].node.id
                                                    for i in range(half, n_leaves)}))
        rs.define_partition(Partition(id="p-top", children=("p-left", "p-right")))
    else:
        rs.define_partition(Partition(id="p-top",
                                      resource_ids={pool.nodes[i].node.id
                                                    for i in range(n_leaves)}))
    return rs


class TestSessions:
    def test_open_control_close_happy_path(self, pool):
        fresh(pool, 4)
        rs = build_world(pool)
        ims = ImsCore()
        mgr = SessionManager(rs, publish=ims.publish)
        session = mgr.open_session("p-top", user="shifter")
        assert session.state is FsmState.INITIAL

        for verb in ("initialize", "configure", "start"):
            report = mgr.control(session.id, verb)
        assert report.state is FsmState.RUNNING
        assert pool.states(4) == [FsmState.RUNNING] * 4

        tree = mgr.session_tree(session.id)
        assert tree["state"] == "Running"
        assert {c["partition_id"] for c in tree["children"]} == {"p-left", "p-right"}

        mgr.close_session(session.id)
        assert pool.states(4) == [FsmState.HALTED] * 4
        assert rs.allocation_of(session.id) is None
        mgr.close_session(session.id)  # second close is a no-op

        step_logs = ims.query(QueryCriteria(msg_types=frozenset({"control-step"})))
        assert len(step_logs) == 3
        rs.close()

    def test_contention_propagates(self, pool):
        fresh(pool, 4)
        rs = build_world(pool)
        mgr = SessionManager(rs)
        mgr.open_session("p-top", user="a")
        with pytest.raises(ContentionConflict):
            mgr.open_session("p-left", user="b")
        rs.close()

    def test_concurrent_sessions_on_disjoint_partitions(self, pool):
        fresh(pool, 4)
        rs = build_world(pool)
        mgr = SessionManager(rs)
        s1 = mgr.open_session("p-left", user="a")
        s2 = mgr.open_session("p-right", user="b")
        assert s1.id != s2.id
        mgr.control(s1.id, "initialize")
        assert pool.states(4) == [FsmState.HALTED] * 2 + [FsmState.INITIAL] * 2
        mgr.control(s2.id, "initialize")
        assert pool.states(4) == [FsmState.HALTED] * 4
        rs.close()

    def test_illegal_verb_everywhere_is_partial_failure(self, pool):
        fresh(pool, 4, state=FsmState.HALTED)
        rs = build_world(pool)
        mgr = SessionManager(rs)
        session = mgr.open_session("p-top", user="a")
        with pytest.raises(PartialFailure) as exc_info:
            mgr.control(session.id, "start")  # illegal from Halted
        report = exc_info.value.report
        assert len(report.failed) == 4
        assert report.state is FsmState.HALTED  # unchanged
        assert pool.states(4) == [FsmState.HALTED] * 4
        rs.close()

    def test_single_fault_yields_mixed(self, pool):
        fresh(pool, 4)
        rs = build_world(pool)
        ims = ImsCore()
        mgr = SessionManager(rs, publish=ims.publish, timeout=0.4)
        session = mgr.open_session("p-top", user="a")
        mgr.control(session.id, "initialize")
        pool.nodes[2].node.fail_mode = FailMode.ERROR
        with pytest.raises(PartialFailure) as exc_info:
            mgr.control(session.id, "configure")
        report = exc_info.value.report
        assert report.failed == {"node-002"}
        assert report.state is FsmState.MIXED
        pool.nodes[2].node.fail_mode = FailMode.NONE
        rs.close()

    def test_close_with_unreachable_leaves_still_releases(self, pool):
        fresh(pool, 4)
        rs = build_world(pool)
        ims = ImsCore()
        mgr = SessionManager(rs, publish=ims.publish, timeout=0.4)
        session = mgr.open_session("p-top", user="a")
        mgr.control(session.id, "initialize")
        pool.nodes[0].node.fail_mode = FailMode.DROP
        mgr.close_session(session.id)
        assert rs.allocation_of(session.id) is None
        warns = ims.query(QueryCriteria(min_severity=Severity.WARN,
                                        msg_types=frozenset({"session-close"})))
        assert warns and "node-000" in warns[0].msg.payload
        pool.nodes[0].node.fail_mode = FailMode.NONE
        rs.close()

    def test_control_after_close_rejected(self, pool):
        fresh(pool, 4)
        rs = build_world(pool)
        mgr = SessionManager(rs)
        session = mgr.open_session("p-top", user="a")
        mgr.close_session(session.id)
        with pytest.raises(SessionClosed):
            mgr.control(session.id, "initialize")
        rs.close()

    def test_phased_expansion_orders_types(self, pool):
        fresh(pool, 4)
        rs = build_world(pool, split=False)
        order = []
        real_request = transport.request

        def tracing_request(url, env, timeout=None):
            if env.kind.value == "command":
                order.append(env.target)
            return real_request(url, env, timeout=timeout)

        table = ExpansionTable([{
            "subsystem": "*", "verb": "initialize",
            "phases": [{"selector": "attr:type=readout", "verb": "initialize"},
                       {"selector": "attr:type=builder", "verb": "initialize"}],
        }])
        mgr = SessionManager(rs, expansion_table=table, request_fn=tracing_request)
        session = mgr.open_session("p-top", user="a")
        report = mgr.control(session.id, "initialize")
        assert len(report.steps) == 2
        assert len(report.outcomes) == 4
        # readout nodes (even ids) are all commanded before builder nodes
        readout = {"node-000", "node-002"}
        assert set(order[:2]) == readout
        rs.close()


class TestSessionManagerHttp:
    def test_envelope_surface(self, pool):
        fresh(pool, 4)
        rs = build_world(pool)
        mgr = SessionManager(rs)
        with SessionManagerServer(mgr) as server:
            from runctl import wire

            def cmd(verb, **params):
                env = wire.make_envelope(wire.Kind.COMMAND, "console", "smr",
                                         {"verb": verb, "parameters": params})
                return transport.request(server.url, env)

            resp = cmd("open_session", partition_id="p-top", user="shifter")
            assert resp.kind is wire.Kind.ACK
            sid = resp.body["session"]["id"]

            resp = cmd("control", session_id=sid, control_verb="initialize")
            assert resp.body["report"]["state"] == "Halted"

            env = wire.make_envelope(wire.Kind.QUERY, "console", "smr",
                                     {"subject": "fsm"})
            fsm = transport.request(server.url, env).body
            assert {"state": "Halted", "verb": "configure", "target": "Configured"} in fsm["table"]

            env = wire.make_envelope(wire.Kind.QUERY, "console", "smr",
                                     {"subject": "sessions"})
            sessions = transport.request(server.url, env).body["sessions"]
            assert [s["id"] for s in sessions] == [sid]

            env = wire.make_envelope(wire.Kind.EVENT, "solver", "smr",
                                     {"rule_id": "r1", "action": {"kind": "notify"},
                                      "evidence": [1, 2]})
            transport.push(server.url, env)
            env = wire.make_envelope(wire.Kind.QUERY, "console", "smr",
                                     {"subject": "proposals"})
            proposals = transport.request(server.url, env).body["proposals"]
            assert proposals[0]["rule_id"] == "r1"

            resp = cmd("close_session", session_id=sid)
            assert resp.kind is wire.Kind.ACK
        rs.close()
