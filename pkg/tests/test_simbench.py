"""Simulated-node and harness tests (the full demonstrators run in the
acceptance suite)."""

import csv
import os

import pytest

from runctl import transport, wire
from runctl.control import FunctionManager, Strategy
from runctl.errors import IllegalTransition
from runctl.model import FsmCommand, FsmState
from runctl.registry import RegistryClient, RegistryServer
from runctl.simbench import (
    BenchResult,
    FailMode,
    bench_fanout,
    linear_fit_r2,
    spawn_nodes,
    write_csv,
    write_gnuplot,
)


class TestSimNode:
    def test_honors_transition_table(self):
        pool = spawn_nodes(1)
        try:
            url = pool.nodes[0].url
            env = wire.make_envelope(wire.Kind.COMMAND, "t", "node",
                                     wire.command_to_body(FsmCommand("initialize")))
            resp = transport.request(url, env)
            assert resp.body["state"] == "Halted"
            env = wire.make_envelope(wire.Kind.COMMAND, "t", "node",
                                     wire.command_to_body(FsmCommand("start")))
            resp = transport.request(url, env)
            assert resp.kind is wire.Kind.ERROR
            assert resp.body["code"] == "IllegalTransition"
            assert pool.nodes[0].node.state is FsmState.HALTED
        finally:
            pool.close()

    def test_spawn_many_distinct_endpoints(self):
        pool = spawn_nodes(120)
        try:
            urls = {sn.url for sn in pool.nodes}
            assert len(urls) == 120
            for sn in (pool.nodes[0], pool.nodes[59], pool.nodes[119]):
                env = wire.make_envelope(wire.Kind.QUERY, "t", sn.node.id,
                                         {"subject": "state"})
                assert transport.request(sn.url, env).body["state"] == "Initial"
        finally:
            pool.close()

    def test_fail_set(self):
        pool = spawn_nodes(10, fail=(3,), drop_hold=0.5)
        try:
            assert pool.nodes[3].node.fail_mode is FailMode.DROP
            fm = FunctionManager("fm", "p", pool.child_refs(),
                                 strategy=Strategy.BOUNDED_PARALLEL, timeout=0.25)
            result = fm.fanout(FsmCommand("initialize"))
            assert result.failed == {"node-003"}
            assert len(result.states) == 9
        finally:
            pool.close()

    def test_registration_in_registry(self):
        with RegistryServer() as registry:
            pool = spawn_nodes(3, registry_url=registry.url)
            try:
                records = RegistryClient(registry.url, source="t").lookup("sim-node")
                assert [r.instance_id for r in records] == ["node-000", "node-001", "node-002"]
            finally:
                pool.close()

    def test_spawn_rejects_zero(self):
        with pytest.raises(ValueError):
            spawn_nodes(0)


class TestBenchFanout:
    def test_sequential_matches_analytic_model(self):
        """With a 10 ms node delay, sequential elapsed is n * delay within 20%."""
        results = bench_fanout([20], [Strategy.SEQUENTIAL], repetitions=5,
                               command_delay=0.010)
        median = results[0].median
        assert 20 * 0.010 * 0.8 <= median <= 20 * 0.010 * 1.2

    def test_single_node_strategies_within_noise(self):
        results = bench_fanout([1], list(Strategy), repetitions=5, command_delay=0.010)
        medians = {r.parameters["strategy"]: r.median for r in results}
        assert len(medians) == 3
        # 2x of each other at the degenerate point (hierarchy pays one extra hop)
        assert max(medians.values()) <= 2 * min(medians.values()) + 0.05

    def test_validation_catches_faulty_runs(self):
        pool = spawn_nodes(3, fail=(1,), drop_hold=0.5)
        pool.close()
        # a pool with a failing node loses every sample and must raise
        from runctl.errors import RcmsError
        from runctl import simbench
        real_spawn = simbench.spawn_nodes
        try:
            simbench.spawn_nodes = lambda n, **kw: real_spawn(n, fail=(1,), drop_hold=0.3, **kw)
            with pytest.raises(RcmsError):
                simbench.bench_fanout([3], [Strategy.BOUNDED_PARALLEL],
                                      repetitions=5, command_delay=0.0, timeout=0.2)
        finally:
            simbench.spawn_nodes = real_spawn


class TestResultsAndCsv:
    def test_bench_result_needs_five_samples(self):
        with pytest.raises(ValueError):
            BenchResult("x", {}, [1.0, 2.0])

    def test_summary(self):
        r = BenchResult("x", {"n": 1}, [5.0, 1.0, 3.0, 2.0, 4.0])
        assert r.summary["median"] == 3.0
        assert r.summary["p90"] == 5.0

    def test_csv_schema_deterministic(self, tmp_path):
        results = [
            BenchResult("fanout", {"n": 10, "strategy": "sequential"}, [0.1] * 5),
            BenchResult("fanout", {"n": 10, "strategy": "hierarchical"}, [0.05] * 5),
        ]
        path = str(tmp_path / "out.csv")
        write_csv(results, path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["experiment", "n", "strategy", "samples", "median", "p90"]
        assert len(rows) == 3
        assert rows[1][:3] == ["fanout", "10", "sequential"]

    def test_gnuplot_companion(self, tmp_path):
        results = [BenchResult("fanout", {"n": 10, "strategy": "sequential"}, [0.1] * 5)]
        path = str(tmp_path / "out.csv")
        write_csv(results, path)
        gp = write_gnuplot(results, path, x_column="n", series_column="strategy")
        assert os.path.exists(gp)
        assert "plot" in open(gp).read()

    def test_linear_fit(self):
        assert linear_fit_r2([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
        assert linear_fit_r2([1, 2, 3, 4], [10, 35, 12, 40]) < 0.7
