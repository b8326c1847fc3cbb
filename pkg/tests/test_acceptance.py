"""Acceptance criteria, one test per criterion, printed pass/fail lines.

Run with `pytest tests/test_acceptance.py -v -s`. These are ordinal/shape
assertions plus exact property suites; absolute milliseconds from other
hardware are recorded for reference, never gated.
"""

import random
import threading
import time

import pytest
from scipy.stats import spearmanr

from runctl.control import FunctionManager, Strategy
from runctl.errors import ContentionConflict
from runctl.ims import ImsCore
from runctl.model import (
    FsmCommand,
    FsmState,
    FsmVerb,
    LogMessage,
    Partition,
    Resource,
    ResourceKind,
    Severity,
    Subscription,
    effective_resources,
    fsm_transition,
)
from runctl.resource_service import ResourceService
from runctl.simbench import (
    FailMode,
    bench_fanout,
    bench_ims,
    bench_registry,
    build_two_level,
    linear_fit_r2,
    spawn_nodes,
)
from runctl.solver import RuleEngine
from runctl.storage import QueryCriteria

PASS = "[ACCEPTANCE] {}: PASS"


# ---------------------------------------------------------------------------
# Fan-out ordering (the tree-hierarchy demonstrator)

@pytest.mark.slow
def test_fanout_ordering_and_monotonicity():
    started = time.monotonic()
    n_list = list(range(10, 121, 10))
    results = bench_fanout(n_list, list(Strategy), repetitions=5)
    runtime = time.monotonic() - started

    medians = {(r.parameters["n"], r.parameters["strategy"]): r.median for r in results}
    seq = medians[(120, "sequential")]
    bounded = medians[(120, "bounded_parallel")]
    hier = medians[(120, "hierarchical")]

    # strict ordering with >= 25% gaps at N=120
    assert hier < bounded < seq
    assert hier <= 0.75 * bounded, f"hierarchical gap too small: {hier:.3f} vs {bounded:.3f}"
    assert bounded <= 0.75 * seq, f"bounded gap too small: {bounded:.3f} vs {seq:.3f}"

    # sequential grows monotonically in N (Spearman over the sweep)
    seq_curve = [medians[(n, "sequential")] for n in n_list]
    rho, _ = spearmanr(n_list, seq_curve)
    assert rho > 0.9, f"sequential Spearman rho {rho:.3f}"

    assert runtime < 300, f"fan-out demonstrator took {runtime:.0f}s (budget 5 min)"
    print(f"\n  N=120 medians: hierarchical={hier * 1000:.0f}ms "
          f"bounded={bounded * 1000:.0f}ms sequential={seq * 1000:.0f}ms "
          f"(historical reference: ~100ms two-level on a 128-node cluster; recorded, not gated)")
    print(PASS.format("fan-out ordering (hierarchy < bounded < sequential)"))


# ---------------------------------------------------------------------------
# Strategy equivalence on randomized fault cases

@pytest.mark.slow
def test_strategy_equivalence_50_cases():
    pool = spawn_nodes(12, drop_hold=0.7)
    rnd = random.Random(50_50)
    try:
        for case in range(50):
            n = rnd.randint(2, 12)
            start_state, verb = rnd.choice([
                (FsmState.INITIAL, "initialize"),
                (FsmState.HALTED, "configure"),
                (FsmState.CONFIGURED, "start"),
                (FsmState.RUNNING, "pause"),
                (FsmState.PAUSED, "resume"),
                (FsmState.INITIAL, "start"),   # illegal everywhere
            ])
            mode = rnd.choice([FailMode.ERROR, FailMode.DROP])
            faults = rnd.sample(range(n), rnd.randint(0, min(2, n - 1)))

            def arm():
                pool.set_states(start_state, n)
                for sn in pool.nodes:
                    sn.node.fail_mode = FailMode.NONE
                for i in faults:
                    pool.nodes[i].node.fail_mode = mode
                return pool.child_refs(n)

            multisets = []
            for strategy in (Strategy.SEQUENTIAL, Strategy.BOUNDED_PARALLEL):
                fm = FunctionManager("fm", "p", arm(), strategy=strategy,
                                     worker_limit=8, timeout=0.25)
                try:
                    multisets.append(fm.fanout(FsmCommand(verb)).state_multiset())
                finally:
                    fm.close()
            root, servers = build_two_level(arm(), timeout=0.25)
            try:
                root.timeout = 3.0
                multisets.append(root.fanout(FsmCommand(verb)).state_multiset())
            finally:
                root.close()
                for s in servers:
                    s.stop()
            assert multisets[0] == multisets[1] == multisets[2], \
                f"case {case}: {multisets}"
    finally:
        pool.close()
    print("\n" + PASS.format("strategy equivalence (50 randomized cases)"))


# ---------------------------------------------------------------------------
# IMS instance scaling over a shared store

@pytest.mark.slow
def test_ims_scaling_and_conservation():
    results = bench_ims([1, 2, 3, 4], publishers=16, subscribers=0)
    medians = {r.parameters["k"]: r.median for r in results}
    for r in results:
        # conservation is enforced inside the bench; re-assert the bookkeeping
        assert r.parameters["stored_total"] >= r.parameters["acked_total"]
    for k in (2, 3, 4):
        assert medians[k] >= medians[k - 1], \
            f"throughput dropped: k={k} {medians[k]:.0f} < k={k-1} {medians[k-1]:.0f}"
    assert medians[4] >= 1.5 * medians[1], \
        f"k=4 {medians[4]:.0f} not >= 1.5x k=1 {medians[1]:.0f}"
    print(f"\n  stored msgs/s: " + " ".join(f"k={k}:{medians[k]:.0f}" for k in (1, 2, 3, 4))
          + " (historical reference: 200-300 single, ~900 at 4 instances)")
    print(PASS.format("ims instance scaling (non-decreasing, >=1.5x) + conservation"))


# ---------------------------------------------------------------------------
# Subscriber overhead

@pytest.mark.slow
def test_subscriber_overhead():
    base = bench_ims([1], publishers=16, subscribers=0)[0]
    loaded = bench_ims([1], publishers=16, subscribers=8)[0]
    ratio = loaded.median / base.median
    assert ratio <= 0.9, f"8 subscribers only reduced throughput to {ratio:.2f} of baseline"
    print(f"\n  s=0: {base.median:.0f} msg/s, s=8: {loaded.median:.0f} msg/s, "
          f"factor {1 / ratio:.2f} (historical reference: a factor of two)")
    print(PASS.format("subscriber overhead (>=10% reduction with 8 subscribers)"))


# ---------------------------------------------------------------------------
# Registry-discovered service scaling

@pytest.mark.slow
def test_registry_scaling_linear():
    results = bench_registry([1, 2, 3, 4], clients=15, duration=3.0, windows=5)
    ks = [r.parameters["k"] for r in results]
    medians = [r.median for r in results]
    for a, b in zip(medians, medians[1:]):
        assert b > a, f"throughput must strictly increase: {medians}"
    r2 = linear_fit_r2(ks, medians)
    assert r2 >= 0.9, f"linear fit R^2 {r2:.3f}"
    print(f"\n  msgs/s by k: {[f'{m:.0f}' for m in medians]}, R^2={r2:.4f}")
    print(PASS.format("registry scaling (strictly increasing, R^2>=0.9)"))


# ---------------------------------------------------------------------------
# Correctness oracles

def test_correctness_oracles():
    # state machine: exhaustive 48-pair check against an independent literal
    from tests.test_model import NON_MIXED, ORACLE_ROWS
    from runctl.errors import IllegalTransition
    checked = 0
    for state in NON_MIXED:
        for verb in FsmVerb:
            expected = ORACLE_ROWS.get((state.value, verb.value))
            if expected is None:
                with pytest.raises(IllegalTransition):
                    fsm_transition(state, FsmCommand(verb.value))
            else:
                assert fsm_transition(state, FsmCommand(verb.value)).value == expected
            checked += 1
    assert checked == 48

    # partition resource sets vs an independent flat traversal on 200 forests
    from tests.test_model import flat_traversal_oracle, random_forest
    rnd = random.Random(200)
    forests = 0
    while forests < 200:
        store = random_forest(rnd, rnd.randint(1, 60))
        pid = rnd.choice(sorted(store))
        assert effective_resources(store[pid], store) == flat_traversal_oracle(pid, store)
        forests += 1

    # catalog queries vs brute-force scan on a 5000-message random store
    from tests.test_ims import brute_filter, random_criteria, random_message
    core = ImsCore()
    for _ in range(5000):
        core.publish(random_message(rnd))
    everything = core.query(QueryCriteria())
    assert len(everything) == 5000
    for _ in range(40):
        criteria = random_criteria(rnd)
        assert core.query(criteria) == brute_filter(everything, criteria)

    # solver replay vs the offline sliding-window oracle on a 10k stream
    from tests.test_solver import notify_rule, offline_oracle, stored
    t = 0.0
    stream = []
    for i in range(10_000):
        t += rnd.uniform(0.05, 2.0)
        stream.append(stored(i + 1, source=f"node-{rnd.randint(0, 9)}",
                             msg_type=rnd.choice(["alarm", "status", "crash"]),
                             severity=rnd.choice(list(Severity)), dt=t))
    rules = [notify_rule("burst", threshold=4, window=15.0, cooldown=60.0,
                         min_severity=Severity.ERROR),
             notify_rule("chatter", threshold=6, window=30.0, source_pattern="node-3")]
    engine = RuleEngine(rules)
    online = []
    for s in stream:
        online += engine.ingest(s)
    assert online == offline_oracle(stream, rules)
    assert online, "stream must trip rules for the check to mean anything"

    # exclusive-resource stress: 50 concurrent allocations, exactly 1 winner
    rs = ResourceService(prober=lambda uri: True)
    rs.register_resource(Resource(id="gold", kind=ResourceKind.HARDWARE,
                                  uri="http://h/gold", exclusive=True))
    rs.define_partition(Partition(id="p", resource_ids={"gold"}))
    outcomes = []
    lock = threading.Lock()
    barrier = threading.Barrier(50)

    def contender(i):
        barrier.wait()
        try:
            rs.allocate("p", f"sess-{i}")
            verdict = "won"
        except ContentionConflict:
            verdict = "conflict"
        with lock:
            outcomes.append(verdict)

    threads = [threading.Thread(target=contender, args=(i,)) for i in range(50)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert outcomes.count("won") == 1 and outcomes.count("conflict") == 49
    rs.close()

    print("\n" + PASS.format("correctness oracles (fsm/partitions/queries/solver/contention)"))


# ---------------------------------------------------------------------------
# Delivery contract under fault injection

def test_delivery_contract_under_faults():
    from tests.test_ims import CountingReceiver
    receiver = CountingReceiver()
    try:
        core = ImsCore(retry_attempts=3, retry_backoff=0.05)
        core.subscribe(Subscription(id="s1", callback_url=receiver.url,
                                    msg_types={"t"}))
        published = []
        rnd = random.Random(7)
        for i in range(60):
            if rnd.random() < 0.25:
                receiver.up = not receiver.up
            published.append(core.publish(LogMessage("n", "t", Severity.INFO,
                                                     payload=str(i))))
            time.sleep(0.01)
        receiver.up = True
        core.publish(LogMessage("n", "t", Severity.INFO, payload="final"))
        deadline = time.monotonic() + 15
        while time.monotonic() < deadline:
            seqs = receiver.event_seqs()
            if seqs and seqs[-1] >= published[-1]:
                break
            time.sleep(0.05)

        seqs = receiver.event_seqs()
        assert seqs == sorted(seqs), "received seqs must be an increasing subsequence"
        assert len(seqs) == len(set(seqs))
        stored = {m.seq for m in core.query(QueryCriteria())}
        assert set(seqs) <= stored, "store-before-forward violated"
        core.close()
    finally:
        receiver.stop()
    print("\n" + PASS.format("delivery contract (in-order, store-before-forward)"))


# ---------------------------------------------------------------------------
# Job control restart accounting and orphan hygiene

def test_jobctl_restart_and_no_orphans(tmp_path):
    from runctl.jobctl import JobManager, JobSpec, JobState, RestartPolicy
    from tests.test_jobctl import pid_alive, wait_for

    mgr = JobManager(poll_interval=0.05)  # default 1s restart backoff
    marker = tmp_path / "attempts"
    mgr.start(JobSpec(id="flappy", command=("sh", "-c", f"echo x >> {marker}; exit 1"),
                      restart=RestartPolicy.retries(2)))
    assert wait_for(lambda: mgr.status("flappy").state is JobState.FAILED, timeout=15)
    final = mgr.status("flappy")
    assert final.restarts_used == 2
    assert marker.read_text().count("x") == 3, "exactly 3 attempts"

    mgr.start(JobSpec(id="s1", command=("sleep", "30")))
    mgr.start(JobSpec(id="s2", command=("sh", "-c", "sleep 30 & sleep 30")))
    time.sleep(0.3)
    pids = mgr.live_pids()
    assert len(pids) == 2
    mgr.shutdown(grace=0.3)
    assert wait_for(lambda: all(not pid_alive(p) for p in pids), timeout=5)
    assert mgr.live_pids() == []
    print("\n" + PASS.format("jobctl (3 attempts with on_failure(2); no orphans)"))
