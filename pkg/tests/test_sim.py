import pytest

from skelmgr.errors import NoFreeResource, RemoveLastWorker, UnplacedNode
from skelmgr.graph import ChannelKind, Farm, Pipeline, Seq, apply_delta, expand, set_meta
from skelmgr.rules import Action, ActionKind
from skelmgr.sim import Resource, SimConfig, WorkloadPhase, World, place


def placed(expr, pool, channel=None):
    g = expand(expr)
    g = place(g, dict(zip(g.topological_order(), [r.id for r in pool])), {r.id: r for r in pool})
    if channel:
        for arc in g.arcs:
            g = set_meta(g, arc, "channelKind", channel)
    return g


def pool_of(n, **kw):
    return [Resource(f"r{i:02d}", **kw) for i in range(n)]


def test_rate_matched_single_stage():
    pool = pool_of(1)
    w = World(placed(Seq("s", 1.0), pool), pool, [WorkloadPhase(10, 1.0)], SimConfig())
    w.step(10.5)
    assert w.completed == 10
    snap = w.monitor(10.5)
    assert snap.throughput == pytest.approx(1.0, abs=0.1) and snap.farm is None


def test_no_arrivals():
    pool = pool_of(1)
    w = World(placed(Seq("s", 1.0), pool), pool, [WorkloadPhase(20, 0.0)], SimConfig())
    w.step(20)
    snap = w.monitor(20)
    assert w.completed == 0 and snap.T_arr is None and snap.throughput == 0


def steady_throughput(k, arrival, service=4.0, channel=None, speed=1.0, run=400.0):
    pool = pool_of(k + 2, speed=speed)
    w = World(placed(Farm(Seq("w", service), k), pool, channel), pool,
              [WorkloadPhase(run, arrival)], SimConfig(window=10))
    w.step(100)
    done0 = w.completed
    w.step(run)
    return (w.completed - done0) / (run - 100), w.completed


@pytest.mark.parametrize("k", [1, 2, 4])
def test_saturated_farm_throughput_oracle(k):
    rate, total = steady_throughput(k, 5.0, run=1000.0)
    assert total >= 200
    assert rate == pytest.approx(k / 4, rel=0.05)


def test_unsaturated_farm_follows_arrivals():
    rate, _ = steady_throughput(4, 0.5, run=600)
    assert rate == pytest.approx(0.5, rel=0.05)


def test_ssl_overhead_slows_saturated_farm():
    plain, _ = steady_throughput(4, 5.0, run=1000)
    ssl, _ = steady_throughput(4, 5.0, channel="Ssl", run=1000)
    assert ssl == pytest.approx(plain / 1.1, rel=0.05) and ssl < plain


def test_monitor_sees_hot_spot():
    pool = pool_of(6)
    w = World(placed(Farm(Seq("w", 0.1), 4), pool), pool,
              [WorkloadPhase(30, 1.0), WorkloadPhase(30, 2.0)], SimConfig())
    w.step(30)
    before = w.monitor(30).T_arr
    w.step(45)
    assert w.monitor(45).T_arr == pytest.approx(before / 2, rel=0.1)
    with pytest.raises(ValueError):
        w.monitor(5)


def test_conservation_and_round_robin():
    pool = pool_of(6)
    w = World(placed(Farm(Seq("w", 4.0), 4), pool), pool, [WorkloadPhase(50, 2.0)], SimConfig())
    for t in range(1, 60):
        w.step(t)
        assert w.injected == w.completed + w.in_flight()
    dispatched = [e["node"] for e in w.trace if e["ev"] == "dispatch"][:8]
    assert dispatched == ["n_w1", "n_w2", "n_w3", "n_w4"] * 2


def test_actions_find_allocate_connect_remove():
    pool = [Resource("a", "trusted", speed=1.0), Resource("b", "untrusted", speed=2.0)] + pool_of(4)
    g = placed(Farm(Seq("w", 4.0), 2), pool[2:])
    w = World(g, pool, [WorkloadPhase(10, 1.0)], SimConfig())
    ctx = w.context()
    assert w.execute_action(Action.of(ActionKind.FIND_NEW_RESOURCE), ctx)["resource"] == "b"
    w.execute_action(Action.of(ActionKind.ALLOCATE_NEW_WORKER), ctx)
    w.execute_action(Action.of(ActionKind.CONNECT_SSL_WORKER), ctx)
    assert ctx.working.arcs[("n_e", "n_w3")].meta["channelKind"] is ChannelKind.SSL
    g2 = apply_delta(g, __import__("skelmgr.graph", fromlist=["diff"]).diff(ctx.base, ctx.working))
    w.adopt(g2)
    ctx = w.context()
    w.stage([Action.of(ActionKind.FIND_NEW_RESOURCE)], ctx)
    assert ctx.resource == "a"
    assert w.execute_action(Action.of(ActionKind.REMOVE_WORKER), w.context())["node"] == "n_w1"


def test_failures():
    pool = pool_of(3)
    g = placed(Farm(Seq("w", 1.0), 1), pool)
    w = World(g, pool, [WorkloadPhase(10, 1.0)], SimConfig())
    with pytest.raises(NoFreeResource):
        w.execute_action(Action.of(ActionKind.FIND_NEW_RESOURCE), w.context())
    with pytest.raises(RemoveLastWorker):
        w.execute_action(Action.of(ActionKind.REMOVE_WORKER), w.context())
    with pytest.raises(UnplacedNode):
        World(expand(Seq("s", 1.0)), pool, [WorkloadPhase(10, 1.0)], SimConfig())


def test_removal_redispatches_in_flight_work():
    pool = pool_of(6)
    g = placed(Farm(Seq("w", 4.0), 3), pool)
    w = World(g, pool, [WorkloadPhase(20, 2.0)], SimConfig())
    w.step(10)
    ctx = w.context()
    delta = w.stage([Action.of(ActionKind.REMOVE_WORKER)], ctx)
    w.adopt(apply_delta(g, delta))
    assert w.injected == w.completed + w.in_flight()
    w.step(200)
    assert w.completed == w.injected == 40


def test_determinism_with_jitter():
    def run(seed):
        pool = pool_of(6)
        w = World(placed(Farm(Seq("w", 1.0), 4), pool), pool, [WorkloadPhase(50, 2.0, jitter=True)],
                  SimConfig(seed=seed))
        w.step(60)
        return w.trace
    assert run(1) == run(1)
    assert run(1) != run(2)
