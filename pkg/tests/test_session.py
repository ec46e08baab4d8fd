from skelmgr.graph import ApplicationGraph, ChannelKind, GraphDelta, apply_delta
from skelmgr.scenario import Scenario
from skelmgr.session import run_scenario, verdict_from_trace

from conftest import SCENARIOS


def mgmt(trace, ev):
    return [r for r in trace if r["src"] == "mgmt" and r["ev"] == ev]


def test_trusted_rich_pool_starts_fully_trusted_then_adds_ssl_workers():
    scenario = Scenario.load(SCENARIOS / "hotspot_secure_trusted8.json")
    pool = {r.id: r for r in scenario.pool}
    result = run_scenario(scenario)
    commits = mgmt(result.trace, "commit")
    initial = apply_delta(ApplicationGraph(), GraphDelta.from_json(commits[0]["detail"]["delta"]))
    assert all(pool[rec.meta["location"]].trusted for rec in initial.nodes.values())
    assert all(rec.meta["channelKind"] is ChannelKind.PLAIN for rec in initial.arcs.values())
    assert all(c["detail"]["rule"] == "Farm_inc^PH2/ssl" for c in commits[1:])
    assert result.verdict["converged"]


def test_trace_wide_manager_invariants():
    for name in ("hotspot_secure.json", "nack_fairness.json", "hotspot_cooldown.json"):
        scenario = Scenario.load(SCENARIOS / name)
        result = run_scenario(scenario)
        trace = result.trace
        first = scenario.contracts[0].concern.value
        assert not [p for p in mgmt(trace, "propose") if p["by"] == "Security"]
        for c in mgmt(trace, "commit"):
            if c["t"] == 0:
                assert c["by"] == first
        # every needProperty names something the proposer advertises
        for r in mgmt(trace, "response"):
            if r["detail"]["verdict"].startswith("needProperty"):
                assert r["detail"]["verdict"] == "needProperty(security)"
        # resource exclusivity and monotone versions across all commits
        graph = ApplicationGraph()
        for c in mgmt(trace, "commit"):
            graph = apply_delta(graph, GraphDelta.from_json(c["detail"]["delta"]))
            locations = [rec.meta["location"] for rec in graph.nodes.values()]
            assert len(locations) == len(set(locations))
        assert graph.dumps() == result.graph.dumps()
        assert verdict_from_trace(trace) == result.verdict


def test_verdict_needs_three_stable_ticks():
    header = {"src": "mgmt", "ev": "header", "detail": {"contracts": [{"kind": "minThroughput", "rate": 1.0}]}}

    def mon(x):
        return {"src": "mgmt", "ev": "monitor", "detail": {"throughput": x}}

    v = verdict_from_trace([header, mon(0.5), mon(1.0), mon(1.0)])
    assert not v["converged"] and v["ticks_to_converge"] is None
    v = verdict_from_trace([header, mon(0.5), mon(1.0), mon(1.0), mon(1.2)])
    assert v["converged"] and v["ticks_to_converge"] == 4 and v["final_throughput"] == 1.2


def test_precedence_follows_contract_order():
    scenario = Scenario.load(SCENARIOS / "nack_fairness.json")
    responses = mgmt(run_scenario(scenario).trace, "response")
    assert {r["by"] for r in responses} == {"Power"}
