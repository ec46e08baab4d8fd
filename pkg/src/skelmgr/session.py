"""One managed run: initial configuration, then simulation and management ticks.

``Session.run`` returns a ``RunResult`` holding the merged trace (simulation
and management records, ordered by time), the per-tick metrics rows, the
committed-decision log and the verdict.  The verdict is recomputed from the
trace alone by ``verdict_from_trace``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .consensus import Coordinator, CoordinationMode
from .graph import ApplicationGraph, GraphDelta, apply_delta, diff, unsecured_arcs
from .managers import MinThroughput, PowerBudget, SecureData, initialize
from .scenario import Scenario
from .sim import SimConfig, World

STABLE_TICKS = 3


@dataclass
class RunResult:
    trace: list
    metrics: list
    committed: list
    graph: ApplicationGraph
    verdict: dict
    audit: list = field(default_factory=list)
    applied_by: list = field(default_factory=list)

    def trace_lines(self) -> list[str]:
        return [dumps_record(r) for r in self.trace]


def dumps_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def contract_json(c) -> dict:
    if isinstance(c, MinThroughput):
        return {"kind": c.kind, "rate": c.rate}
    if isinstance(c, PowerBudget):
        return {"kind": c.kind, "budget": c.budget}
    return {"kind": c.kind}


class Session:
    def __init__(self, scenario: Scenario, seed: int | None = None, mode: str | None = None,
                 extra_managers=()):
        self.scenario = scenario
        cfg = scenario.sim
        if seed is not None:
            cfg = SimConfig(seed, cfg.tick, cfg.window, cfg.ssl_overhead, cfg.run_length)
        self.config = cfg
        self.mode = CoordinationMode(mode or scenario.mode)
        self.trace: list = []
        self.trace.append({"t": 0.0, "src": "mgmt", "ev": "header", "decision": None, "by": None,
                           "detail": {"seed": cfg.seed, "mode": self.mode.value,
                                      "contracts": [contract_json(c) for c in scenario.contracts]}})
        graph, managers = initialize(scenario.contracts, scenario.skeleton, scenario.pool,
                                     scenario.knobs)
        self.managers = managers + list(extra_managers)
        for m in extra_managers:
            m.view = graph
        init = diff(ApplicationGraph(), graph)
        self.trace.append({"t": 0.0, "src": "mgmt", "ev": "commit", "decision": "init",
                           "by": managers[0].concern.value,
                           "detail": {"rule": None, "plan": [], "base_version": 0, "version": graph.version,
                                      "delta": init.to_json()}})
        self.world = World(graph, scenario.pool, scenario.workload, cfg, self.trace)
        self.coordinator = Coordinator(graph, self.managers, self.world, self.mode, self.trace)
        self.metrics: list = []

    def ticks(self) -> list[float]:
        cfg = self.config
        out, k = [], 1
        while k * cfg.tick <= cfg.run_length + 1e-9:
            t = round(k * cfg.tick, 9)
            if t >= cfg.window - 1e-9:
                out.append(t)
            k += 1
        return out

    def tick(self, t: float) -> None:
        world = self.world
        world.step(t)
        snap = world.monitor(t)
        self.trace.append({"t": t, "src": "mgmt", "ev": "monitor", "decision": None, "by": None,
                           "detail": {"farm": snap.farm, "T_arr": snap.T_arr,
                                      "throughput": snap.throughput, "degree": world.degree(),
                                      "injected": world.injected, "completed": world.completed}})
        self.metrics.append({"time": t, "throughput": snap.throughput, "degree": world.degree(),
                             "ssl_arcs": world.ssl_arc_count(),
                             "power_committed": world.power_committed()})
        for m in self.managers:
            self.coordinator.handle(m, m.facts(snap))

    def run(self) -> RunResult:
        for t in self.ticks():
            self.tick(t)
        self.world.step(self.config.run_length)
        verdict = verdict_from_trace(self.trace)
        return RunResult(self.trace, self.metrics, self.coordinator.committed,
                         self.coordinator.graph, verdict, self.coordinator.audit,
                         self.coordinator.applied_by)


def run_scenario(scenario: Scenario, seed: int | None = None, mode: str | None = None) -> RunResult:
    return Session(scenario, seed, mode).run()


# ---------------------------------------------------------------------------
# verdict

def _satisfied(contract: dict, graph: ApplicationGraph, monitor: dict) -> bool:
    kind = contract["kind"]
    if kind == "minThroughput":
        return monitor["throughput"] >= contract["rate"] - 1e-9
    if kind == "secureData":
        return not unsecured_arcs(graph)
    if kind == "powerBudget":
        power = sum(rec.meta.get("ext.powerCost", 0.0) for rec in graph.nodes.values())
        return power <= contract["budget"] + 1e-9
    raise ValueError(f"unknown contract kind {kind}")


def verdict_from_trace(trace) -> dict:
    """Contract satisfaction per tick, judged only from trace records.

    The graph is rebuilt by replaying commit deltas; throughput comes from
    monitor records.  The run has converged when every contract holds on
    each of the last STABLE_TICKS (or more) consecutive ticks.
    """
    contracts, graph, rows = [], ApplicationGraph(), []
    for rec in trace:
        if rec.get("src") != "mgmt":
            continue
        if rec["ev"] == "header":
            contracts = rec["detail"]["contracts"]
        elif rec["ev"] == "commit":
            graph = apply_delta(graph, GraphDelta.from_json(rec["detail"]["delta"]))
        elif rec["ev"] == "monitor":
            rows.append((rec["detail"]["throughput"],
                         {c["kind"]: _satisfied(c, graph, rec["detail"]) for c in contracts}))
    streak = 0
    for _, sat in reversed(rows):
        if not all(sat.values()):
            break
        streak += 1
    converged = streak >= STABLE_TICKS
    return {
        "converged": converged,
        "ticks_to_converge": len(rows) - streak + STABLE_TICKS if converged else None,
        "final_throughput": rows[-1][0] if rows else 0.0,
        "contracts_satisfied": rows[-1][1] if rows else {c["kind"]: False for c in contracts},
    }
