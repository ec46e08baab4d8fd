"""Per-concern autonomic managers and their rule bases.

Three concerns are supported: Performance (AM_P keeps the managed farm's
throughput above a contract rate by adding and removing workers), Security
(AM_S answers proposals so that data reaching untrusted nodes travels over
SSL) and Power (AM_W keeps the summed power cost of the resources in use
within a budget).  Managers are activated in contract order; the first one
builds the initial graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .consensus import ACK, NACK, Commit, Concern, Verdict, need
from .errors import DuplicateConcern, InsufficientResources, ScenarioError, SkelmgrError
from .graph import (
    ApplicationGraph,
    ChannelKind,
    Farm,
    GraphDelta,
    Pipeline,
    PowerClass,
    Seq,
    apply_delta,
    diff,
    expand,
    set_meta,
)
from .rules import (
    Abort as AbortCycle,
    Action,
    ActionKind,
    EngineState,
    Execute,
    FactStore,
    Knobs,
    Phase,
    Plan,
    Rule,
    apply_local,
    control_cycle,
)
from .sim import place

# tolerance for comparing rates that are equal by construction (e.g. 10/10)
EPS = 1e-9


@dataclass(frozen=True)
class SecureData:
    kind = "secureData"
    concern = Concern.SECURITY


@dataclass(frozen=True)
class MinThroughput:
    rate: float
    kind = "minThroughput"
    concern = Concern.PERFORMANCE

    def __post_init__(self):
        if not self.rate > 0:
            raise ScenarioError("minThroughput rate must be > 0")


@dataclass(frozen=True)
class PowerBudget:
    budget: float
    kind = "powerBudget"
    concern = Concern.POWER

    def __post_init__(self):
        if not self.budget > 0:
            raise ScenarioError("powerBudget budget must be > 0")


QoSContract = SecureData | MinThroughput | PowerBudget


# ---------------------------------------------------------------------------
# rule bases

F = Action.of(ActionKind.FIND_NEW_RESOURCE)
ASK = Action.of(ActionKind.ASK_CONSENSUS)
ALLOC = Action.of(ActionKind.ALLOCATE_NEW_WORKER)
CONNECT = Action.of(ActionKind.CONNECT_WORKER)
CONNECT_SSL = Action.of(ActionKind.CONNECT_SSL_WORKER)
REMOVE = Action.of(ActionKind.REMOVE_WORKER)


def answer(verdict: Verdict) -> Plan:
    return Plan((Action.of(ActionKind.ANSWER, verdict=verdict),))


def _increase_rules(name: str, find: Action, knobs: Knobs, demand, short) -> list[Rule]:
    ph1 = f"{name}^PH1"
    base = (find, ALLOC, CONNECT)
    return [
        Rule(ph1, knobs.priority(ph1), lambda f: demand(f) and short(f),
             Plan((find, ASK)), Phase.PH1,
             proposes=Plan(base, {"security": (find, ALLOC, CONNECT_SSL)})),
        Rule(f"{name}^PH2", knobs.priority(f"{name}^PH2"),
             lambda f: f["ackFromAll"] and not f["needProperty"],
             Plan(base), Phase.PH2, tag=ph1),
        Rule(f"{name}^PH2/ssl", knobs.priority(f"{name}^PH2/ssl"),
             lambda f: f["ackFromAll"] and "security" in f["needProperty"],
             Plan((find, ALLOC, CONNECT_SSL)), Phase.PH2, tag=ph1),
        Rule(f"{name}^PH2/nack", knobs.priority(f"{name}^PH2/nack"),
             lambda f: f["nackConsensus"],
             Plan((Action.of(ActionKind.LOWER_PRIORITY, rule=ph1),)), Phase.PH2, tag=ph1),
    ]


def build_performance_rules(contract: MinThroughput, knobs: Knobs | None = None) -> list[Rule]:
    knobs = knobs or Knobs()
    rate = contract.rate

    def demand(f):
        # the farm is offered at least the contracted rate
        return f["instanceof_farm"] and f["T_arr"] is not None and 1.0 / f["T_arr"] >= rate * (1 - EPS)

    def short(f):
        return f["Throughput"] < rate * (1 - EPS)

    def surplus(f):
        return f["instanceof_farm"] and f["Throughput"] >= knobs.hysteresis_factor * rate * (1 - EPS)

    rules = _increase_rules("Farm_inc", F, knobs, demand, short)
    rules.append(Rule("Farm_dec", knobs.priority("Farm_dec"), surplus, Plan((REMOVE,))))
    if knobs.frugal_alternative:
        frugal = Action.of(ActionKind.FIND_NEW_RESOURCE, policy="frugal")
        rules += _increase_rules("Farm_inc_frugal", frugal, knobs, demand, short)
    return rules


def _exposed(node: str, g: ApplicationGraph) -> bool:
    """An untrusted node with at least one arc not carried over SSL."""
    if g.nodes[node].meta.get("secure") is True:
        return False
    return any(g.arcs[a].meta.get("channelKind") is not ChannelKind.SSL
               for a in g.incident_arcs(node))


def build_security_rules(contract: SecureData | None = None, knobs: Knobs | None = None) -> list[Rule]:
    knobs = knobs or Knobs()

    def asked(f):
        return f["consensusAsked"] is not None

    def non_secure(f):
        return any(_exposed(n, f["G_proposed"]) for n in f["N"])

    return [
        Rule("Node_new/nonsecure", knobs.priority("Node_new/nonsecure"),
             lambda f: asked(f) and f["N"] and non_secure(f) and "security" in f["registry"],
             answer(need("security"))),
        Rule("Node_new/refuse", knobs.priority("Node_new/refuse"),
             lambda f: asked(f) and f["N"] and non_secure(f) and "security" not in f["registry"],
             answer(NACK)),
        Rule("Node_new/secure", knobs.priority("Node_new/secure"),
             lambda f: asked(f) and f["N"] and not non_secure(f), answer(ACK)),
        Rule("Node_none", knobs.priority("Node_none"),
             lambda f: asked(f) and not f["N"], answer(ACK)),
    ]


def committed_power(g: ApplicationGraph, pool: dict) -> float:
    return sum(pool[rec.meta["location"]].power_cost
               for rec in g.nodes.values() if rec.meta.get("location") in pool)


def build_power_rules(contract: PowerBudget, knobs: Knobs | None = None) -> list[Rule]:
    knobs = knobs or Knobs()
    budget = contract.budget

    def total(f):
        return committed_power(f["G_proposed"], f["pool"])

    return [
        Rule("Power_within_budget", knobs.priority("Power_within_budget"),
             lambda f: f["consensusAsked"] is not None and f["N"] and total(f) <= budget + EPS,
             answer(ACK)),
        Rule("Power_over_budget", knobs.priority("Power_over_budget"),
             lambda f: f["consensusAsked"] is not None and f["N"] and total(f) > budget + EPS,
             answer(NACK)),
        Rule("Power_no_growth", knobs.priority("Power_no_growth"),
             lambda f: f["consensusAsked"] is not None and not f["N"], answer(ACK)),
    ]


# ---------------------------------------------------------------------------
# managers

class Manager:
    """One concern's manager: private rule state plus a local graph view."""

    def __init__(self, concern: Concern, contract, rules, registry=frozenset(),
                 view: ApplicationGraph | None = None, pool: dict | None = None, floor: int = 0):
        self.concern = Concern(concern)
        self.contract = contract
        self.registry = frozenset(registry)
        self.state = EngineState.fresh(rules, floor)
        self.view = view if view is not None else ApplicationGraph()
        self.pool = pool or {}

    def __repr__(self) -> str:
        return f"Manager({self.concern.value})"

    def priorities(self) -> dict:
        return {r.name: r.priority for r in self.state.rules}

    def facts(self, snapshot) -> FactStore:
        facts = FactStore(
            instanceof_farm=snapshot.farm is not None,
            T_arr=snapshot.T_arr,
            Throughput=snapshot.throughput,
            now=snapshot.now,
        )
        if isinstance(self.contract, MinThroughput):
            facts["QoS_rate"] = self.contract.rate
        return facts

    def cycle(self, facts: FactStore):
        return control_cycle(self.state, facts)

    def respond(self, decision, proposer_registry) -> Verdict:
        """Answer a proposal by firing this manager's response rules."""
        try:
            proposed = apply_delta(self.view, decision.proposed_delta)
        except SkelmgrError:
            return NACK
        facts = FactStore(
            consensusAsked=decision.id,
            G_current=self.view,
            G_proposed=proposed,
            N=sorted(diff(self.view, proposed).added_nodes),
            registry=frozenset(proposer_registry),
            pool=self.pool,
        )
        outcome = control_cycle(self.state.settled(), facts)
        if isinstance(outcome, Execute):
            for action in outcome.plan.actions:
                if action.kind is ActionKind.ANSWER:
                    return action.arg("verdict")
        return ACK

    def after_consensus(self, decision, responses, outcome, tag: str | None = None):
        """PH2 cycle: consume the consensus facts for ``decision``."""
        state = self.state.awaiting(decision.id, tag or decision.rule)
        facts = FactStore(
            decision=decision.id,
            ackFromAll=isinstance(outcome, Commit),
            nackConsensus=not isinstance(outcome, Commit),
            needProperty=frozenset(r.verdict.prop for r in responses
                                   if r.verdict.kind == "needProperty"),
        )
        reaction = control_cycle(state, facts)
        if isinstance(reaction, AbortCycle):
            state = apply_local(state, reaction.plan.actions)
        self.state = state.settled()
        return reaction

    def committed(self) -> None:
        # a successful decision restores the fairness-lowered priorities
        self.state = self.state.reset_priorities()

    def notify(self, delta: GraphDelta) -> None:
        self.view = apply_delta(self.view, delta)


def make_manager(contract, knobs: Knobs, pool: dict) -> Manager:
    if isinstance(contract, MinThroughput):
        return Manager(Concern.PERFORMANCE, contract, build_performance_rules(contract, knobs),
                       {"security"}, pool=pool, floor=knobs.priority_floor)
    if isinstance(contract, SecureData):
        return Manager(Concern.SECURITY, contract, build_security_rules(contract, knobs),
                       pool=pool, floor=knobs.priority_floor)
    if isinstance(contract, PowerBudget):
        return Manager(Concern.POWER, contract, build_power_rules(contract, knobs),
                       pool=pool, floor=knobs.priority_floor)
    raise TypeError(f"unknown contract {contract!r}")


# ---------------------------------------------------------------------------
# initial configuration

def _size_farms(expr, rate: float, budget: int, greedy: bool):
    """Give default-degree farms a degree; returns (expr, budget left)."""
    if isinstance(expr, Seq):
        return expr, budget
    if isinstance(expr, Pipeline):
        stages = []
        for stage in expr.stages:
            stage, budget = _size_farms(stage, rate, budget, greedy)
            stages.append(stage)
        return Pipeline(stages), budget
    worker, budget = _size_farms(expr.worker, rate, budget, greedy)
    if expr.degree is not None or not isinstance(worker, Seq):
        return replace(expr, worker=worker), budget
    wanted = budget + 1 if greedy else max(1, math.ceil(rate * worker.service_time - EPS))
    degree = max(1, min(wanted, budget + 1))
    return replace(expr, worker=worker, degree=degree), budget - (degree - 1)


def initial_graph(first, expr, pool: dict, knobs: Knobs) -> ApplicationGraph:
    """Placed, annotated but unversioned initial graph built by ``first``'s manager."""
    resources = list(pool.values())
    if isinstance(first, MinThroughput):
        # farms at degree 1 fix the node count; the rest of the pool is headroom
        probe, _ = _size_farms(expr, 0.0, 0, False)
        spare = len(resources) - len(expand(probe).nodes)
        expr, _ = _size_farms(expr, first.rate, max(spare, 0), knobs.max_greedy)
        graph = expand(expr, knobs.default_degree)
        order = sorted(resources, key=lambda r: (-r.speed, r.id))
    elif isinstance(first, PowerBudget):
        graph = expand(expr, knobs.default_degree)
        order = sorted((r for r in resources if r.power_class is PowerClass.GREEN),
                       key=lambda r: (r.power_cost, -r.speed, r.id))
    else:
        graph = expand(expr, knobs.default_degree)
        order = sorted(resources, key=lambda r: (not r.trusted, -r.speed, r.id))
    nodes = graph.topological_order()
    if len(order) < len(nodes):
        raise InsufficientResources(f"{len(nodes)} nodes to place, {len(order)} usable resources")
    graph = place(graph, {n: r.id for n, r in zip(nodes, order)}, pool)
    for arc in sorted(graph.arcs):
        exposed = any(graph.nodes[n].meta["secure"] is not True for n in arc)
        channel = ChannelKind.SSL if isinstance(first, SecureData) and exposed else ChannelKind.PLAIN
        graph = set_meta(graph, arc, "channelKind", channel)
    return graph


def initialize(contracts, expr, pool, knobs: Knobs | None = None):
    """Activate one manager per contract; the first builds the initial graph.

    Returns ``(graph, managers)``.  The graph is at version 1: the initial
    configuration is committed as a delta against the empty graph.
    """
    knobs = knobs or Knobs()
    contracts = list(contracts)
    if not contracts:
        raise ScenarioError("at least one contract is required")
    pool = pool if isinstance(pool, dict) else {r.id: r for r in pool}
    if not pool:
        raise ScenarioError("the resource pool is empty")
    seen = set()
    for c in contracts:
        if c.concern in seen:
            raise DuplicateConcern(f"two contracts for {c.concern.value}")
        seen.add(c.concern)
    built = initial_graph(contracts[0], expr, pool, knobs)
    empty = ApplicationGraph()
    graph = apply_delta(empty, diff(empty, built))
    managers = [make_manager(c, knobs, pool) for c in contracts]
    for m in managers:
        m.view = graph
    return graph, managers


__all__ = [
    "Concern", "SecureData", "MinThroughput", "PowerBudget", "QoSContract", "Manager",
    "build_performance_rules", "build_security_rules", "build_power_rules", "committed_power",
    "initialize", "initial_graph", "make_manager",
]
