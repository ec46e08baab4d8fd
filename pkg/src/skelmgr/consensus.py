"""Two-phase consensus between concern managers.

Phase one broadcasts a proposed decision (the graph delta it would cause and
the recruited resource) to every other active manager and gathers exactly one
answer from each: ACK, NACK or needProperty(p).  Phase two resolves the
answers into an outcome, lets the proposer's PH2 rules react, and either
commits the final plan atomically or aborts with the graph untouched.

The coordinator serialises decisions with a single lock, so at most one
decision is in flight system-wide.  In SM mode a super manager (AM0) owns the
shared graph, relays the proposal and answers and applies committed deltas;
in CM mode the proposer talks to its peers directly and applies the delta
itself while holding the lock.  Both produce the same committed-decision log.
"""

from __future__ import annotations

import difflib
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum

from .errors import ActionFailure, MissingSubstitute, StaleDecision, WouldMalform
from .graph import ApplicationGraph, GraphDelta, apply_delta
from .rules import (
    Abort as AbortCycle,
    Action,
    ActionKind,
    Execute,
    FactStore,
    Idle,
    Propose,
    plan_json,
)

log = logging.getLogger(__name__)


class Concern(str, Enum):
    PERFORMANCE = "Performance"
    SECURITY = "Security"
    POWER = "Power"


class CoordinationMode(str, Enum):
    SM = "sm"
    CM = "cm"


class Interference(str, Enum):
    INDEPENDENT = "independent"
    INTERFERING = "interfering"


@dataclass(frozen=True)
class Verdict:
    kind: str  # "ack", "nack" or "needProperty"
    prop: str | None = None

    def __str__(self) -> str:
        if self.kind == "needProperty":
            return f"needProperty({self.prop})"
        return self.kind.upper()


ACK = Verdict("ack")
NACK = Verdict("nack")


def need(prop: str) -> Verdict:
    return Verdict("needProperty", prop)


@dataclass(frozen=True)
class ConsensusResponse:
    responder: Concern
    verdict: Verdict


@dataclass(frozen=True)
class Decision:
    id: str
    proposer: Concern
    proposed_delta: GraphDelta
    recruited_resource: str | None
    base_plan: tuple
    substitutes: dict = field(default_factory=dict)
    rule: str = ""  # tag of the PH1 rule that opened the round
    farm: str | None = None


class AbortReason(str, Enum):
    ANY_NACK = "AnyNack"
    INCONSISTENT_SUBSTITUTES = "InconsistentSubstitutes"
    ACTION_FAILURE = "ActionFailure"
    DECLINED = "Declined"


@dataclass(frozen=True)
class Commit:
    final_plan: tuple


@dataclass(frozen=True)
class Abort:
    reason: AbortReason


ConsensusOutcome = Commit | Abort


# ---------------------------------------------------------------------------
# classification

def _recruited_secure(graph: ApplicationGraph | None, decision: Decision) -> bool:
    rid = decision.recruited_resource
    if rid is None:
        return False
    for rec in decision.proposed_delta.added_nodes.values():
        if rec.meta.get("location") == rid:
            return rec.meta.get("secure") is True
    if graph is not None:
        for rec in graph.nodes.values():
            if rec.meta.get("location") == rid:
                return rec.meta.get("secure") is True
    return False


def classify(action: Action, active_concerns, graph: ApplicationGraph | None,
             decision: Decision) -> Interference:
    others = set(active_concerns) - {decision.proposer}
    kind = action.kind
    if kind in (ActionKind.CONNECT_WORKER, ActionKind.CONNECT_SSL_WORKER):
        if Concern.SECURITY in others and not _recruited_secure(graph, decision):
            return Interference.INTERFERING
    elif kind is ActionKind.ALLOCATE_NEW_WORKER:
        if Concern.POWER in others:
            return Interference.INTERFERING
    return Interference.INDEPENDENT


# ---------------------------------------------------------------------------
# outcome resolution

def _edits(base: tuple, substitute: tuple) -> list[tuple]:
    """(start, end, replacement) spans turning ``base`` into ``substitute``."""
    matcher = difflib.SequenceMatcher(a=base, b=substitute, autojunk=False)
    return [(i1, i2, tuple(substitute[j1:j2]))
            for tag, i1, i2, j1, j2 in matcher.get_opcodes() if tag != "equal"]


def _clash(a: tuple, b: tuple) -> bool:
    (a1, a2, _), (b1, b2, _) = a, b
    if (a1, a2) == (b1, b2):
        return a != b
    if a1 == a2 and b1 == b2:
        return False  # insertions at different points
    if a1 == a2:
        return b1 < a1 < b2
    if b1 == b2:
        return a1 < b1 < a2
    return a1 < b2 and b1 < a2


def merge_substitutes(base: tuple, substitutes: list[tuple]) -> tuple | None:
    """Compose several substitute plans over ``base``.

    Every substitute is reduced to the spans of ``base`` it replaces.  The
    composition exists only if spans touched by more than one substitute are
    replaced identically; otherwise None is returned.
    """
    accepted: list[tuple] = []
    for sub in substitutes:
        for edit in _edits(base, sub):
            if any(_clash(edit, other) for other in accepted):
                return None
            if edit not in accepted:
                accepted.append(edit)
    merged = list(base)
    for i1, i2, repl in sorted(accepted, key=lambda e: (e[0], e[1]), reverse=True):
        merged[i1:i2] = repl
    return tuple(merged)


def resolve(decision: Decision, responses) -> ConsensusOutcome:
    """Map the answers of phase one to Commit(plan) or Abort(reason).

    All ACK (or nobody to ask) commits the base plan; any NACK aborts; a
    single distinct needProperty(p) commits ``substitutes[p]``; several
    distinct properties commit the merged substitutes when they are
    consistent and abort otherwise.  Substitutes are merged in the order the
    requests arrived, i.e. contract order.
    """
    verdicts = [r.verdict for r in responses]
    if any(v.kind == "nack" for v in verdicts):
        return Abort(AbortReason.ANY_NACK)
    props: list[str] = []
    for v in verdicts:
        if v.kind == "needProperty" and v.prop not in props:
            props.append(v.prop)
    if not props:
        return Commit(tuple(decision.base_plan))
    missing = [p for p in props if p not in decision.substitutes]
    if missing:
        log.warning("decision %s: %s", decision.id,
                    MissingSubstitute(f"no substitute plan for {missing}"))
        return Abort(AbortReason.ANY_NACK)
    if len(props) == 1:
        return Commit(tuple(decision.substitutes[props[0]]))
    merged = merge_substitutes(tuple(decision.base_plan),
                               [tuple(decision.substitutes[p]) for p in props])
    if merged is None:
        return Abort(AbortReason.INCONSISTENT_SUBSTITUTES)
    return Commit(merged)


# ---------------------------------------------------------------------------
# protocol runner

@dataclass(frozen=True)
class CommitRecord:
    decision: str
    proposer: str
    final_plan: tuple
    delta: dict
    base_version: int


@dataclass(frozen=True)
class AuditEntry:
    decision: str
    before: str
    after: str
    committed: bool


class SuperManager:
    """AM0: owner of the shared graph in SM mode."""

    name = "AM0"

    def __init__(self, graph: ApplicationGraph):
        self.graph = graph


class Coordinator:
    def __init__(self, graph: ApplicationGraph, managers, world, mode=CoordinationMode.SM,
                 trace: list | None = None):
        self.mode = CoordinationMode(mode)
        self.managers = list(managers)  # contract order
        self.world = world
        self.trace = trace if trace is not None else []
        self.lock = threading.Lock()
        self.super_manager = SuperManager(graph) if self.mode is CoordinationMode.SM else None
        self._graph = graph
        self.committed: list[CommitRecord] = []
        self.audit: list[AuditEntry] = []
        self.applied_by: list[str] = []
        self._next_id = 1

    # the shared graph lives with AM0 in SM mode
    @property
    def graph(self) -> ApplicationGraph:
        return self.super_manager.graph if self.super_manager else self._graph

    @graph.setter
    def graph(self, value: ApplicationGraph) -> None:
        if self.super_manager:
            self.super_manager.graph = value
        else:
            self._graph = value

    @property
    def active_concerns(self) -> set:
        return {m.concern for m in self.managers}

    def _emit(self, ev: str, decision: str | None, by, detail: dict) -> None:
        by = by.value if isinstance(by, Enum) else by
        self.trace.append({"t": self.world.now, "src": "mgmt", "ev": ev, "decision": decision,
                           "by": by, "detail": detail})

    def _relay(self, decision: str, detail: dict) -> None:
        if self.mode is CoordinationMode.SM:
            self._emit("relay", decision, SuperManager.name, detail)

    def _new_id(self) -> str:
        ident = f"D{self._next_id}"
        self._next_id += 1
        return ident

    # -- one manager turn ----------------------------------------------------

    def handle(self, manager, facts: FactStore):
        """Run one control cycle of ``manager`` and carry out its outcome."""
        outcome = manager.cycle(facts)
        if isinstance(outcome, Idle):
            return outcome
        self._emit("fire", None, manager.concern,
                   {"rule": outcome.rule.name, "phase": outcome.rule.phase.value,
                    "outcome": type(outcome).__name__.lower()})
        if isinstance(outcome, Propose):
            self.run_proposal(manager, outcome)
        elif isinstance(outcome, Execute):
            self.run_plain(manager, outcome)
        return outcome

    def _prepare(self, manager, rule_name: str, plan) -> tuple[Decision | None, str]:
        ident = self._new_id()
        ctx = self.world.context(prefer_green=Concern.POWER in self.active_concerns)
        try:
            delta = self.world.stage(plan.actions, ctx)
        except ActionFailure as exc:
            self._emit("abort", ident, manager.concern,
                       {"rule": rule_name, "reason": AbortReason.ACTION_FAILURE.value,
                        "error": str(exc)})
            return None, ident
        decision = Decision(ident, manager.concern, delta, ctx.resource, tuple(plan.actions),
                            dict(plan.substitutes), rule_name, ctx.farm)
        return decision, ident

    def run_proposal(self, manager, proposal: Propose) -> ConsensusOutcome:
        with self.lock:
            before = self.graph.dumps()
            decision, ident = self._prepare(manager, proposal.rule.name, proposal.plan)
            if decision is None:
                outcome: ConsensusOutcome = Abort(AbortReason.ACTION_FAILURE)
                responses: list = []
                self._conclude_abort(manager, ident, proposal.rule.name, [], outcome)
            else:
                responses = self.propose(decision)
                outcome = resolve(decision, responses)
                outcome = self._phase_two(manager, decision, responses, outcome)
            self.audit.append(AuditEntry(ident, before, self.graph.dumps(),
                                         isinstance(outcome, Commit)))
            return outcome

    def _phase_two(self, manager, decision, responses, outcome):
        reaction = manager.after_consensus(decision, responses, outcome)
        rule = getattr(reaction, "rule", None)
        if rule is not None:
            self._emit("fire", None, manager.concern,
                       {"rule": rule.name, "phase": rule.phase.value,
                        "outcome": type(reaction).__name__.lower()})
        if isinstance(outcome, Commit) and isinstance(reaction, Execute):
            if self.commit(outcome, decision, rule.name if rule else None) is not None:
                manager.committed()
                return outcome
            outcome = Abort(AbortReason.ACTION_FAILURE)
            reaction = manager.after_consensus(decision, responses, outcome)
            rule = getattr(reaction, "rule", None)
        elif isinstance(outcome, Commit):
            outcome = Abort(AbortReason.DECLINED)
        self._conclude_abort(manager, decision.id, rule.name if rule else None,
                             responses, outcome, reaction)
        return outcome

    def _conclude_abort(self, manager, ident, rule_name, responses, outcome, reaction=None):
        if reaction is None:
            reaction = manager.after_consensus(
                Decision(ident, manager.concern, GraphDelta(self.graph.version), None, ()),
                responses, outcome, tag=rule_name)
            rule_name = getattr(getattr(reaction, "rule", None), "name", rule_name)
        detail = {"reason": outcome.reason.value, "rule": rule_name}
        if isinstance(reaction, AbortCycle):
            detail["actions"] = plan_json(reaction.plan.actions)
            detail["priorities"] = manager.priorities()
        self._emit("abort", ident, manager.concern, detail)

    def run_plain(self, manager, execute: Execute) -> ConsensusOutcome:
        """Plain rules: independent plans commit directly, others go through consensus."""
        with self.lock:
            before = self.graph.dumps()
            decision, ident = self._prepare(manager, execute.rule.name, execute.plan)
            if decision is None:
                outcome: ConsensusOutcome = Abort(AbortReason.ACTION_FAILURE)
            else:
                labels = [classify(a, self.active_concerns, self.graph, decision)
                          for a in decision.base_plan]
                if all(lab is Interference.INDEPENDENT for lab in labels):
                    outcome = Commit(decision.base_plan)
                else:
                    outcome = resolve(decision, self.propose(decision))
                if isinstance(outcome, Commit):
                    if self.commit(outcome, decision, execute.rule.name) is None:
                        outcome = Abort(AbortReason.ACTION_FAILURE)
                    else:
                        manager.committed()
                if isinstance(outcome, Abort):
                    self._emit("abort", ident, manager.concern,
                               {"reason": outcome.reason.value, "rule": execute.rule.name})
            self.audit.append(AuditEntry(ident, before, self.graph.dumps(),
                                         isinstance(outcome, Commit)))
            return outcome

    # -- protocol steps ------------------------------------------------------

    def propose(self, decision: Decision) -> list[ConsensusResponse]:
        if not self.lock.locked():
            raise RuntimeError("propose called without the decision lock")
        if decision.proposed_delta.base_version != self.graph.version:
            raise StaleDecision(f"{decision.id} built on version "
                                f"{decision.proposed_delta.base_version}, graph at {self.graph.version}")
        proposer = self._manager(decision.proposer)
        labels = [classify(a, self.active_concerns, self.graph, decision).value
                  for a in decision.base_plan]
        self._emit("propose", decision.id, decision.proposer, {
            "rule": decision.rule,
            "plan": plan_json(decision.base_plan),
            "labels": labels,
            "resource": decision.recruited_resource,
            "delta": decision.proposed_delta.to_json(),
        })
        responses = []
        for m in self.managers:
            if m.concern == decision.proposer:
                continue
            self._relay(decision.id, {"to": m.concern.value, "what": "proposal"})
            verdict = m.respond(decision, proposer.registry)
            if verdict.kind == "needProperty" and verdict.prop not in proposer.registry:
                log.warning("%s asked for unadvertised property %r; counted as NACK",
                            m.concern.value, verdict.prop)
                verdict = NACK
            responses.append(ConsensusResponse(m.concern, verdict))
            self._emit("response", decision.id, m.concern, {"verdict": str(verdict)})
        self._relay(decision.id, {"to": decision.proposer.value, "what": "responses",
                                  "verdicts": [str(r.verdict) for r in responses]})
        return responses

    def commit(self, outcome: Commit, decision: Decision, rule: str | None = None):
        """Execute the final plan and publish its delta; None if it cannot run."""
        ctx = self.world.context(farm=decision.farm,
                                 prefer_green=Concern.POWER in self.active_concerns)
        ctx.resource = decision.recruited_resource
        try:
            delta = self.world.stage(outcome.final_plan, ctx)
            new_graph = apply_delta(self.graph, delta)
        except (ActionFailure, WouldMalform) as exc:
            log.info("decision %s failed during commit: %s", decision.id, exc)
            return None
        self._relay(decision.id, {"to": "all", "what": "execute", "plan": plan_json(outcome.final_plan)})
        self.graph = new_graph
        self.applied_by.append(SuperManager.name if self.super_manager else decision.proposer.value)
        self.world.adopt(new_graph)
        for m in self.managers:
            m.notify(delta)
        record = CommitRecord(decision.id, decision.proposer.value, tuple(outcome.final_plan),
                              delta.to_json(), delta.base_version)
        self.committed.append(record)
        self._emit("commit", decision.id, decision.proposer, {
            "rule": rule,
            "plan": plan_json(outcome.final_plan),
            "base_version": delta.base_version,
            "version": new_graph.version,
            "effects": ctx.effects,
            "delta": record.delta,
        })
        return delta

    def _manager(self, concern: Concern):
        for m in self.managers:
            if m.concern == concern:
                return m
        raise KeyError(concern)
