"""Priority-ordered precondition -> plan rules and the manager control cycle.

A manager's rule base is a list of ``Rule`` values.  ``evaluate`` finds the
rules whose precondition holds against a ``FactStore``; ``select`` picks the
first one in canonical order (priority descending, then name ascending).
``control_cycle`` performs one monitor/analyse/plan step and returns exactly
one ``CycleOutcome``.

Rules come in three phases.  ``PLAIN`` rules execute their plan directly.
A ``PH1`` rule opens a consensus round for the plan in ``Rule.proposes``; the
``PH2`` rules tagged with the PH1 rule's name consume the consensus facts and
either accept a (base or substitute) plan or handle the refusal.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable

from .errors import UnknownRule


class Phase(str, Enum):
    PLAIN = "Plain"
    PH1 = "PH1"
    PH2 = "PH2"


class ActionKind(str, Enum):
    FIND_NEW_RESOURCE = "findNewResource"
    ASK_CONSENSUS = "askConsensus"
    ALLOCATE_NEW_WORKER = "allocateNewWorker"
    CONNECT_WORKER = "connectWorker"
    CONNECT_SSL_WORKER = "connectSslWorker"
    REMOVE_WORKER = "removeWorker"
    ANSWER = "answer"
    LOWER_PRIORITY = "lowerPriority"


def _jsonable(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (int, float, str, bool)) or value is None:
        return value
    return str(value)


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    args: tuple = ()  # sorted (name, value) pairs; keeps actions hashable

    @classmethod
    def of(cls, kind: ActionKind, **args) -> "Action":
        return cls(kind, tuple(sorted(args.items())))

    def arg(self, name: str, default=None):
        return dict(self.args).get(name, default)

    def to_json(self) -> dict:
        doc = {"kind": self.kind.value}
        doc.update((k, _jsonable(v)) for k, v in self.args)
        return doc

    def __str__(self) -> str:
        if not self.args:
            return self.kind.value
        inner = ", ".join(f"{k}={v}" for k, v in self.args)
        return f"{self.kind.value}({inner})"


@dataclass(frozen=True)
class Plan:
    actions: tuple = ()
    substitutes: dict = field(default_factory=dict)  # property name -> full replacement plan

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "substitutes",
                           {k: tuple(v) for k, v in self.substitutes.items()})

    def to_json(self) -> dict:
        return {
            "actions": [a.to_json() for a in self.actions],
            "substitutes": {k: [a.to_json() for a in v] for k, v in sorted(self.substitutes.items())},
        }


def plan_json(actions) -> list:
    return [a.to_json() for a in actions]


class MissingFact(KeyError):
    pass


class FactStore(dict):
    """Variable name -> value.  Reading an absent variable raises MissingFact,
    which ``evaluate`` turns into a false precondition."""

    def __missing__(self, key):
        raise MissingFact(key)


@dataclass(frozen=True)
class Rule:
    name: str
    priority: int
    precondition: Callable[[FactStore], bool] = field(compare=False)
    plan: Plan = Plan()
    phase: Phase = Phase.PLAIN
    tag: str | None = None  # PH2 only: name of the PH1 rule whose answers it consumes
    proposes: Plan | None = None  # PH1 only: the plan submitted for consensus

    def __post_init__(self):
        if self.priority < 0:
            raise ValueError(f"rule {self.name}: priority must be >= 0")
        if self.phase is Phase.PH2 and not self.tag:
            raise ValueError(f"PH2 rule {self.name} needs the tag of its PH1 rule")

    def holds(self, facts: FactStore) -> bool:
        try:
            return bool(self.precondition(facts))
        except MissingFact:
            return False


def canonical_key(rule: Rule):
    return (-rule.priority, rule.name)


def evaluate(rules, facts: FactStore) -> list[Rule]:
    return sorted((r for r in rules if r.holds(facts)), key=canonical_key)


def select(fireable: list[Rule]) -> Rule | None:
    return fireable[0] if fireable else None


def lower_priority(rules, name: str, floor: int = 0) -> list[Rule]:
    if not any(r.name == name for r in rules):
        raise UnknownRule(name)
    return [replace(r, priority=max(floor, r.priority - 1)) if r.name == name else r
            for r in rules]


@dataclass
class Knobs:
    hysteresis_factor: float = 1.5
    priorities: dict = field(default_factory=dict)  # rule name -> initial priority
    max_greedy: bool = False
    default_degree: int = 4
    priority_floor: int = 0
    frugal_alternative: bool = False

    def priority(self, name: str, default: int = 5) -> int:
        return int(self.priorities.get(name, default))


# ---------------------------------------------------------------------------
# control cycle

@dataclass(frozen=True)
class Pending:
    decision: str
    tag: str


@dataclass(frozen=True)
class EngineState:
    rules: tuple
    initial_priorities: dict
    pending: Pending | None = None
    floor: int = 0

    @classmethod
    def fresh(cls, rules, floor: int = 0) -> "EngineState":
        rules = tuple(rules)
        names = [r.name for r in rules]
        if len(set(names)) != len(names):
            raise ValueError("rule names must be unique")
        return cls(rules, {r.name: r.priority for r in rules}, None, floor)

    def rule(self, name: str) -> Rule:
        for r in self.rules:
            if r.name == name:
                return r
        raise UnknownRule(name)

    def lowered(self, name: str) -> "EngineState":
        return replace(self, rules=tuple(lower_priority(self.rules, name, self.floor)))

    def reset_priorities(self) -> "EngineState":
        return replace(self, rules=tuple(replace(r, priority=self.initial_priorities[r.name])
                                         for r in self.rules))

    def awaiting(self, decision: str, tag: str) -> "EngineState":
        return replace(self, pending=Pending(decision, tag))

    def settled(self) -> "EngineState":
        return replace(self, pending=None)


@dataclass(frozen=True)
class Idle:
    pass


@dataclass(frozen=True)
class Propose:
    rule: Rule
    plan: Plan


@dataclass(frozen=True)
class Execute:
    rule: Rule
    plan: Plan


@dataclass(frozen=True)
class Abort:
    rule: Rule
    plan: Plan


CycleOutcome = Idle | Propose | Execute | Abort

LOCAL_ACTIONS = {ActionKind.LOWER_PRIORITY}


def eligible(state: EngineState, facts: FactStore) -> list[Rule]:
    if state.pending is None:
        return [r for r in state.rules if r.phase is not Phase.PH2]
    if facts.get("decision") != state.pending.decision:
        return []
    return [r for r in state.rules if r.phase is Phase.PH2 and r.tag == state.pending.tag]


def control_cycle(state: EngineState, facts: FactStore) -> CycleOutcome:
    rule = select(evaluate(eligible(state, facts), facts))
    if rule is None:
        return Idle()
    if rule.phase is Phase.PH1:
        return Propose(rule, rule.proposes or rule.plan)
    if rule.phase is Phase.PH2 and all(a.kind in LOCAL_ACTIONS for a in rule.plan.actions):
        return Abort(rule, rule.plan)
    return Execute(rule, rule.plan)


def apply_local(state: EngineState, actions) -> EngineState:
    """Run the manager-local actions of a plan (priority lowering)."""
    for action in actions:
        if action.kind is ActionKind.LOWER_PRIORITY:
            state = state.lowered(action.arg("rule"))
    return state
