import pytest

from skelmgr.errors import UnknownRule
from skelmgr.rules import (
    Abort,
    Action,
    ActionKind,
    EngineState,
    Execute,
    FactStore,
    Idle,
    Phase,
    Plan,
    Propose,
    Rule,
    apply_local,
    control_cycle,
    evaluate,
    lower_priority,
    select,
)


def always(_):
    return True


def test_canonical_order_priority_then_name():
    rules = [Rule("b", 5, always), Rule("a", 5, always), Rule("c", 7, always), Rule("d", 1, lambda f: False)]
    assert [r.name for r in evaluate(rules, FactStore())] == ["c", "a", "b"]
    assert select([]) is None


def test_missing_fact_makes_precondition_false():
    r = Rule("x", 1, lambda f: f["absent"] > 0)
    assert evaluate([r], FactStore()) == []


def test_lower_priority_floor_and_unknown():
    rules = [Rule("r", 1, always)]
    once = lower_priority(rules, "r")
    assert once[0].priority == 0
    assert lower_priority(once, "r")[0].priority == 0
    with pytest.raises(UnknownRule):
        lower_priority(rules, "nope")


def test_rule_guards():
    with pytest.raises(ValueError):
        Rule("neg", -1, always)
    with pytest.raises(ValueError):
        Rule("p2", 1, always, phase=Phase.PH2)


def _engine():
    ph1 = Rule("inc^PH1", 5, lambda f: f["load"] > 1, Plan((Action.of(ActionKind.FIND_NEW_RESOURCE),)),
               Phase.PH1, proposes=Plan((Action.of(ActionKind.ALLOCATE_NEW_WORKER),)))
    ok = Rule("inc^PH2", 5, lambda f: f["ackFromAll"], Plan((Action.of(ActionKind.ALLOCATE_NEW_WORKER),)),
              Phase.PH2, tag="inc^PH1")
    nack = Rule("inc^PH2/nack", 5, lambda f: f["nackConsensus"],
                Plan((Action.of(ActionKind.LOWER_PRIORITY, rule="inc^PH1"),)), Phase.PH2, tag="inc^PH1")
    dec = Rule("dec", 3, lambda f: f["load"] < 0.5, Plan((Action.of(ActionKind.REMOVE_WORKER),)))
    return EngineState.fresh([ph1, ok, nack, dec])


def test_control_cycle_phases():
    st = _engine()
    assert isinstance(control_cycle(st, FactStore(load=1.0)), Idle)
    out = control_cycle(st, FactStore(load=2.0))
    assert isinstance(out, Propose) and out.plan.actions[0].kind is ActionKind.ALLOCATE_NEW_WORKER
    assert isinstance(control_cycle(st, FactStore(load=0.1)), Execute)
    waiting = st.awaiting("D1", "inc^PH1")
    # PH2 rules only see facts of their own decision
    assert isinstance(control_cycle(waiting, FactStore(decision="D0", ackFromAll=True)), Idle)
    assert isinstance(control_cycle(waiting, FactStore(decision="D1", ackFromAll=True, nackConsensus=False)), Execute)
    abort = control_cycle(waiting, FactStore(decision="D1", ackFromAll=False, nackConsensus=True))
    assert isinstance(abort, Abort)
    lowered = apply_local(waiting, abort.plan.actions)
    assert lowered.rule("inc^PH1").priority == 4
    assert lowered.reset_priorities().rule("inc^PH1").priority == 5


def test_pending_state_blocks_ph1_and_plain():
    st = _engine().awaiting("D1", "inc^PH1")
    assert isinstance(control_cycle(st, FactStore(load=2.0)), Idle)


def test_actions_are_hashable_and_serialisable():
    a = Action.of(ActionKind.LOWER_PRIORITY, rule="x")
    assert hash(a) == hash(Action.of(ActionKind.LOWER_PRIORITY, rule="x"))
    assert a.to_json() == {"kind": "lowerPriority", "rule": "x"}
    assert str(a) == "lowerPriority(rule=x)"
