import itertools
import threading

import pytest

from skelmgr.consensus import (
    ACK,
    NACK,
    Abort,
    AbortReason,
    Commit,
    Concern,
    ConsensusResponse,
    Decision,
    Interference,
    classify,
    merge_substitutes,
    need,
    resolve,
)
from skelmgr.graph import GraphDelta, NodeKind, NodeRecord
from skelmgr.rules import Action, ActionKind

F = Action.of(ActionKind.FIND_NEW_RESOURCE)
F_FRUGAL = Action.of(ActionKind.FIND_NEW_RESOURCE, policy="frugal")
A = Action.of(ActionKind.ALLOCATE_NEW_WORKER)
C = Action.of(ActionKind.CONNECT_WORKER)
C_SSL = Action.of(ActionKind.CONNECT_SSL_WORKER)

BASE = (F, A, C)
SEC = (F, A, C_SSL)
POW_OK = (F_FRUGAL, A, C)  # touches a different action than SEC
POW_CLASH = (F, A, Action.of(ActionKind.CONNECT_WORKER, lane="slow"))  # rewrites the same action
MERGED = (F_FRUGAL, A, C_SSL)

ALPHABET = {"ack": ACK, "nack": NACK, "sec": need("security"), "pow": need("power")}


def decision(power_plan):
    return Decision("D1", Concern.PERFORMANCE, GraphDelta(1), "r1", BASE,
                    {"security": SEC, "power": power_plan})


def oracle(names, power_plan):
    """Case table written out by hand, independent of the implementation."""
    if "nack" in names:
        return Abort(AbortReason.ANY_NACK)
    props = {n for n in names if n in ("sec", "pow")}
    if not props:
        return Commit(BASE)
    if props == {"sec"}:
        return Commit(SEC)
    if props == {"pow"}:
        return Commit(power_plan)
    if power_plan is POW_OK:
        return Commit(MERGED)
    return Abort(AbortReason.INCONSISTENT_SUBSTITUTES)


RESPONDERS = [Concern.SECURITY, Concern.POWER, Concern.PERFORMANCE]


@pytest.mark.parametrize("power_plan", [POW_OK, POW_CLASH], ids=["consistent", "clashing"])
def test_outcome_table_all_response_sequences_up_to_three(power_plan):
    checked = 0
    for size in range(4):
        for names in itertools.product(sorted(ALPHABET), repeat=size):
            responses = [ConsensusResponse(RESPONDERS[i], ALPHABET[n]) for i, n in enumerate(names)]
            assert resolve(decision(power_plan), responses) == oracle(names, power_plan), names
            checked += 1
    assert checked == 1 + 4 + 16 + 64


def test_missing_substitute_aborts():
    d = Decision("D1", Concern.PERFORMANCE, GraphDelta(1), None, BASE, {})
    out = resolve(d, [ConsensusResponse(Concern.SECURITY, need("security"))])
    assert out == Abort(AbortReason.ANY_NACK)


def test_merge_handles_insertions_and_identical_edits():
    extra = Action.of(ActionKind.ANSWER, verdict="x")
    assert merge_substitutes(BASE, [SEC, SEC]) == SEC
    assert merge_substitutes(BASE, [(F, A, C, extra), SEC]) == (F, A, C_SSL, extra)
    assert merge_substitutes(BASE, [SEC, POW_CLASH]) is None


def _decision_adding(secure):
    rec = NodeRecord(NodeKind.WORKER, "w", "/1/w5", "n_e", 4.0, {"location": "r9", "secure": secure})
    return Decision("D1", Concern.PERFORMANCE, GraphDelta(1, added_nodes={"n_w5": rec}), "r9", BASE)


def test_classify_follows_active_concerns():
    everyone = {Concern.PERFORMANCE, Concern.SECURITY, Concern.POWER}
    d = _decision_adding(False)
    assert classify(F, everyone, None, d) is Interference.INDEPENDENT
    assert classify(A, everyone, None, d) is Interference.INTERFERING
    assert classify(C, everyone, None, d) is Interference.INTERFERING
    assert classify(C_SSL, everyone, None, d) is Interference.INTERFERING
    assert classify(C, everyone, None, _decision_adding(True)) is Interference.INDEPENDENT
    assert classify(A, {Concern.PERFORMANCE}, None, d) is Interference.INDEPENDENT
    assert classify(Action.of(ActionKind.REMOVE_WORKER), everyone, None, d) is Interference.INDEPENDENT
    # the proposer's own concern never makes its actions interfering
    own = Decision("D1", Concern.POWER, d.proposed_delta, "r9", BASE)
    assert classify(A, {Concern.POWER}, None, own) is Interference.INDEPENDENT


def test_propose_requires_lock_and_fresh_version(tmp_path):
    from skelmgr.errors import StaleDecision
    from skelmgr.managers import MinThroughput, SecureData, initialize
    from skelmgr.consensus import Coordinator
    from skelmgr.sim import SimConfig, WorkloadPhase, World
    from conftest import case_pipeline, mixed_pool

    pool = mixed_pool(8, 8)
    g, managers = initialize([SecureData(), MinThroughput(1.0)], case_pipeline(), pool)
    world = World(g, pool, [WorkloadPhase(10, 1.0)], SimConfig())
    coord = Coordinator(g, managers, world)
    d = Decision("D9", Concern.PERFORMANCE, GraphDelta(g.version), None, ())
    with pytest.raises(RuntimeError):
        coord.propose(d)
    with coord.lock:
        assert [r.verdict for r in coord.propose(d)] == [ACK]
        with pytest.raises(StaleDecision):
            coord.propose(Decision("D10", Concern.PERFORMANCE, GraphDelta(g.version - 1), None, ()))
    assert isinstance(coord.lock, type(threading.Lock()))
