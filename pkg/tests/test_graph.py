import json

import pytest

from skelmgr.errors import (
    KeyClassMismatch,
    MalformedSkeleton,
    MetadataTypeError,
    StaleDelta,
    UnknownTarget,
    WouldMalform,
)
from skelmgr.graph import (
    ApplicationGraph,
    ChannelKind,
    Farm,
    GraphDelta,
    MetaChange,
    NodeKind,
    Pipeline,
    Seq,
    annotate,
    apply_delta,
    content_equal,
    diff,
    expand,
    node_id,
    validate,
)

from conftest import case_pipeline


def test_case_pipeline_expands_to_eight_nodes():
    g = expand(case_pipeline())
    assert sorted(g.nodes) == ["n_c", "n_e", "n_s1", "n_s3", "n_w1", "n_w2", "n_w3", "n_w4"]
    assert len(g.arcs) == 10
    assert g.topological_order()[0] == "n_s1"
    assert g.topological_order()[-1] == "n_s3"
    assert g.workers("n_e") == ["n_w1", "n_w2", "n_w3", "n_w4"]
    assert g.collector_of("n_e") == "n_c"
    assert g.nodes["n_w3"].kind is NodeKind.WORKER
    assert validate(g).ok


def test_explicit_degree_and_default_degree():
    assert len(expand(Farm(Seq("w", 1.0), 2)).nodes) == 4
    assert len(expand(Farm(Seq("w", 1.0)), default_degree=3).nodes) == 5


def test_single_seq():
    g = expand(Seq("only", 1.0))
    assert list(g.nodes) == ["n_only"] and not g.arcs


def test_nested_farm_ids_keep_replica_indices():
    g = expand(Farm(Pipeline([Seq("a", 1.0), Seq("b", 1.0)]), 2))
    assert {"n_a1", "n_b1", "n_a2", "n_b2"} <= set(g.nodes)
    assert validate(g).ok


@pytest.mark.parametrize("bad", [
    Pipeline([Seq("s", 1.0)]),
    Farm(Seq("w", 1.0), 0),
    Seq("bad label", 1.0),
    Pipeline([Seq("x", 1.0), Seq("x", 1.0)]),
])
def test_malformed_skeletons(bad):
    with pytest.raises(MalformedSkeleton):
        expand(bad)


def test_node_id_uses_replica_path():
    assert node_id("w", "/1/w3") == "n_w3"
    assert node_id("s1", "/0") == "n_s1"


def test_annotate_bumps_version_and_checks_keys():
    g = expand(case_pipeline())
    g2 = annotate(g, "n_w1", "location", "r1")
    assert g2.version == g.version + 1 and g2.meta("n_w1")["location"] == "r1"
    g3 = annotate(g2, ("n_e", "n_w1"), "channelKind", "Ssl")
    assert g3.arcs[("n_e", "n_w1")].meta["channelKind"] is ChannelKind.SSL
    with pytest.raises(KeyClassMismatch):
        annotate(g, "n_w1", "channelKind", "Ssl")
    with pytest.raises(KeyClassMismatch):
        annotate(g, ("n_e", "n_w1"), "secure", True)
    with pytest.raises(MetadataTypeError):
        annotate(g, "n_w1", "secure", "yes")
    with pytest.raises(UnknownTarget):
        annotate(g, "n_zz", "location", "r1")
    assert annotate(g, "n_w1", "ext.anything", [1, 2]).meta("n_w1")["ext.anything"] == [1, 2]


def test_diff_apply_round_trip_and_stale():
    g = expand(case_pipeline())
    h = expand(case_pipeline(5))
    h = annotate(h, "n_w5", "location", "r9")
    d = diff(g, h)
    assert set(d.added_nodes) == {"n_w5"}
    assert set(d.added_arcs) == {("n_e", "n_w5"), ("n_w5", "n_c")}
    out = apply_delta(g, d)
    assert content_equal(out, h) and out.version == g.version + 1
    with pytest.raises(StaleDelta):
        apply_delta(out, d)


def test_apply_rejects_conflicts_and_malformed_results():
    g = expand(case_pipeline())
    with pytest.raises(WouldMalform):
        apply_delta(g, GraphDelta(g.version, removed_arcs={("n_e", "n_w1"): g.arcs[("n_e", "n_w1")]}))
    with pytest.raises(WouldMalform):
        apply_delta(g, GraphDelta(g.version, metadata_changes=(MetaChange("n_w1", "location", "r7", "r8"),)))
    with pytest.raises(WouldMalform):
        apply_delta(g, GraphDelta(g.version, added_nodes={"n_w1": g.nodes["n_w1"]}))


def test_empty_delta_still_bumps_version():
    g = expand(case_pipeline())
    assert apply_delta(g, GraphDelta(g.version)).version == g.version + 1


def test_ssl_between_secure_nodes_is_only_a_lint():
    g = expand(case_pipeline())
    for n in ("n_e", "n_w1"):
        g = annotate(g, n, "secure", True)
    g = annotate(g, ("n_e", "n_w1"), "channelKind", "Ssl")
    rep = validate(g)
    assert rep.ok and rep.lints


def test_validate_catches_cycle_and_broken_farm():
    g = expand(case_pipeline())
    arcs = dict(g.arcs)
    arcs[("n_s3", "n_s1")] = arcs[("n_s1", "n_e")]
    assert not validate(ApplicationGraph(g.nodes, arcs, 0)).ok
    arcs = dict(g.arcs)
    del arcs[("n_w2", "n_c")]
    assert not validate(ApplicationGraph(g.nodes, arcs, 0)).ok


def test_json_round_trip():
    g = annotate(expand(case_pipeline()), ("n_w1", "n_c"), "channelKind", "Ssl")
    doc = json.loads(g.dumps())
    back = ApplicationGraph.from_json(doc)
    assert content_equal(back, g) and back.version == g.version
    d = diff(expand(case_pipeline()), g)
    assert GraphDelta.from_json(json.loads(json.dumps(d.to_json()))) == d
