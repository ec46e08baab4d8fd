"""Skeleton compositions and the annotated application graph.

A skeleton expression (``Seq``, ``Pipeline``, ``Farm``) is expanded into an
``ApplicationGraph`` whose nodes are the parallel activities and whose arcs are
the channels between them.  Graphs are values: every mutation goes through
``apply_delta`` (or ``annotate``, which is a one-entry delta) and returns a new
graph with ``version`` bumped by one.
"""

from __future__ import annotations

import json
import re
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Union

from .errors import (
    KeyClassMismatch,
    MalformedSkeleton,
    MetadataTypeError,
    StaleDelta,
    UnknownTarget,
    WouldMalform,
)

DEFAULT_FARM_DEGREE = 4


class NodeKind(str, Enum):
    SEQ = "SeqStage"
    EMITTER = "Emitter"
    WORKER = "Worker"
    COLLECTOR = "Collector"


class ChannelKind(str, Enum):
    PLAIN = "Plain"
    SSL = "Ssl"


class PowerClass(str, Enum):
    GREEN = "Green"
    AMBER = "Amber"
    RED = "Red"


# ---------------------------------------------------------------------------
# skeleton expressions

@dataclass(frozen=True)
class Seq:
    label: str
    service_time: float  # seconds per task on a speed-1 resource


@dataclass(frozen=True)
class Pipeline:
    stages: tuple

    def __init__(self, stages: Iterable):
        object.__setattr__(self, "stages", tuple(stages))


@dataclass(frozen=True)
class Farm:
    worker: "SkeletonExpr"
    degree: int | None = None  # None means "use the configured default"
    label: str = ""


SkeletonExpr = Union[Seq, Pipeline, Farm]

_LABEL_RE = re.compile(r"^[A-Za-z0-9_]+$")


def check_skeleton(expr) -> None:
    """Raise MalformedSkeleton unless ``expr`` is a well-formed composition."""
    if isinstance(expr, Seq):
        if not _LABEL_RE.match(expr.label or ""):
            raise MalformedSkeleton(f"bad sequential label {expr.label!r}")
        if not expr.service_time >= 0:
            raise MalformedSkeleton(f"negative service time on {expr.label!r}")
    elif isinstance(expr, Pipeline):
        if len(expr.stages) < 2:
            raise MalformedSkeleton("a pipeline needs at least two stages")
        for stage in expr.stages:
            check_skeleton(stage)
    elif isinstance(expr, Farm):
        if expr.degree is not None and (not isinstance(expr.degree, int) or expr.degree < 1):
            raise MalformedSkeleton(f"farm degree must be >= 1, got {expr.degree!r}")
        if expr.label and not _LABEL_RE.match(expr.label):
            raise MalformedSkeleton(f"bad farm label {expr.label!r}")
        check_skeleton(expr.worker)
    else:
        raise MalformedSkeleton(f"not a skeleton expression: {expr!r}")


# ---------------------------------------------------------------------------
# metadata

NODE_KEYS = {"location", "secure", "powerClass", "procType"}
ARC_KEYS = {"channelKind"}
SHARED_KEYS = {"bandwidth"}
EXT_PREFIX = "ext."


def _coerce_meta(key: str, value: Any) -> Any:
    if key.startswith(EXT_PREFIX):
        return value
    if key in ("location", "procType"):
        if not isinstance(value, str):
            raise MetadataTypeError(f"{key} must be a string, got {value!r}")
        return value
    if key == "secure":
        if not isinstance(value, bool):
            raise MetadataTypeError(f"secure must be a boolean, got {value!r}")
        return value
    if key == "powerClass":
        try:
            return PowerClass(value)
        except ValueError:
            raise MetadataTypeError(f"bad powerClass {value!r}") from None
    if key == "channelKind":
        try:
            return ChannelKind(value)
        except ValueError:
            raise MetadataTypeError(f"bad channelKind {value!r}") from None
    if key == "bandwidth":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value <= 0:
            raise MetadataTypeError(f"bandwidth must be a positive number, got {value!r}")
        return float(value)
    raise KeyClassMismatch(f"unknown metadata key {key!r}")


def _check_key_class(key: str, on_arc: bool) -> None:
    if key.startswith(EXT_PREFIX) or key in SHARED_KEYS:
        return
    allowed = ARC_KEYS if on_arc else NODE_KEYS
    if key not in allowed:
        where = "arcs" if on_arc else "nodes"
        raise KeyClassMismatch(f"metadata key {key!r} is not admissible on {where}")


# ---------------------------------------------------------------------------
# graph records

ArcId = tuple  # (source node id, target node id)


@dataclass(frozen=True)
class NodeRecord:
    kind: NodeKind
    label: str
    path: str  # position in the skeleton expression, e.g. "/1/w3"
    farm: str | None = None  # emitter id of the farm this node is part of
    service_time: float = 0.0
    meta: dict = field(default_factory=dict)

    def with_meta(self, key, value) -> "NodeRecord":
        meta = dict(self.meta)
        if value is None:
            meta.pop(key, None)
        else:
            meta[key] = value
        return replace(self, meta=meta)


@dataclass(frozen=True)
class ArcRecord:
    meta: dict = field(default_factory=dict)

    def with_meta(self, key, value) -> "ArcRecord":
        meta = dict(self.meta)
        if value is None:
            meta.pop(key, None)
        else:
            meta[key] = value
        return ArcRecord(meta)


def replica_suffix(path: str) -> str:
    return ".".join(part[1:] for part in path.split("/") if part.startswith("w"))


def node_id(label: str, path: str) -> str:
    return f"n_{label}{replica_suffix(path)}"


def natural_key(text: str):
    return [int(tok) if tok.isdigit() else tok for tok in re.split(r"(\d+)", text)]


@dataclass(frozen=True)
class ApplicationGraph:
    nodes: dict = field(default_factory=dict)  # id -> NodeRecord
    arcs: dict = field(default_factory=dict)  # (u, v) -> ArcRecord
    version: int = 0

    def successors(self, nid: str) -> list[str]:
        return sorted((v for (u, v) in self.arcs if u == nid), key=natural_key)

    def predecessors(self, nid: str) -> list[str]:
        return sorted((u for (u, v) in self.arcs if v == nid), key=natural_key)

    def incident_arcs(self, nid: str) -> list[ArcId]:
        return [a for a in self.arcs if nid in a]

    def topological_order(self) -> list[str]:
        indeg = {n: 0 for n in self.nodes}
        out = defaultdict(list)
        for u, v in self.arcs:
            if u in indeg and v in indeg:
                indeg[v] += 1
                out[u].append(v)
        ready = sorted((n for n, d in indeg.items() if d == 0), key=natural_key)
        order = []
        queue = deque(ready)
        while queue:
            n = queue.popleft()
            order.append(n)
            for v in sorted(out[n], key=natural_key):
                indeg[v] -= 1
                if indeg[v] == 0:
                    queue.append(v)
        return order

    def sources(self) -> list[str]:
        targets = {v for (_, v) in self.arcs}
        return sorted((n for n in self.nodes if n not in targets), key=natural_key)

    def farms(self) -> list[str]:
        """Emitter ids, in pipeline (topological) order."""
        return [n for n in self.topological_order() if self.nodes[n].kind is NodeKind.EMITTER]

    def collector_of(self, farm: str) -> str | None:
        for nid, rec in self.nodes.items():
            if rec.kind is NodeKind.COLLECTOR and rec.farm == farm:
                return nid
        return None

    def workers(self, farm: str) -> list[str]:
        return sorted(
            (n for n, r in self.nodes.items() if r.kind is NodeKind.WORKER and r.farm == farm),
            key=lambda n: natural_key(self.nodes[n].path),
        )

    def meta(self, target) -> dict:
        if isinstance(target, tuple):
            return self.arcs[target].meta
        return self.nodes[target].meta

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "nodes": [_node_json(n, self.nodes[n]) for n in sorted(self.nodes, key=natural_key)],
            "arcs": [
                _arc_json(a, self.arcs[a])
                for a in sorted(self.arcs, key=lambda a: (natural_key(a[0]), natural_key(a[1])))
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, doc: dict) -> "ApplicationGraph":
        nodes = dict(_node_from_json(d) for d in doc["nodes"])
        arcs = dict(_arc_from_json(d) for d in doc["arcs"])
        return cls(nodes, arcs, doc["version"])


def content_equal(a: ApplicationGraph, b: ApplicationGraph) -> bool:
    """Graph equality ignoring the version counter."""
    return a.nodes == b.nodes and a.arcs == b.arcs


def _node_json(nid: str, rec: NodeRecord) -> dict:
    return {
        "id": nid,
        "kind": rec.kind.value,
        "label": rec.label,
        "path": rec.path,
        "farm": rec.farm,
        "service_time": rec.service_time,
        "meta": _meta_json(rec.meta),
    }


def _arc_json(arc: ArcId, rec: ArcRecord) -> dict:
    return {"from": arc[0], "to": arc[1], "meta": _meta_json(rec.meta)}


def _meta_json(meta: dict) -> dict:
    return {k: (v.value if isinstance(v, Enum) else v) for k, v in sorted(meta.items())}


def _node_from_json(doc: dict):
    meta = {k: _coerce_meta(k, v) for k, v in doc.get("meta", {}).items()}
    rec = NodeRecord(
        kind=NodeKind(doc["kind"]),
        label=doc.get("label", ""),
        path=doc.get("path", ""),
        farm=doc.get("farm"),
        service_time=float(doc.get("service_time", 0.0)),
        meta=meta,
    )
    return doc["id"], rec


def _arc_from_json(doc: dict):
    meta = {k: _coerce_meta(k, v) for k, v in doc.get("meta", {}).items()}
    return (doc["from"], doc["to"]), ArcRecord(meta)


# ---------------------------------------------------------------------------
# expansion

def expand(expr: SkeletonExpr, default_degree: int = DEFAULT_FARM_DEGREE) -> ApplicationGraph:
    """Build the application graph of a skeleton composition.

    Sequential stages become one node each, a farm becomes an emitter, one
    replica of its worker per unit of degree and a collector.  Consecutive
    pipeline stages are joined by a single arc from the exit boundary of one
    stage to the entry boundary of the next (a farm's boundaries are its
    emitter and collector).
    """
    check_skeleton(expr)
    if default_degree < 1:
        raise MalformedSkeleton("default farm degree must be >= 1")
    nodes: dict[str, NodeRecord] = {}
    arcs: dict[ArcId, ArcRecord] = {}

    def add(rec: NodeRecord) -> str:
        nid = node_id(rec.label, rec.path)
        if nid in nodes:
            raise MalformedSkeleton(f"duplicate node id {nid!r}; give stages distinct labels")
        nodes[nid] = rec
        return nid

    def walk(e, path: str, farm: str | None) -> tuple[str, str]:
        if isinstance(e, Seq):
            kind = NodeKind.WORKER if farm else NodeKind.SEQ
            nid = add(NodeRecord(kind, e.label, path, farm, float(e.service_time)))
            return nid, nid
        if isinstance(e, Pipeline):
            bounds = [walk(s, f"{path}/{i}", None) for i, s in enumerate(e.stages)]
            for (_, out), (inn, _) in zip(bounds, bounds[1:]):
                arcs[(out, inn)] = ArcRecord()
            return bounds[0][0], bounds[-1][1]
        # Farm
        tag = f"_{e.label}" if e.label else ""
        eid = add(NodeRecord(NodeKind.EMITTER, f"e{tag}", path, None))
        nodes[eid] = replace(nodes[eid], farm=eid)
        cid = add(NodeRecord(NodeKind.COLLECTOR, f"c{tag}", path, eid))
        degree = e.degree if e.degree is not None else default_degree
        for i in range(1, degree + 1):
            entry, exit_ = walk(e.worker, f"{path}/w{i}", eid)
            arcs[(eid, entry)] = ArcRecord()
            arcs[(exit_, cid)] = ArcRecord()
        return eid, cid

    walk(expr, "", None)
    return ApplicationGraph(nodes, arcs, 0)


# ---------------------------------------------------------------------------
# validation

@dataclass
class ValidationReport:
    errors: list = field(default_factory=list)
    lints: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def __str__(self) -> str:
        lines = [f"error: {e}" for e in self.errors] + [f"lint: {w}" for w in self.lints]
        return "\n".join(lines) or "ok"


def validate(g: ApplicationGraph) -> ValidationReport:
    report = ValidationReport()
    err = report.errors.append

    for (u, v), rec in g.arcs.items():
        if u not in g.nodes or v not in g.nodes:
            err(f"dangling arc ({u}, {v})")
        if u == v:
            err(f"self-loop on {u}")
        for key, value in rec.meta.items():
            _check_meta_entry(report, f"arc ({u}, {v})", key, value, on_arc=True)
    for nid, rec in g.nodes.items():
        for key, value in rec.meta.items():
            _check_meta_entry(report, f"node {nid}", key, value, on_arc=False)

    live = {a: r for a, r in g.arcs.items() if a[0] in g.nodes and a[1] in g.nodes and a[0] != a[1]}
    if len(g.topological_order()) != len(g.nodes):
        err("graph has a cycle")
    if g.nodes and not _weakly_connected(g.nodes, live):
        err("graph is not connected")

    _check_farms(g, live, err)

    for (u, v), rec in live.items():
        if rec.meta.get("channelKind") is ChannelKind.SSL:
            if g.nodes[u].meta.get("secure") is True and g.nodes[v].meta.get("secure") is True:
                report.lints.append(f"arc ({u}, {v}) is Ssl between two secure nodes")
    return report


def _check_meta_entry(report, where, key, value, on_arc):
    try:
        _check_key_class(key, on_arc)
        _coerce_meta(key, value)
    except (KeyClassMismatch, MetadataTypeError) as exc:
        report.errors.append(f"{where}: {exc}")


def _weakly_connected(nodes, arcs) -> bool:
    adj = defaultdict(set)
    for u, v in arcs:
        adj[u].add(v)
        adj[v].add(u)
    start = next(iter(nodes))
    seen = {start}
    stack = [start]
    while stack:
        n = stack.pop()
        for m in adj[n]:
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return len(seen) == len(nodes)


def _check_farms(g: ApplicationGraph, arcs, err) -> None:
    succ = defaultdict(set)
    pred = defaultdict(set)
    for u, v in arcs:
        succ[u].add(v)
        pred[v].add(u)
    parts = defaultdict(lambda: defaultdict(list))
    for nid, rec in g.nodes.items():
        if rec.kind is not NodeKind.SEQ:
            if rec.farm is None:
                err(f"{rec.kind.value} {nid} belongs to no farm")
                continue
            parts[rec.farm][rec.kind].append(nid)
    for farm, by_kind in sorted(parts.items()):
        emitters = by_kind[NodeKind.EMITTER]
        collectors = by_kind[NodeKind.COLLECTOR]
        if len(emitters) != 1 or len(collectors) != 1:
            err(f"farm {farm}: expected one emitter and one collector, "
                f"found {len(emitters)} and {len(collectors)}")
            continue
        e, c = emitters[0], collectors[0]
        if not succ[e]:
            err(f"farm {farm}: emitter has no workers")
        if len(succ[e]) != len(pred[c]):
            err(f"farm {farm}: emitter fans out to {len(succ[e])} workers "
                f"but collector gathers from {len(pred[c])}")
        for w in by_kind[NodeKind.WORKER]:
            if (e, w) not in arcs:
                err(f"farm {farm}: worker {w} has no arc from emitter {e}")
            if (w, c) not in arcs:
                err(f"farm {farm}: worker {w} has no arc to collector {c}")
            if pred[w] - {e} or succ[w] - {c}:
                err(f"farm {farm}: worker {w} has arcs outside the farm star")


# ---------------------------------------------------------------------------
# deltas

@dataclass(frozen=True)
class MetaChange:
    target: Any  # node id or (u, v) arc id
    key: str
    old: Any
    new: Any  # None deletes the entry


@dataclass(frozen=True)
class GraphDelta:
    base_version: int
    added_nodes: dict = field(default_factory=dict)
    removed_nodes: dict = field(default_factory=dict)
    added_arcs: dict = field(default_factory=dict)
    removed_arcs: dict = field(default_factory=dict)
    metadata_changes: tuple = ()

    def is_empty(self) -> bool:
        return not (self.added_nodes or self.removed_nodes or self.added_arcs
                    or self.removed_arcs or self.metadata_changes)

    def to_json(self) -> dict:
        def target_json(t):
            return list(t) if isinstance(t, tuple) else t

        def value_json(v):
            return v.value if isinstance(v, Enum) else v

        return {
            "base_version": self.base_version,
            "added_nodes": [_node_json(n, r) for n, r in sorted(self.added_nodes.items())],
            "removed_nodes": [_node_json(n, r) for n, r in sorted(self.removed_nodes.items())],
            "added_arcs": [_arc_json(a, r) for a, r in sorted(self.added_arcs.items())],
            "removed_arcs": [_arc_json(a, r) for a, r in sorted(self.removed_arcs.items())],
            "metadata_changes": [
                {"target": target_json(c.target), "key": c.key,
                 "old": value_json(c.old), "new": value_json(c.new)}
                for c in self.metadata_changes
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "GraphDelta":
        def target(t):
            return tuple(t) if isinstance(t, list) else t

        def value(key, v):
            return None if v is None else _coerce_meta(key, v)

        return cls(
            base_version=doc["base_version"],
            added_nodes=dict(_node_from_json(d) for d in doc["added_nodes"]),
            removed_nodes=dict(_node_from_json(d) for d in doc["removed_nodes"]),
            added_arcs=dict(_arc_from_json(d) for d in doc["added_arcs"]),
            removed_arcs=dict(_arc_from_json(d) for d in doc["removed_arcs"]),
            metadata_changes=tuple(
                MetaChange(target(c["target"]), c["key"], value(c["key"], c["old"]),
                           value(c["key"], c["new"]))
                for c in doc["metadata_changes"]
            ),
        )


def _structure(rec: NodeRecord) -> NodeRecord:
    return replace(rec, meta={})


def _meta_changes(target, old: dict, new: dict) -> list[MetaChange]:
    changes = []
    for key in sorted(set(old) | set(new)):
        if old.get(key) != new.get(key):
            changes.append(MetaChange(target, key, old.get(key), new.get(key)))
    return changes


def diff(g_old: ApplicationGraph, g_new: ApplicationGraph) -> GraphDelta:
    """Smallest delta turning ``g_old`` into ``g_new``.

    Nodes and arcs are matched by id.  A node whose structural fields changed
    is reported as removed and re-added; metadata differences on surviving
    elements become per-key changes.
    """
    added_nodes, removed_nodes = {}, {}
    added_arcs, removed_arcs = {}, {}
    changes: list[MetaChange] = []

    for nid, rec in g_old.nodes.items():
        other = g_new.nodes.get(nid)
        if other is None or _structure(other) != _structure(rec):
            removed_nodes[nid] = rec
    for nid, rec in g_new.nodes.items():
        if nid in removed_nodes or nid not in g_old.nodes:
            added_nodes[nid] = rec
        else:
            changes += _meta_changes(nid, g_old.nodes[nid].meta, rec.meta)

    for arc, rec in g_old.arcs.items():
        if arc not in g_new.arcs:
            removed_arcs[arc] = rec
    for arc, rec in g_new.arcs.items():
        if arc not in g_old.arcs:
            added_arcs[arc] = rec
        else:
            changes += _meta_changes(arc, g_old.arcs[arc].meta, rec.meta)

    return GraphDelta(g_old.version, added_nodes, removed_nodes, added_arcs, removed_arcs,
                      tuple(changes))


def apply_delta(g: ApplicationGraph, d: GraphDelta) -> ApplicationGraph:
    """Apply ``d`` to ``g`` and return the new graph (``g`` is left untouched)."""
    if d.base_version != g.version:
        raise StaleDelta(f"delta based on version {d.base_version}, graph is at {g.version}")
    nodes = dict(g.nodes)
    arcs = dict(g.arcs)
    for arc in d.removed_arcs:
        if arcs.pop(arc, None) is None:
            raise WouldMalform(f"cannot remove missing arc {arc}")
    for nid in d.removed_nodes:
        if nodes.pop(nid, None) is None:
            raise WouldMalform(f"cannot remove missing node {nid}")
    for nid, rec in d.added_nodes.items():
        if nid in nodes:
            raise WouldMalform(f"node {nid} already exists")
        nodes[nid] = rec
    for arc, rec in d.added_arcs.items():
        if arc in arcs:
            raise WouldMalform(f"arc {arc} already exists")
        arcs[arc] = rec
    for ch in d.metadata_changes:
        if isinstance(ch.target, tuple):
            if ch.target not in arcs:
                raise WouldMalform(f"metadata change on missing arc {ch.target}")
            if arcs[ch.target].meta.get(ch.key) != ch.old:
                raise WouldMalform(f"metadata conflict on arc {ch.target} key {ch.key}")
            arcs[ch.target] = arcs[ch.target].with_meta(ch.key, ch.new)
        else:
            if ch.target not in nodes:
                raise WouldMalform(f"metadata change on missing node {ch.target}")
            if nodes[ch.target].meta.get(ch.key) != ch.old:
                raise WouldMalform(f"metadata conflict on node {ch.target} key {ch.key}")
            nodes[ch.target] = nodes[ch.target].with_meta(ch.key, ch.new)
    result = ApplicationGraph(nodes, arcs, g.version + 1)
    report = validate(result)
    if not report.ok:
        raise WouldMalform("delta would leave a malformed graph:\n" + str(report), report)
    return result


def annotate(g: ApplicationGraph, target, key: str, value) -> ApplicationGraph:
    """Set one metadata entry on a node (id) or arc ((u, v) tuple)."""
    on_arc = isinstance(target, tuple)
    if on_arc and target not in g.arcs:
        raise UnknownTarget(f"no arc {target}")
    if not on_arc and target not in g.nodes:
        raise UnknownTarget(f"no node {target!r}")
    _check_key_class(key, on_arc)
    value = _coerce_meta(key, value)
    old = g.meta(target).get(key)
    return apply_delta(g, GraphDelta(g.version, metadata_changes=(MetaChange(target, key, old, value),)))


def set_meta(g: ApplicationGraph, target, key: str, value) -> ApplicationGraph:
    """Unversioned metadata write used while staging a candidate graph."""
    _check_key_class(key, isinstance(target, tuple))
    value = _coerce_meta(key, value)
    if isinstance(target, tuple):
        arcs = dict(g.arcs)
        arcs[target] = arcs[target].with_meta(key, value)
        return replace(g, arcs=arcs)
    nodes = dict(g.nodes)
    nodes[target] = nodes[target].with_meta(key, value)
    return replace(g, nodes=nodes)


def ssl_arcs(g: ApplicationGraph) -> int:
    return sum(1 for rec in g.arcs.values() if rec.meta.get("channelKind") is ChannelKind.SSL)


def unsecured_arcs(g: ApplicationGraph) -> list[ArcId]:
    """Arcs touching an insecure node that are not carried over SSL."""
    bad = []
    for (u, v), rec in g.arcs.items():
        exposed = any(g.nodes[n].meta.get("secure") is not True for n in (u, v))
        if exposed and rec.meta.get("channelKind") is not ChannelKind.SSL:
            bad.append((u, v))
    return sorted(bad)
