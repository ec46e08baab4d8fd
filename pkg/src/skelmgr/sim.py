"""Deterministic discrete-event execution of an application graph.

The world owns the placed graph, the resource pool and an event queue.
Tasks enter at the graph's source node, are served FIFO by sequential stages
and workers, are spread round-robin by farm emitters and leave the system
after the sink node.  Emitters and collectors take no time.

Management code interacts with the world only between ``step`` calls: it
reads ``monitor`` snapshots, stages plans with ``execute_action`` and hands
committed graphs to ``adopt``.
"""

from __future__ import annotations

import heapq
import random
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum

from .errors import ActionFailure, NoFreeResource, RemoveLastWorker, ScenarioError, UnplacedNode
from .graph import (
    ApplicationGraph,
    ArcRecord,
    ChannelKind,
    NodeKind,
    NodeRecord,
    PowerClass,
    diff,
    natural_key,
    node_id,
    set_meta,
    ssl_arcs,
)
from .rules import Action, ActionKind


class Domain(str, Enum):
    TRUSTED = "trusted"
    UNTRUSTED = "untrusted"


POWER_RANK = {PowerClass.GREEN: 0, PowerClass.AMBER: 1, PowerClass.RED: 2}


@dataclass(frozen=True)
class Resource:
    id: str
    domain: Domain = Domain.TRUSTED
    power_class: PowerClass = PowerClass.GREEN
    power_cost: float = 1.0
    speed: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "domain", Domain(self.domain))
        object.__setattr__(self, "power_class", PowerClass(self.power_class))
        if self.power_cost <= 0 or self.speed <= 0:
            raise ScenarioError(f"resource {self.id}: powerCost and speed must be positive")

    @property
    def trusted(self) -> bool:
        return self.domain is Domain.TRUSTED


@dataclass(frozen=True)
class WorkloadPhase:
    duration: float
    rate: float  # tasks per second
    jitter: bool = False  # exponential inter-arrivals instead of equal spacing

    def __post_init__(self):
        if self.duration <= 0 or self.rate < 0:
            raise ScenarioError("workload phase needs duration > 0 and rate >= 0")


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    tick: float = 5.0
    window: float = 10.0
    ssl_overhead: float = 1.1
    run_length: float = 600.0

    def __post_init__(self):
        if not 0 < self.tick <= self.window:
            raise ScenarioError("need 0 < tick <= window")
        if self.ssl_overhead < 1:
            raise ScenarioError("ssl_overhead must be >= 1")
        if self.run_length <= 0:
            raise ScenarioError("run_length must be positive")


@dataclass(frozen=True)
class MonitorSnapshot:
    now: float
    window: float
    farm: str | None
    T_arr: float | None  # mean inter-arrival time at the farm entry, None if no arrivals
    throughput: float  # completions per second at the farm exit
    utilization: dict = field(default_factory=dict)

    @property
    def arrival_rate(self) -> float:
        return 0.0 if self.T_arr is None else 1.0 / self.T_arr


@dataclass
class _Server:
    queue: deque = field(default_factory=deque)  # (task, preserved remaining time or None)
    busy: int | None = None
    busy_until: float = 0.0
    gen: int = 0
    rr: int = 0
    intervals: list = field(default_factory=list)  # [start, end] busy periods


_ARRIVAL, _DONE = 0, 1


@dataclass
class ActionContext:
    """Scratch state threaded through the actions of one plan."""

    base: ApplicationGraph
    working: ApplicationGraph
    farm: str | None
    now: float = 0.0
    prefer_green: bool = False
    resource: str | None = None
    new_node: str | None = None
    removed_node: str | None = None
    effects: list = field(default_factory=list)


class World:
    def __init__(self, graph: ApplicationGraph, pool, workload, config: SimConfig,
                 trace: list | None = None):
        self.pool = {r.id: r for r in pool}
        if len(self.pool) != len(pool):
            raise ScenarioError("resource ids must be unique")
        self.workload = list(workload)
        self.config = config
        self.trace = trace if trace is not None else []
        self.rng = random.Random(config.seed)
        self.now = 0.0
        self.injected = 0
        self.completed = 0
        self.graph = ApplicationGraph()
        self.servers: dict[str, _Server] = {}
        self.allocation: dict[str, str] = {}  # resource id -> node id
        self._arrived: dict[str, list] = {}
        self._done: dict[str, list] = {}
        self._events: list = []
        self._seq = 0
        self._succ_cache: dict = {}
        self._service_cache: dict = {}
        self.adopt(graph)
        self._arrivals = self._arrival_times()
        self._schedule_next_arrival()

    # -- placement -----------------------------------------------------------

    def adopt(self, graph: ApplicationGraph) -> None:
        """Switch to a committed graph: place new nodes, retire removed ones."""
        old = self.graph
        placed = {}
        for nid, rec in graph.nodes.items():
            loc = rec.meta.get("location")
            if loc is None:
                raise UnplacedNode(f"node {nid} has no location")
            if loc not in self.pool:
                raise UnplacedNode(f"node {nid} placed on unknown resource {loc}")
            if loc in placed:
                raise UnplacedNode(f"resource {loc} hosts both {placed[loc]} and {nid}")
            placed[loc] = nid
        orphans = []
        for nid in sorted(set(old.nodes) - set(graph.nodes), key=natural_key):
            orphans += [(nid, task, rem) for task, rem in self._retire(nid)]
        self.graph = graph
        self.allocation = placed
        self._succ_cache.clear()
        self._service_cache.clear()
        for nid in sorted(graph.nodes, key=natural_key):
            if nid not in self.servers:
                self.servers[nid] = _Server()
                self._arrived.setdefault(nid, [])
                self._done.setdefault(nid, [])
        for nid, task, remaining in orphans:
            self._redispatch(old.nodes[nid], task, remaining)

    def _retire(self, nid: str):
        srv = self.servers.pop(nid)
        out = []
        if srv.busy is not None:
            out.append((srv.busy, max(0.0, srv.busy_until - self.now)))
            srv.intervals[-1][1] = self.now
        out.extend(srv.queue)
        return out

    def _redispatch(self, rec: NodeRecord, task: int, remaining):
        farm = rec.farm
        if farm is None or farm not in self.graph.nodes:
            raise ActionFailure(f"cannot re-dispatch task {task}: no emitter")
        target = self._round_robin(farm)
        self._log("dispatch", target, task)
        self._enqueue(target, task, remaining)

    def free_resources(self, graph: ApplicationGraph | None = None) -> list[Resource]:
        graph = graph or self.graph
        used = {rec.meta.get("location") for rec in graph.nodes.values()}
        return [r for rid, r in sorted(self.pool.items()) if rid not in used]

    def power_committed(self, graph: ApplicationGraph | None = None) -> float:
        graph = graph or self.graph
        return sum(self.pool[rec.meta["location"]].power_cost
                   for rec in graph.nodes.values() if rec.meta.get("location") in self.pool)

    # -- event loop ----------------------------------------------------------

    def _arrival_times(self):
        start = 0.0
        for phase in self.workload:
            end = start + phase.duration
            if phase.rate > 0:
                if phase.jitter:
                    t = start + self.rng.expovariate(phase.rate)
                    while t < end:
                        yield t
                        t += self.rng.expovariate(phase.rate)
                else:
                    j = 0
                    while start + j / phase.rate < end:
                        yield start + j / phase.rate
                        j += 1
            start = end

    def _schedule_next_arrival(self):
        t = next(self._arrivals, None)
        if t is not None:
            self._push(t, _ARRIVAL, None, None, 0)

    def _push(self, t, kind, node, task, gen):
        self._seq += 1
        heapq.heappush(self._events, (t, self._seq, kind, node, task, gen))

    def _log(self, ev: str, node: str, task: int):
        self.trace.append({"t": self.now, "src": "sim", "ev": ev, "node": node, "task": task})

    def step(self, until: float) -> list:
        """Process every event with time <= ``until``; return the new trace records."""
        first = len(self.trace)
        while self._events and self._events[0][0] <= until:
            t, _, kind, node, task, gen = heapq.heappop(self._events)
            self.now = t
            if kind == _ARRIVAL:
                task = self.injected
                self.injected += 1
                sources = self.graph.sources()
                if len(sources) != 1:
                    raise ActionFailure("graph must have exactly one source node")
                self._deliver(task, sources[0])
                self._schedule_next_arrival()
            else:
                srv = self.servers.get(node)
                if srv is None or srv.gen != gen or srv.busy != task:
                    continue  # node retired or task moved away
                srv.busy = None
                self._log("complete", node, task)
                self._done[node].append(t)
                self._forward(task, node)
                self._start_next(node)
        self.now = max(self.now, until)
        return self.trace[first:]

    def _successors(self, nid):
        succ = self._succ_cache.get(nid)
        if succ is None:
            succ = self._succ_cache[nid] = self.graph.successors(nid)
        return succ

    def _round_robin(self, emitter: str) -> str:
        srv = self.servers[emitter]
        succ = self._successors(emitter)
        target = succ[srv.rr % len(succ)]
        srv.rr += 1
        return target

    def _deliver(self, task: int, nid: str):
        self._log("arrive", nid, task)
        self._arrived[nid].append(self.now)
        kind = self.graph.nodes[nid].kind
        if kind is NodeKind.EMITTER:
            target = self._round_robin(nid)
            self._log("dispatch", target, task)
            self._deliver(task, target)
        elif kind is NodeKind.COLLECTOR:
            self._log("complete", nid, task)
            self._done[nid].append(self.now)
            self._forward(task, nid)
        else:
            self._enqueue(nid, task, None)

    def _enqueue(self, nid, task, remaining):
        srv = self.servers[nid]
        srv.queue.append((task, remaining))
        if srv.busy is None:
            self._start_next(nid)

    def _forward(self, task: int, nid: str):
        succ = self._successors(nid)
        if not succ:
            self.completed += 1
        else:
            self._deliver(task, succ[0])

    def service_time(self, nid: str) -> float:
        st = self._service_cache.get(nid)
        if st is None:
            rec = self.graph.nodes[nid]
            st = rec.service_time / self.pool[rec.meta["location"]].speed
            if any(self.graph.arcs[a].meta.get("channelKind") is ChannelKind.SSL
                   for a in self.graph.incident_arcs(nid)):
                st *= self.config.ssl_overhead
            self._service_cache[nid] = st
        return st

    def _start_next(self, nid: str):
        srv = self.servers[nid]
        if srv.busy is not None or not srv.queue:
            return
        task, remaining = srv.queue.popleft()
        service = self.service_time(nid) if remaining is None else remaining
        srv.busy = task
        srv.busy_until = self.now + service
        srv.gen += 1
        srv.intervals.append([self.now, srv.busy_until])
        self._log("start", nid, task)
        self._push(srv.busy_until, _DONE, nid, task, srv.gen)

    def in_flight(self) -> int:
        return sum(len(s.queue) + (s.busy is not None) for s in self.servers.values())

    # -- monitoring ----------------------------------------------------------

    def count_in_window(self, times: list, now: float, window: float) -> int:
        return bisect_right(times, now) - bisect_right(times, now - window)

    def utilization(self, nid: str, now: float, window: float) -> float:
        srv = self.servers.get(nid)
        if srv is None:
            return 0.0
        lo, busy = now - window, 0.0
        for start, end in reversed(srv.intervals):
            if end <= lo:
                break
            busy += max(0.0, min(end, now) - max(start, lo))
        return busy / window

    def managed_farm(self) -> str | None:
        farms = self.graph.farms()
        return farms[0] if farms else None

    def monitor(self, now: float, farm: str | None = None) -> MonitorSnapshot:
        """T_arr and throughput of a farm over the window (now - window, now].

        T_arr is the window length divided by the number of arrivals at the
        emitter; throughput counts collector completions per second.  Without
        a farm the graph's source and sink are observed instead.
        """
        window = self.config.window
        if now < window:
            raise ValueError(f"monitor needs now >= window ({now} < {window})")
        farm = farm or self.managed_farm()
        if farm is not None:
            entry, exit_ = farm, self.graph.collector_of(farm)
        else:
            order = self.graph.topological_order()
            entry, exit_ = order[0], order[-1]
        n_arr = self.count_in_window(self._arrived.get(entry, []), now, window)
        n_done = self.count_in_window(self._done.get(exit_, []), now, window)
        util = {n: self.utilization(n, now, window) for n in sorted(self.graph.nodes, key=natural_key)}
        return MonitorSnapshot(
            now=now,
            window=window,
            farm=farm,
            T_arr=window / n_arr if n_arr else None,
            throughput=n_done / window,
            utilization=util,
        )

    # -- actions -------------------------------------------------------------

    def context(self, farm: str | None = None, prefer_green: bool = False) -> ActionContext:
        return ActionContext(self.graph, self.graph, farm or self.managed_farm(), self.now,
                             prefer_green)

    def execute_action(self, action: Action, ctx: ActionContext) -> dict:
        """Stage the graph effect of one action into ``ctx.working``.

        Raises ActionFailure (NoFreeResource, RemoveLastWorker, ...) when the
        action cannot be carried out; the caller discards the context then.
        """
        kind = action.kind
        if kind is ActionKind.FIND_NEW_RESOURCE:
            effect = self._find_new_resource(action, ctx)
        elif kind is ActionKind.ALLOCATE_NEW_WORKER:
            effect = self._allocate_new_worker(ctx)
        elif kind in (ActionKind.CONNECT_WORKER, ActionKind.CONNECT_SSL_WORKER):
            channel = ChannelKind.SSL if kind is ActionKind.CONNECT_SSL_WORKER else ChannelKind.PLAIN
            effect = self._connect_worker(ctx, channel)
        elif kind is ActionKind.REMOVE_WORKER:
            effect = self._remove_worker(ctx)
        else:
            effect = {}
        effect = {"action": kind.value, **effect}
        ctx.effects.append(effect)
        return effect

    def stage(self, actions, ctx: ActionContext):
        """Run a whole plan against ``ctx`` and return the resulting delta."""
        for action in actions:
            self.execute_action(action, ctx)
        return diff(ctx.base, ctx.working)

    def _find_new_resource(self, action: Action, ctx: ActionContext) -> dict:
        free = self.free_resources(ctx.working)
        if ctx.resource is not None and any(r.id == ctx.resource for r in free):
            return {"resource": ctx.resource, "reused": True}
        if not free:
            raise NoFreeResource("resource pool exhausted")
        policy = action.arg("policy", "fastest")
        green_rank = (lambda r: POWER_RANK[r.power_class]) if ctx.prefer_green else (lambda r: 0)
        if policy == "frugal":
            key = lambda r: (r.power_cost, green_rank(r), -r.speed, r.id)  # noqa: E731
        else:
            key = lambda r: (green_rank(r), -r.speed, r.id)  # noqa: E731
        ctx.resource = min(free, key=key).id
        return {"resource": ctx.resource}

    def _allocate_new_worker(self, ctx: ActionContext) -> dict:
        if ctx.resource is None:
            raise ActionFailure("allocateNewWorker without a recruited resource")
        farm = ctx.farm
        workers = ctx.working.workers(farm) if farm else []
        if not workers:
            raise ActionFailure(f"farm {farm} has no sequential workers to replicate")
        template = ctx.working.nodes[workers[0]]
        emitter = ctx.working.nodes[farm]
        index = 1 + max(int(ctx.working.nodes[w].path.rsplit("/w", 1)[1]) for w in workers)
        path = f"{emitter.path}/w{index}"
        nid = node_id(template.label, path)
        res = self.pool[ctx.resource]
        rec = NodeRecord(NodeKind.WORKER, template.label, path, farm, template.service_time,
                         meta={"location": res.id, "secure": res.trusted,
                               "powerClass": res.power_class, "ext.powerCost": res.power_cost})
        nodes = dict(ctx.working.nodes)
        nodes[nid] = rec
        ctx.working = replace(ctx.working, nodes=nodes)
        ctx.new_node = nid
        return {"node": nid, "resource": res.id}

    def _connect_worker(self, ctx: ActionContext, channel: ChannelKind) -> dict:
        if ctx.new_node is None:
            raise ActionFailure("connect without a newly allocated worker")
        farm = ctx.farm
        collector = ctx.working.collector_of(farm)
        arcs = dict(ctx.working.arcs)
        for arc in ((farm, ctx.new_node), (ctx.new_node, collector)):
            arcs[arc] = ArcRecord({"channelKind": channel})
        ctx.working = replace(ctx.working, arcs=arcs)
        return {"node": ctx.new_node, "channelKind": channel.value}

    def _remove_worker(self, ctx: ActionContext) -> dict:
        farm = ctx.farm
        workers = ctx.working.workers(farm) if farm else []
        if len(workers) <= 1:
            raise RemoveLastWorker(f"farm {farm} would be left without workers")
        window = self.config.window
        victim = min(workers, key=lambda w: (self.utilization(w, ctx.now, window), natural_key(w)))
        nodes = dict(ctx.working.nodes)
        del nodes[victim]
        arcs = {a: r for a, r in ctx.working.arcs.items() if victim not in a}
        ctx.working = replace(ctx.working, nodes=nodes, arcs=arcs)
        ctx.removed_node = victim
        return {"node": victim}

    # -- summaries -----------------------------------------------------------

    def degree(self, farm: str | None = None) -> int:
        farm = farm or self.managed_farm()
        return len(self.graph.workers(farm)) if farm else 0

    def ssl_arc_count(self) -> int:
        return ssl_arcs(self.graph)


def place(graph: ApplicationGraph, assignment: dict, pool: dict) -> ApplicationGraph:
    """Unversioned helper: put node -> resource placement metadata on a graph."""
    for nid, rid in assignment.items():
        res = pool[rid]
        graph = set_meta(graph, nid, "location", rid)
        graph = set_meta(graph, nid, "secure", res.trusted)
        graph = set_meta(graph, nid, "powerClass", res.power_class)
        graph = set_meta(graph, nid, "ext.powerCost", res.power_cost)
    return graph
