"""Device-to-fog link layer as a deterministic discrete-event simulation.

Control-plane state (a version number) spreads over the mesh with Trickle
timers; data packets follow a precomputed hop-count shortest path across
lossy, latency-bearing links.
"""

from __future__ import annotations

import heapq
import itertools
import json
import random
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import NodeError, RouteError

DEFAULT_CAPACITY_BPS = 25_000_000.0


@dataclass(frozen=True)
class LinkModel:
    latency_s: float = 0.005
    loss_prob: float = 0.0
    capacity_bps: float = DEFAULT_CAPACITY_BPS

    def __post_init__(self):
        if self.latency_s < 0:
            raise ValueError("latency_s must be non-negative")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError("loss_prob must be within [0, 1]")
        if not self.capacity_bps > 0:
            raise ValueError("capacity_bps must be positive")


def _edge(a: str, b: str) -> frozenset:
    return frozenset((a, b))


@dataclass
class TopologyGraph:
    nodes: set[str] = field(default_factory=set)
    links: dict[frozenset, LinkModel] = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = set(self.nodes)
        for e in self.links:
            if len(e) != 2:
                raise ValueError(f"self-loop or malformed edge {sorted(e)}")
            if not e <= self.nodes:
                raise ValueError(f"edge {sorted(e)} references unknown node")

    @classmethod
    def build(cls, nodes: Iterable[str], edges: Iterable[tuple[str, str]], link: LinkModel | None = None) -> "TopologyGraph":
        link = link or LinkModel()
        g = cls(set(nodes))
        for a, b in edges:
            g.add_edge(a, b, link)
        return g

    def add_edge(self, a: str, b: str, link: LinkModel | None = None) -> None:
        if a == b:
            raise ValueError(f"self-loop on {a}")
        if a not in self.nodes or b not in self.nodes:
            raise ValueError(f"edge {a}-{b} references unknown node")
        self.links[_edge(a, b)] = link or LinkModel()

    @property
    def edges(self) -> set[frozenset]:
        return set(self.links)

    def link(self, a: str, b: str) -> LinkModel:
        try:
            return self.links[_edge(a, b)]
        except KeyError:
            raise RouteError(f"no edge {a}-{b}") from None

    def neighbors(self, node: str) -> list[str]:
        return sorted(next(iter(e - {node})) for e in self.links if node in e)

    def adjacency(self) -> dict[str, list[str]]:
        adj: dict[str, list[str]] = {n: [] for n in self.nodes}
        for e in self.links:
            a, b = sorted(e)
            adj[a].append(b)
            adj[b].append(a)
        return {n: sorted(v) for n, v in adj.items()}

    def shortest_path(self, src: str, dst: str) -> list[str] | None:
        """Fewest-hop path; ties go to the lexicographically smaller neighbor."""
        for n in (src, dst):
            if n not in self.nodes:
                raise NodeError(n)
        adj = self.adjacency()
        prev = {src: None}
        q = deque([src])
        while q:
            u = q.popleft()
            if u == dst:
                break
            for v in adj[u]:
                if v not in prev:
                    prev[v] = u
                    q.append(v)
        if dst not in prev:
            return None
        path = [dst]
        while path[-1] != src:
            path.append(prev[path[-1]])
        return path[::-1]

    def is_connected(self) -> bool:
        if not self.nodes:
            return True
        start = min(self.nodes)
        return all(self.shortest_path(start, n) is not None for n in self.nodes)

    def to_json(self) -> dict:
        links = set(self.links.values())
        doc = {
            "nodes": sorted(self.nodes),
            "edges": sorted(sorted(e) for e in self.links),
        }
        if len(links) <= 1:
            link = next(iter(links), LinkModel())
            doc["link"] = {"latency_s": link.latency_s, "loss_prob": link.loss_prob, "capacity_bps": link.capacity_bps}
        else:
            doc["links"] = [
                {"edge": sorted(e), "latency_s": m.latency_s, "loss_prob": m.loss_prob, "capacity_bps": m.capacity_bps}
                for e, m in sorted(self.links.items(), key=lambda kv: sorted(kv[0]))
            ]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TopologyGraph":
        link = LinkModel(**doc.get("link", {}))
        g = cls.build(doc["nodes"], [tuple(e) for e in doc.get("edges", [])], link)
        for entry in doc.get("links", []):
            a, b = entry["edge"]
            g.add_edge(a, b, LinkModel(**{k: v for k, v in entry.items() if k != "edge"}))
        return g


def load_topology(path: str | Path) -> TopologyGraph:
    with open(path, encoding="utf-8") as fh:
        return TopologyGraph.from_json(json.load(fh))


def clique(n: int, link: LinkModel | None = None, prefix: str = "n") -> TopologyGraph:
    names = [f"{prefix}{i}" for i in range(n)]
    return TopologyGraph.build(names, itertools.combinations(names, 2), link)


def star(hub: str, leaves: Sequence[str], link: LinkModel | None = None) -> TopologyGraph:
    return TopologyGraph.build([hub, *leaves], [(hub, leaf) for leaf in leaves], link)


def random_connected(
    n: int, p: float, seed: int, link: LinkModel | None = None, prefix: str = "n", names: Sequence[str] | None = None
) -> TopologyGraph:
    """Random spanning tree plus G(n, p) extra edges, so the result is connected."""
    rng = random.Random(seed)
    names = list(names) if names is not None else [f"{prefix}{i}" for i in range(n)]
    n = len(names)
    g = TopologyGraph(set(names))
    for i in range(1, n):
        g.add_edge(names[i], names[rng.randrange(i)], link)
    for a, b in itertools.combinations(names, 2):
        if rng.random() < p and _edge(a, b) not in g.links:
            g.add_edge(a, b, link)
    return g


# --- Trickle -----------------------------------------------------------------


@dataclass(frozen=True)
class TrickleParams:
    i_min_s: float = 1.0
    i_doublings: int = 4
    k: int = 1

    def __post_init__(self):
        if not self.i_min_s > 0:
            raise ValueError("i_min_s must be positive")
        if self.i_doublings < 0:
            raise ValueError("i_doublings must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @property
    def i_max_s(self) -> float:
        return self.i_min_s * 2**self.i_doublings


@dataclass(frozen=True)
class TrickleState:
    interval_i_s: float
    t_fire_s: float = 0.0  # offset from the interval start
    c: int = 0
    version: int = 0


@dataclass(frozen=True)
class IntervalStart:
    pass


@dataclass(frozen=True)
class HeardConsistent:
    pass


@dataclass(frozen=True)
class HeardInconsistent:
    version: int


@dataclass(frozen=True)
class TimerFired:
    pass


@dataclass(frozen=True)
class IntervalExpired:
    pass


TRANSMIT = "transmit"


def _start_interval(state: TrickleState, interval: float, rng: random.Random) -> TrickleState:
    t_fire = interval / 2.0 + rng.random() * interval / 2.0
    return replace(state, interval_i_s=interval, t_fire_s=t_fire, c=0)


def trickle_advance(state: TrickleState, event, params: TrickleParams, rng: random.Random) -> tuple[TrickleState, str | None]:
    """Apply one Trickle rule. Returns the new state and ``TRANSMIT`` or ``None``.

    A newer version is adopted and restarts the timer at ``i_min``. An older
    one (our neighbor is behind) resets the timer only if ``I > i_min``.
    """
    if isinstance(event, IntervalStart):
        return _start_interval(state, state.interval_i_s, rng), None
    if isinstance(event, HeardConsistent):
        return replace(state, c=state.c + 1), None
    if isinstance(event, HeardInconsistent):
        if event.version > state.version:
            return _start_interval(replace(state, version=event.version), params.i_min_s, rng), None
        if state.interval_i_s > params.i_min_s:
            return _start_interval(state, params.i_min_s, rng), None
        return state, None
    if isinstance(event, TimerFired):
        return state, (TRANSMIT if state.c < params.k else None)
    if isinstance(event, IntervalExpired):
        return _start_interval(state, min(2.0 * state.interval_i_s, params.i_max_s), rng), None
    raise TypeError(f"unknown trickle event {event!r}")


@dataclass(frozen=True)
class Transmission:
    t: float
    node: str
    interval_no: int  # per-node interval counter


@dataclass(frozen=True)
class DisseminationStats:
    coverage: float
    tx_total: int
    tx_per_node: dict[str, int]
    convergence_time_s: float | None
    coverage_timeline: tuple[tuple[float, float], ...]
    transmissions: tuple[Transmission, ...]
    intervals_per_node: dict[str, int]


class _EventQueue:
    """Min-heap ordered by (time, insertion order)."""

    def __init__(self):
        self._heap: list = []
        self._counter = itertools.count()

    def push(self, t: float, item) -> None:
        heapq.heappush(self._heap, (t, next(self._counter), item))

    def pop(self):
        t, _, item = heapq.heappop(self._heap)
        return t, item

    def __bool__(self) -> bool:
        return bool(self._heap)


def simulate_dissemination(
    topology: TopologyGraph,
    params: TrickleParams,
    originator: str,
    duration_s: float,
    seed: int,
) -> DisseminationStats:
    """Flood a new version from ``originator`` with Trickle timers.

    Every node starts a Trickle timer at ``i_min`` at t=0 holding version 0;
    the originator holds version 1. Events at or after ``duration_s`` are not
    processed.
    """
    if originator not in topology.nodes:
        raise NodeError(originator)
    rng = random.Random(seed)
    adj = topology.adjacency()
    nodes = sorted(topology.nodes)
    target = 1
    states: dict[str, TrickleState] = {}
    epoch = {n: 0 for n in nodes}
    interval_no = {n: 0 for n in nodes}
    interval_start = {n: 0.0 for n in nodes}
    q = _EventQueue()

    def schedule(node: str, now: float) -> None:
        st = states[node]
        epoch[node] += 1
        interval_no[node] += 1
        interval_start[node] = now
        q.push(now + st.t_fire_s, ("fire", node, epoch[node]))
        q.push(now + st.interval_i_s, ("expire", node, epoch[node]))

    for n in nodes:
        version = target if n == originator else 0
        states[n] = _start_interval(TrickleState(params.i_min_s, version=version), params.i_min_s, rng)
        schedule(n, 0.0)

    holders = {originator}
    timeline = [(0.0, 1 / len(nodes))]
    converged = 0.0 if len(nodes) == 1 else None
    txs: list[Transmission] = []

    while q:
        t, (kind, node, token) = q.pop()
        if t >= duration_s:
            break
        if kind == "recv":
            st = states[node]
            if token == st.version:
                states[node], _ = trickle_advance(st, HeardConsistent(), params, rng)
                continue
            new, _ = trickle_advance(st, HeardInconsistent(token), params, rng)
            states[node] = new
            if new is not st:
                schedule(node, t)
            if new.version == target and node not in holders:
                holders.add(node)
                timeline.append((t, len(holders) / len(nodes)))
                if len(holders) == len(nodes):
                    converged = t
            continue
        if token != epoch[node]:
            continue  # timer belonged to an interval that was reset
        if kind == "fire":
            _, action = trickle_advance(states[node], TimerFired(), params, rng)
            if action == TRANSMIT:
                txs.append(Transmission(t, node, interval_no[node]))
                version = states[node].version
                for nb in adj[node]:
                    link = topology.link(node, nb)
                    if rng.random() >= link.loss_prob:
                        q.push(t + link.latency_s, ("recv", nb, version))
        else:
            states[node], _ = trickle_advance(states[node], IntervalExpired(), params, rng)
            schedule(node, t)

    tx_per_node = {n: 0 for n in nodes}
    for tx in txs:
        tx_per_node[tx.node] += 1
    return DisseminationStats(
        coverage=len(holders) / len(nodes),
        tx_total=len(txs),
        tx_per_node=tx_per_node,
        convergence_time_s=converged,
        coverage_timeline=tuple(timeline),
        transmissions=tuple(txs),
        intervals_per_node=dict(interval_no),
    )


# --- data plane ----------------------------------------------------------------


@dataclass(frozen=True)
class DeliveryOutcome:
    delivered: bool
    latency_s: float
    hops: int = 0


def deliver_data(topology: TopologyGraph, route: Sequence[str], packet_bits: int, seed: int | random.Random) -> DeliveryOutcome:
    """Send one packet hop by hop along ``route``.

    Each hop costs ``latency_s + packet_bits / capacity_bps`` and survives
    with probability ``1 - loss_prob``. Delivery stops at the first loss; the
    returned latency then includes the failed hop.
    """
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    for n in route:
        if n not in topology.nodes:
            raise RouteError(f"route references unknown node {n}")
    hops = list(zip(route, route[1:]))
    links = [topology.link(a, b) for a, b in hops]
    latency = 0.0
    for i, link in enumerate(links):
        latency += link.latency_s + packet_bits / link.capacity_bps
        if rng.random() < link.loss_prob:
            return DeliveryOutcome(False, latency, i + 1)
    return DeliveryOutcome(True, latency, len(links))
