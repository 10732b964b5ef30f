"""Network graph: validation, direction-following ordering and graph matrices.

A district heating network is a directed graph whose edges are pipes.  Each
consumer and the single power plant are "breaks" between a demand node
(flow arrives) and a supply node (flow leaves).  Supply and return sides are
each a polytree; the consumers connect them.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from .exceptions import (
    CycleError,
    DanglingConsumerError,
    DomainError,
    MultiplePlantsError,
    NotATreeError,
    TopologyError,
)
from .signals import Signal, as_signal

VIRTUAL_SUFFIX = "~v"
VIRTUAL_LENGTH = 1.0
VIRTUAL_SEGMENTS = 3


class NodeKind(str, Enum):
    SUPPLY = "supply"
    DEMAND = "demand"
    INTERIOR = "interior"


def friction_factor(d: float, k_rough: float) -> float:
    """Flow-independent Nikuradse friction factor ``(2 log10(d/k) + 1.138)**-2``."""
    if d <= 0 or k_rough <= 0:
        raise DomainError(f"diameter and roughness must be positive, got d={d}, k_rough={k_rough}")
    base = 2.0 * math.log10(d / k_rough) + 1.138
    if base <= 0:
        raise DomainError(f"Nikuradse law undefined for d/k_rough={d / k_rough:g}")
    return base**-2


@dataclass(frozen=True)
class Constants:
    rho: float = 960.0
    cp: float = 4160.0
    T_ext: float = 20.0
    g: float = 9.80665


@dataclass(frozen=True)
class PipeParams:
    """Geometry and material of one pipe.

    ``n_seg`` is the number of grid segments; the pipe carries ``n_seg + 1``
    temperature nodes with spacing ``length / n_seg``.  ``friction`` overrides
    the Nikuradse factor when given (the roughness is then ignored).
    """

    length: float
    diameter: float
    roughness: float = 1e-4
    heat_transfer: float = 0.0
    height_diff: float = 0.0
    n_seg: int = 10
    friction: float | None = None

    def __post_init__(self):
        if not self.length > 0:
            raise DomainError(f"pipe length must be positive, got {self.length}")
        if not self.diameter > 0:
            raise DomainError(f"pipe diameter must be positive, got {self.diameter}")
        if int(self.n_seg) != self.n_seg or self.n_seg < 1:
            raise DomainError(f"n_seg must be an integer >= 1, got {self.n_seg}")
        if self.friction is None:
            friction_factor(self.diameter, self.roughness)

    @property
    def area(self) -> float:
        return math.pi * (self.diameter / 2.0) ** 2

    @property
    def n_points(self) -> int:
        return int(self.n_seg) + 1

    @property
    def dx(self) -> float:
        return self.length / self.n_seg

    @property
    def lam(self) -> float:
        if self.friction is not None:
            return float(self.friction)
        return friction_factor(self.diameter, self.roughness)


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind


@dataclass(frozen=True)
class Pipe:
    id: str
    tail: str
    head: str
    params: PipeParams
    virtual: bool = False


@dataclass(frozen=True)
class Consumer:
    """A household between the end of ``pipe_in`` and the start of ``pipe_out``."""

    id: str
    pipe_in: str
    pipe_out: str
    demand: Signal
    T_out: Signal

    def __post_init__(self):
        object.__setattr__(self, "demand", as_signal(self.demand))
        object.__setattr__(self, "T_out", as_signal(self.T_out))


@dataclass(frozen=True)
class PlantBoundary:
    T_in: Signal
    p_in: Signal
    p_return: Signal

    def __post_init__(self):
        for name in ("T_in", "p_in", "p_return"):
            object.__setattr__(self, name, as_signal(getattr(self, name)))


@dataclass(frozen=True)
class RawNetwork:
    """Unvalidated network description, as read from a file."""

    constants: Constants
    nodes: tuple[Node, ...]
    pipes: tuple[Pipe, ...]
    consumers: tuple[Consumer, ...]
    plant: PlantBoundary

    def signals(self) -> list[Signal]:
        sig = [self.plant.T_in, self.plant.p_in, self.plant.p_return]
        for c in self.consumers:
            sig += [c.demand, c.T_out]
        return sig


@dataclass(frozen=True)
class NetworkModel(RawNetwork):
    """Validated network in direction-following order.

    Nodes are stored as supply nodes (plant first, then one per consumer in
    consumer order), interior nodes, demand nodes (one per consumer, plant
    last).  ``pipes[0]`` leaves the plant and ``pipes[-1]`` returns to it.
    ``permutation[i]`` is the index in the input pipe list of ordered pipe
    ``i``; inserted virtual pipes get indices past the end of that list.
    """

    permutation: tuple[int, ...] = ()
    virtual_pipes: tuple[str, ...] = ()
    n_s: int = 0
    n_d: int = 0
    n_junc: int = 0
    _pipe_pos: dict = field(default_factory=dict, repr=False, compare=False)
    _node_pos: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._pipe_pos.update({p.id: i for i, p in enumerate(self.pipes)})
        self._node_pos.update({n.id: j for j, n in enumerate(self.nodes)})

    @property
    def N(self) -> int:
        return len(self.pipes)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_c(self) -> int:
        return len(self.consumers)

    def pipe_index(self, pipe_id: str) -> int:
        return self._pipe_pos[pipe_id]

    def node_index(self, node_id: str) -> int:
        return self._node_pos[node_id]

    def consumer_pipes(self) -> list[tuple[int, int]]:
        """(inlet pipe index, outlet pipe index) per consumer."""
        return [(self.pipe_index(c.pipe_in), self.pipe_index(c.pipe_out)) for c in self.consumers]

    def supply_side(self) -> np.ndarray:
        """Boolean mask of pipes reachable from the plant without crossing a consumer."""
        mask = np.zeros(self.N, dtype=bool)
        mask[0] = True
        outgoing = _outgoing(self.pipes)
        # pipes are topologically ordered, one forward sweep suffices
        for i, p in enumerate(self.pipes):
            if mask[i]:
                for j in outgoing.get(p.head, ()):
                    mask[self.pipe_index(self.pipes[j].id)] = True
        return mask


def _outgoing(pipes: Sequence[Pipe]) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    for i, p in enumerate(pipes):
        out.setdefault(p.tail, []).append(i)
    return out


def _incoming(pipes: Sequence[Pipe]) -> dict[str, list[int]]:
    inc: dict[str, list[int]] = {}
    for i, p in enumerate(pipes):
        inc.setdefault(p.head, []).append(i)
    return inc


class _DisjointSet:
    def __init__(self, items):
        self.parent = {x: x for x in items}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[ra] = rb
        return True


def _insert_virtual_pipes(nodes, pipes, consumers):
    kinds = {n.id: n.kind for n in nodes}
    inc, out = _incoming(pipes), _outgoing(pipes)
    nodes, pipes, consumers = list(nodes), list(pipes), list(consumers)
    virtual = []
    for pos, node in enumerate(list(nodes)):
        deg = len(inc.get(node.id, ())) + len(out.get(node.id, ()))
        if node.kind is NodeKind.INTERIOR or deg <= 1:
            continue
        attached = pipes[(out if node.kind is NodeKind.SUPPLY else inc)[node.id][0]].params
        params = PipeParams(
            length=VIRTUAL_LENGTH,
            diameter=attached.diameter,
            roughness=attached.roughness,
            heat_transfer=0.0,
            height_diff=0.0,
            n_seg=VIRTUAL_SEGMENTS,
            friction=attached.friction,
        )
        new_id = node.id + VIRTUAL_SUFFIX
        if new_id in kinds:
            raise TopologyError(f"cannot insert virtual node {new_id!r}: id taken")
        kinds[new_id] = node.kind
        nodes[pos] = Node(node.id, NodeKind.INTERIOR)
        nodes.append(Node(new_id, node.kind))
        if node.kind is NodeKind.SUPPLY:
            pipes.append(Pipe(new_id, new_id, node.id, params, virtual=True))
            consumers = [
                replace(c, pipe_out=new_id) if _tail_of(pipes, c.pipe_out) == node.id else c
                for c in consumers
            ]
        else:
            pipes.append(Pipe(new_id, node.id, new_id, params, virtual=True))
            consumers = [
                replace(c, pipe_in=new_id) if _head_of(pipes, c.pipe_in) == node.id else c
                for c in consumers
            ]
        virtual.append(new_id)
    return nodes, pipes, consumers, virtual


def _tail_of(pipes, pid):
    return next(p.tail for p in pipes if p.id == pid)


def _head_of(pipes, pid):
    return next(p.head for p in pipes if p.id == pid)


def validate_and_order(raw: RawNetwork) -> NetworkModel:
    """Validate ``raw`` and renumber pipes and nodes in direction-following order.

    Boundary nodes attached to more than one pipe receive a short adiabatic
    virtual pipe.  Pipe order is a Kahn topological sort over pipe
    succession at junctions, ties broken by input position, with the plant
    supply pipe first and the plant return pipe last.
    """
    if not raw.pipes:
        raise TopologyError("network has no pipes")
    _check_unique([n.id for n in raw.nodes], "node")
    _check_unique([p.id for p in raw.pipes], "pipe")
    _check_unique([c.id for c in raw.consumers], "consumer")
    kinds = {n.id: n.kind for n in raw.nodes}
    for p in raw.pipes:
        for end in (p.tail, p.head):
            if end not in kinds:
                raise TopologyError(f"pipe {p.id!r} references unknown node {end!r}")
        if p.tail == p.head:
            raise NotATreeError(f"pipe {p.id!r} is a self-loop")
    pipe_ids = {p.id for p in raw.pipes}
    for c in raw.consumers:
        for pid in (c.pipe_in, c.pipe_out):
            if pid not in pipe_ids:
                raise DanglingConsumerError(f"consumer {c.id!r} references missing pipe {pid!r}")
    for p in raw.pipes:
        if kinds[p.head] is NodeKind.SUPPLY:
            raise TopologyError(f"pipe {p.id!r} enters supply node {p.head!r}")
        if kinds[p.tail] is NodeKind.DEMAND:
            raise TopologyError(f"pipe {p.id!r} leaves demand node {p.tail!r}")

    n_input = len(raw.pipes)
    nodes, pipes, consumers, virtual = _insert_virtual_pipes(raw.nodes, raw.pipes, raw.consumers)
    kinds = {n.id: n.kind for n in nodes}
    inc, out = _incoming(pipes), _outgoing(pipes)
    by_id = {p.id: p for p in pipes}

    # consumers sit between a demand node and a supply node
    demand_host, supply_host = {}, {}
    for c in consumers:
        head, tail = by_id[c.pipe_in].head, by_id[c.pipe_out].tail
        if kinds[head] is not NodeKind.DEMAND or kinds[tail] is not NodeKind.SUPPLY:
            raise DanglingConsumerError(
                f"consumer {c.id!r} must sit between a demand node and a supply node"
            )
        if c.pipe_in == c.pipe_out:
            raise DanglingConsumerError(f"consumer {c.id!r} uses one pipe as inlet and outlet")
        if head in demand_host or tail in supply_host:
            raise TopologyError(f"consumer {c.id!r} shares a boundary node with another consumer")
        demand_host[head], supply_host[tail] = c.id, c.id

    free_supply = [n.id for n in nodes if n.kind is NodeKind.SUPPLY and n.id not in supply_host]
    free_demand = [n.id for n in nodes if n.kind is NodeKind.DEMAND and n.id not in demand_host]
    if len(free_supply) != 1 or len(free_demand) != 1:
        raise MultiplePlantsError(
            f"expected exactly one plant, found {len(free_supply)} free supply and "
            f"{len(free_demand)} free demand nodes"
        )
    plant_supply, plant_demand = free_supply[0], free_demand[0]

    for n in nodes:
        n_in, n_out = len(inc.get(n.id, ())), len(out.get(n.id, ()))
        if n_in + n_out == 0:
            raise NotATreeError(f"node {n.id!r} is isolated")
        if n.kind is NodeKind.INTERIOR and (n_in == 0 or n_out == 0):
            raise TopologyError(f"interior node {n.id!r} needs incoming and outgoing pipes")

    # directed cycles over pipes plus consumer links
    succ = {n.id: [] for n in nodes}
    for p in pipes:
        succ[p.tail].append(p.head)
    for c in consumers:
        succ[by_id[c.pipe_in].head].append(by_id[c.pipe_out].tail)
    if _has_directed_cycle(succ):
        raise CycleError("network contains a directed cycle")

    forest = _DisjointSet(kinds)
    for p in pipes:
        if not forest.union(p.tail, p.head):
            raise NotATreeError(f"pipe {p.id!r} closes an undirected loop")
    for c in consumers:
        forest.union(by_id[c.pipe_in].head, by_id[c.pipe_out].tail)
    forest.union(plant_demand, plant_supply)
    if len({forest.find(x) for x in kinds}) != 1:
        raise NotATreeError("network is disconnected")

    order = _direction_following_order(pipes, kinds, out, inc[plant_demand][0], out[plant_supply][0])
    ordered = tuple(pipes[i] for i in order)

    consumer_supply = [by_id[c.pipe_out].tail for c in consumers]
    consumer_demand = [by_id[c.pipe_in].head for c in consumers]
    interior = [n.id for n in nodes if n.kind is NodeKind.INTERIOR]
    node_order = [plant_supply, *consumer_supply, *interior, *consumer_demand, plant_demand]
    return NetworkModel(
        constants=raw.constants,
        nodes=tuple(Node(i, kinds[i]) for i in node_order),
        pipes=ordered,
        consumers=tuple(consumers),
        plant=raw.plant,
        permutation=tuple(order),
        virtual_pipes=tuple(virtual),
        n_s=1 + len(consumers),
        n_d=1 + len(consumers),
        n_junc=len(interior),
    )


def _check_unique(ids, what):
    seen = set()
    for i in ids:
        if i in seen:
            raise TopologyError(f"duplicate {what} id {i!r}")
        seen.add(i)


def _has_directed_cycle(succ: dict[str, list[str]]) -> bool:
    indeg = {v: 0 for v in succ}
    for v in succ:
        for w in succ[v]:
            indeg[w] += 1
    stack = [v for v, d in indeg.items() if d == 0]
    seen = 0
    while stack:
        v = stack.pop()
        seen += 1
        for w in succ[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                stack.append(w)
    return seen != len(succ)


def _direction_following_order(pipes, kinds, out, last, first) -> list[int]:
    n = len(pipes)
    succ = [[] for _ in range(n)]
    indeg = [0] * n
    for i, p in enumerate(pipes):
        if kinds[p.head] is NodeKind.INTERIOR:
            for j in out[p.head]:
                succ[i].append(j)
                indeg[j] += 1

    def key(i):
        return (i == last, i != first, i)

    heap = [key(i) for i in range(n) if indeg[i] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        i = heapq.heappop(heap)[2]
        order.append(i)
        for j in succ[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                heapq.heappush(heap, key(j))
    if len(order) != n:
        raise CycleError("pipe succession contains a cycle")
    return order


class Incidence(NamedTuple):
    full: np.ndarray
    plus: np.ndarray
    minus: np.ndarray
    reduced: np.ndarray


def incidence_matrix(model: NetworkModel) -> Incidence:
    """Node-by-pipe incidence: +1 where a pipe leaves a node, -1 where it enters."""
    inc = np.zeros((model.n_nodes, model.N))
    for i, p in enumerate(model.pipes):
        inc[model.node_index(p.tail), i] = 1.0
        inc[model.node_index(p.head), i] = -1.0
    rows = slice(model.n_s, model.n_s + model.n_junc)
    return Incidence(inc, np.maximum(inc, 0.0), np.minimum(inc, 0.0), inc[rows].copy())


def consumer_matrices(model: NetworkModel) -> tuple[np.ndarray, np.ndarray]:
    """Selectors of each consumer's inlet pipe (C1) and outlet pipe (C2)."""
    c1 = np.zeros((model.n_c, model.N))
    c2 = np.zeros((model.n_c, model.N))
    for k, (i_in, i_out) in enumerate(model.consumer_pipes()):
        c1[k, i_in] = 1.0
        c2[k, i_out] = 1.0
    return c1, c2
