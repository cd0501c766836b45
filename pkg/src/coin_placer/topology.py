"""COIN/MEC network graph, hop distances and the placement-decision catalog.

The default network has two COIN layers feeding a single MEC server:

- 8 lower-layer COINs (5e8 cycles/s), each hosting one access point,
- 4 upper-layer COINs (1e9 cycles/s), fully meshed, two lower COINs each,
- 1 MEC (1e10 cycles/s) linked to every upper COIN.
"""

from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

__all__ = [
    "NodeKind",
    "ComputeNode",
    "Topology",
    "HopMatrix",
    "PO",
    "FO",
    "Single",
    "Decision",
    "CatalogMode",
    "DecisionCatalog",
    "DisconnectedGraph",
    "TopologyError",
    "build_default_topology",
    "hop_matrix",
    "decision_catalog",
    "validate",
    "topology_to_dict",
    "topology_from_dict",
    "load_topology",
    "save_topology",
]

LOWER_CAPACITY = 5e8
UPPER_CAPACITY = 1e9
MEC_CAPACITY = 1e10


class TopologyError(ValueError):
    """Raised for malformed topology input."""


class DisconnectedGraph(TopologyError):
    """Raised when two nodes of a topology cannot reach each other."""


class NodeKind(str, enum.Enum):
    LOWER_COIN = "lower_coin"
    UPPER_COIN = "upper_coin"
    MEC = "mec"
    ACCESS_POINT = "access_point"

    @property
    def is_coin(self) -> bool:
        return self in (NodeKind.LOWER_COIN, NodeKind.UPPER_COIN)

    @property
    def computes(self) -> bool:
        return self is not NodeKind.ACCESS_POINT


@dataclass(frozen=True)
class ComputeNode:
    id: int
    kind: NodeKind
    capacity: float  # CPU cycles per second


@dataclass(frozen=True)
class Topology:
    nodes: tuple[ComputeNode, ...]
    links: frozenset[tuple[int, int]]
    ap_attachment: dict[int, int] = field(hash=False)

    def __post_init__(self) -> None:
        # Links are stored with the smaller id first so equality is order-free.
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(
            self, "links", frozenset((min(a, b), max(a, b)) for a, b in self.links)
        )
        object.__setattr__(self, "ap_attachment", dict(self.ap_attachment))

    def node(self, node_id: int) -> ComputeNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(f"unknown node {node_id}")

    def capacity(self, node_id: int) -> float:
        return self.node(node_id).capacity

    def ids(self, *kinds: NodeKind) -> list[int]:
        return sorted(n.id for n in self.nodes if not kinds or n.kind in kinds)

    @property
    def compute_ids(self) -> list[int]:
        """Candidate executors (every COIN and MEC), sorted by id."""
        return sorted(n.id for n in self.nodes if n.kind.computes)

    @property
    def ap_ids(self) -> list[int]:
        return self.ids(NodeKind.ACCESS_POINT)

    def neighbors(self, node_id: int) -> list[int]:
        out = [b for a, b in self.links if a == node_id]
        out += [a for a, b in self.links if b == node_id]
        return sorted(out)

    def parent_upper(self, lower_id: int) -> int | None:
        """Lowest-id upper COIN linked to ``lower_id`` (None when there is none)."""
        ups = [
            n for n in self.neighbors(lower_id) if self.node(n).kind is NodeKind.UPPER_COIN
        ]
        return min(ups) if ups else None


class HopMatrix:
    """Shortest-path hop counts between every pair of topology nodes."""

    def __init__(self, node_ids: Sequence[int], hops: np.ndarray):
        self.node_ids = list(node_ids)
        self.index = {n: i for i, n in enumerate(self.node_ids)}
        self.hops = hops

    def __call__(self, a: int, b: int) -> int:
        try:
            return int(self.hops[self.index[a], self.index[b]])
        except KeyError as exc:
            raise KeyError(f"unknown node {exc.args[0]}") from None


# --- decisions -----------------------------------------------------------


@dataclass(frozen=True, order=True)
class PO:
    """Partial offload: the task is split across two COINs."""

    c0: int
    c1: int

    @property
    def nodes(self) -> tuple[int, ...]:
        return (self.c0, self.c1)

    def __str__(self) -> str:
        return f"PO({self.c0},{self.c1})"


@dataclass(frozen=True, order=True)
class FO:
    """Full offload of the whole task to a MEC server."""

    e: int

    @property
    def nodes(self) -> tuple[int, ...]:
        return (self.e,)

    def __str__(self) -> str:
        return f"FO({self.e})"


@dataclass(frozen=True, order=True)
class Single:
    """Whole task on one COIN (only used when splitting is disabled)."""

    c: int

    @property
    def nodes(self) -> tuple[int, ...]:
        return (self.c,)

    def __str__(self) -> str:
        return f"Single({self.c})"


Decision = Union[PO, FO, Single]


def decision_from_str(text: str) -> Decision:
    name, _, rest = text.partition("(")
    args = [int(x) for x in rest.rstrip(")").split(",")]
    return {"PO": PO, "FO": FO, "Single": Single}[name](*args)


class CatalogMode(str, enum.Enum):
    SPLIT = "split"
    NOSPLIT = "nosplit"


@dataclass(frozen=True)
class DecisionCatalog:
    decisions: tuple[Decision, ...]
    mode: CatalogMode

    def __post_init__(self) -> None:
        if len(set(self.decisions)) != len(self.decisions):
            raise TopologyError("decision catalog contains duplicates")

    def __len__(self) -> int:
        return len(self.decisions)

    def __getitem__(self, i: int) -> Decision:
        return self.decisions[i]

    def __iter__(self):
        return iter(self.decisions)

    def index(self, d: Decision) -> int:
        return self.decisions.index(d)


# --- operations ----------------------------------------------------------


def build_default_topology() -> Topology:
    lowers = list(range(0, 8))
    uppers = list(range(8, 12))
    mec = 12
    aps = list(range(13, 21))
    nodes = [ComputeNode(i, NodeKind.LOWER_COIN, LOWER_CAPACITY) for i in lowers]
    nodes += [ComputeNode(i, NodeKind.UPPER_COIN, UPPER_CAPACITY) for i in uppers]
    nodes.append(ComputeNode(mec, NodeKind.MEC, MEC_CAPACITY))
    nodes += [ComputeNode(i, NodeKind.ACCESS_POINT, 0.0) for i in aps]

    links = set()
    for i, a in enumerate(uppers):
        links.add((a, mec))
        for b in uppers[i + 1 :]:
            links.add((a, b))
    for j, low in enumerate(lowers):
        links.add((low, uppers[j // 2]))
    attachment = {}
    for ap, low in zip(aps, lowers):
        links.add((ap, low))
        attachment[ap] = low
    return Topology(tuple(nodes), frozenset(links), attachment)


def hop_matrix(t: Topology) -> HopMatrix:
    """Unweighted shortest paths (BFS) over every node, APs included."""
    ids = [n.id for n in t.nodes]
    index = {n: i for i, n in enumerate(ids)}
    adj: dict[int, list[int]] = {n: [] for n in ids}
    for a, b in t.links:
        adj[a].append(b)
        adj[b].append(a)
    hops = np.full((len(ids), len(ids)), -1, dtype=np.int64)
    for src in ids:
        row = hops[index[src]]
        row[index[src]] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if row[index[v]] < 0:
                    row[index[v]] = row[index[u]] + 1
                    queue.append(v)
    if (hops < 0).any():
        i, j = np.argwhere(hops < 0)[0]
        raise DisconnectedGraph(f"no path between nodes {ids[i]} and {ids[j]}")
    return HopMatrix(ids, hops)


def decision_catalog(
    t: Topology,
    mode: CatalogMode | str = CatalogMode.SPLIT,
    pairs: Iterable[tuple[int, int]] | None = None,
) -> DecisionCatalog:
    """Ordered placement choices; the list index is the classification label.

    In split mode each lower COIN is paired with its upper COIN (override with
    ``pairs``); in no-split mode every COIN is a single-node choice. MEC
    full-offload decisions always come last.
    """
    mode = CatalogMode(mode)
    mecs = t.ids(NodeKind.MEC)
    if mode is CatalogMode.SPLIT:
        if pairs is None:
            pairs = []
            for low in t.ids(NodeKind.LOWER_COIN):
                up = t.parent_upper(low)
                if up is not None:
                    pairs.append((low, up))
        coin = [PO(a, b) for a, b in sorted(set(pairs))]
    else:
        coin = [Single(c) for c in t.ids(NodeKind.LOWER_COIN, NodeKind.UPPER_COIN)]
    return DecisionCatalog(tuple(coin) + tuple(FO(e) for e in mecs), mode)


def validate(t: Topology) -> list[str]:
    """One human-readable entry per violated topology invariant."""
    problems: list[str] = []
    ids = [n.id for n in t.nodes]
    if len(set(ids)) != len(ids):
        problems.append("DuplicateNodeId: node ids must be unique")
    known = set(ids)
    kinds = {n.id: n.kind for n in t.nodes}
    for n in t.nodes:
        if n.kind.computes and not n.capacity > 0:
            problems.append(f"NonPositiveCapacity: node {n.id} has capacity {n.capacity}")
        if n.kind is NodeKind.ACCESS_POINT and n.capacity != 0:
            problems.append(f"ApCapacity: access point {n.id} must have capacity 0")
    for a, b in sorted(t.links):
        if a == b:
            problems.append(f"SelfLoopLink: link ({a},{b})")
        elif a not in known or b not in known:
            problems.append(f"UnknownLinkEndpoint: link ({a},{b})")
    for ap in sorted(i for i in ids if kinds[i] is NodeKind.ACCESS_POINT):
        if ap not in t.ap_attachment:
            problems.append(f"UnattachedAp: access point {ap}")
    for ap, low in sorted(t.ap_attachment.items()):
        if kinds.get(ap) is not NodeKind.ACCESS_POINT:
            problems.append(f"InvalidApAttachment: {ap} is not an access point")
        elif kinds.get(low) is not NodeKind.LOWER_COIN:
            problems.append(f"InvalidApAttachment: AP {ap} attached to non-lower node {low}")
        elif (min(ap, low), max(ap, low)) not in t.links:
            problems.append(f"InvalidApAttachment: AP {ap} has no link to {low}")
    compute = [i for i in ids if kinds[i].computes]
    if compute and not _connected(compute, t.links):
        problems.append("DisconnectedGraph: compute nodes are not connected")
    return problems


def _connected(members: list[int], links: Iterable[tuple[int, int]]) -> bool:
    allowed = set(members)
    adj: dict[int, list[int]] = {n: [] for n in members}
    for a, b in links:
        if a in allowed and b in allowed and a != b:
            adj[a].append(b)
            adj[b].append(a)
    seen = {members[0]}
    stack = [members[0]]
    while stack:
        for v in adj[stack.pop()]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == len(allowed)


# --- JSON file format ----------------------------------------------------


def topology_to_dict(t: Topology) -> dict:
    return {
        "nodes": [{"id": n.id, "kind": n.kind.value, "capacity": n.capacity} for n in t.nodes],
        "links": [list(link) for link in sorted(t.links)],
        "ap_attachment": {str(ap): low for ap, low in sorted(t.ap_attachment.items())},
    }


def topology_from_dict(data: dict) -> Topology:
    try:
        nodes = tuple(
            ComputeNode(int(n["id"]), NodeKind(n["kind"]), float(n["capacity"]))
            for n in data["nodes"]
        )
        links = frozenset((int(a), int(b)) for a, b in data["links"])
        attachment = {int(ap): int(low) for ap, low in data["ap_attachment"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise TopologyError(f"malformed topology document: {exc}") from exc
    return Topology(nodes, links, attachment)


def save_topology(t: Topology, path) -> None:
    with open(path, "w") as fh:
        json.dump(topology_to_dict(t), fh, indent=2)


def load_topology(path) -> Topology:
    with open(path) as fh:
        return topology_from_dict(json.load(fh))
