"""Propagation trees: construction, validation and depth arithmetic."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Hashable, Iterable, Optional, Sequence

import numpy as np


class TreeError(ValueError):
    pass


class CycleError(TreeError):
    pass


class MultipleRootError(TreeError):
    pass


class DanglingParentError(TreeError):
    pass


@dataclass(frozen=True)
class Node:
    id: int
    parent: Optional[int]
    text: str
    timestamp: Optional[float] = None


class DepthBucket(str, enum.Enum):
    D1 = "D1"
    D2to5 = "D2to5"
    Dgt5 = "Dgt5"


@dataclass(frozen=True, eq=False)
class PropagationTree:
    """A rooted cascade stored in canonical breadth-first order.

    Node 0 is the source post. Every other node's parent has a smaller
    index, so a single forward pass over ``nodes`` visits parents first.
    """

    event_id: str
    nodes: tuple[Node, ...]
    label: int
    features: Optional[np.ndarray] = field(default=None, repr=False)

    root_index = 0

    def __post_init__(self):
        if not self.nodes:
            raise TreeError("tree has no nodes")
        if self.label not in (0, 1):
            raise TreeError(f"label must be 0 or 1, got {self.label!r}")
        for i, node in enumerate(self.nodes):
            if node.id != i:
                raise TreeError(f"node at position {i} has id {node.id}")
            if i == 0:
                if node.parent is not None:
                    raise MultipleRootError("node 0 must be the root")
            elif node.parent is None:
                raise MultipleRootError(f"node {i} has no parent")
            elif not 0 <= node.parent < i:
                raise TreeError(f"node {i} has parent {node.parent}, not topologically ordered")
        if self.features is not None:
            x = np.asarray(self.features, dtype=float)
            if x.ndim != 2 or x.shape[0] != len(self.nodes):
                raise TreeError(f"features shape {x.shape} does not match {len(self.nodes)} nodes")
            object.__setattr__(self, "features", x)

    @property
    def n(self) -> int:
        return len(self.nodes)

    @cached_property
    def parents(self) -> np.ndarray:
        """Parent index per node, -1 for the root."""
        return np.array([-1 if v.parent is None else v.parent for v in self.nodes], dtype=np.int64)

    @cached_property
    def depths(self) -> np.ndarray:
        d = np.zeros(self.n, dtype=np.int64)
        for i in range(1, self.n):
            d[i] = d[self.parents[i]] + 1
        return d

    @property
    def texts(self) -> list[str]:
        return [v.text for v in self.nodes]

    def with_features(self, features: np.ndarray) -> "PropagationTree":
        return replace(self, features=np.asarray(features, dtype=float))


def _id_key(raw_id: Hashable) -> tuple:
    if isinstance(raw_id, (int, np.integer)):
        return (0, int(raw_id), "")
    s = str(raw_id)
    if s.lstrip("-").isdigit():
        return (0, int(s), s)
    return (1, 0, s)


def build_tree(
    event_id: str,
    label: int,
    raw_nodes: Iterable[Sequence[Any]],
) -> PropagationTree:
    """Validate raw ``(id, parent, text[, timestamp])`` records and canonicalize.

    Raw ids may be any hashable (tweet ids, strings); they are replaced by
    breadth-first positions, siblings ordered by original id.
    """
    records = [tuple(r) for r in raw_nodes]
    if not records:
        raise TreeError(f"event {event_id}: no nodes")

    by_id: dict = {}
    for rec in records:
        if len(rec) not in (3, 4):
            raise TreeError(f"event {event_id}: node record must have 3 or 4 fields, got {rec!r}")
        rid = rec[0]
        if rid in by_id:
            raise TreeError(f"event {event_id}: duplicate node id {rid!r}")
        by_id[rid] = rec

    roots = []
    children: dict = {rid: [] for rid in by_id}
    for rid, rec in by_id.items():
        parent = rec[1]
        if parent is None:
            roots.append(rid)
        elif parent not in by_id:
            raise DanglingParentError(f"event {event_id}: node {rid!r} has unknown parent {parent!r}")
        else:
            children[parent].append(rid)

    if len(roots) > 1:
        raise MultipleRootError(f"event {event_id}: {len(roots)} roots")
    if not roots:
        raise CycleError(f"event {event_id}: no root, parent links form a cycle")

    order = []
    position = {}
    queue = deque([roots[0]])
    while queue:
        rid = queue.popleft()
        position[rid] = len(order)
        order.append(rid)
        queue.extend(sorted(children[rid], key=_id_key))

    if len(order) != len(by_id):
        raise CycleError(f"event {event_id}: {len(by_id) - len(order)} nodes unreachable from root (cycle)")

    nodes = []
    for rid in order:
        rec = by_id[rid]
        parent = None if rec[1] is None else position[rec[1]]
        ts = float(rec[3]) if len(rec) == 4 and rec[3] is not None else None
        nodes.append(Node(id=position[rid], parent=parent, text=str(rec[2] or ""), timestamp=ts))
    return PropagationTree(event_id=str(event_id), nodes=tuple(nodes), label=int(label))


def depth(tree: PropagationTree) -> int:
    return int(tree.depths.max())


def nodes_at_depth(tree: PropagationTree, t: int) -> frozenset[int]:
    if not 0 <= t <= depth(tree):
        raise ValueError(f"depth {t} outside [0, {depth(tree)}]")
    return frozenset(int(i) for i in np.flatnonzero(tree.depths == t))


def depth_bucket(d: int) -> DepthBucket:
    if d < 1:
        raise ValueError(f"depth buckets start at 1, got {d}")
    if d == 1:
        return DepthBucket.D1
    if d <= 5:
        return DepthBucket.D2to5
    return DepthBucket.Dgt5


def canonical_order(parents: Sequence[int]) -> list[int]:
    """Breadth-first order of a parent array (root has parent -1), siblings by index."""
    children: list[list[int]] = [[] for _ in parents]
    root = None
    for i, p in enumerate(parents):
        if p < 0:
            root = i
        else:
            children[p].append(i)
    order = [root]
    for v in order:
        order.extend(children[v])
    return order
