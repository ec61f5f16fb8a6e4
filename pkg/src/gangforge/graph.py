"""Attributed graph model, neighborhood queries, budgets and injection."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

CONTINUOUS = "continuous"
DISCRETE = "discrete"
SPLITS = ("train", "val", "test")

DEFAULT_RHO = 0.1
DEFAULT_XI = 0.5
DEFAULT_P = 0.4


class GraphError(ValueError):
    """Raised for malformed graphs, node indices or injection plans."""


class ConfigError(ValueError):
    """Raised for invalid numeric parameters."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _canonical_edges(edges, num_nodes: int) -> np.ndarray:
    arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    arr = arr.reshape(-1, 2)
    if arr.min() < 0 or arr.max() >= num_nodes:
        raise GraphError("edge endpoint out of range")
    if np.any(arr[:, 0] == arr[:, 1]):
        raise GraphError("self-loop in edge set")
    arr = np.sort(arr, axis=1)
    uniq = np.unique(arr, axis=0)
    if len(uniq) != len(arr):
        raise GraphError("duplicate edge in edge set")
    return uniq


@dataclass(frozen=True, eq=False)
class AttributedGraph:
    """Undirected, unweighted attributed graph with optional fraud labels.

    ``edges`` is an (E, 2) array of pairs ``u < v`` in lexicographic order.
    Labels use 1 for fraud, 0 for benign and -1 for unlabeled nodes.
    """

    num_nodes: int
    edges: np.ndarray
    attributes: np.ndarray
    attribute_kind: str = CONTINUOUS
    labels: np.ndarray | None = None

    def __post_init__(self):
        n = int(self.num_nodes)
        if n < 0:
            raise GraphError("num_nodes must be non-negative")
        object.__setattr__(self, "num_nodes", n)
        object.__setattr__(self, "edges", _readonly(_canonical_edges(self.edges, n)))
        x = np.array(self.attributes, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != n:
            raise GraphError(f"attribute matrix must have {n} rows, got shape {x.shape}")
        if self.attribute_kind not in (CONTINUOUS, DISCRETE):
            raise GraphError(f"unknown attribute_kind {self.attribute_kind!r}")
        if self.attribute_kind == DISCRETE and not np.isin(x, (0.0, 1.0)).all():
            raise GraphError("discrete attributes must be 0/1")
        object.__setattr__(self, "attributes", _readonly(x))
        if self.labels is not None:
            y = np.array(self.labels, dtype=np.int64)
            if y.shape != (n,):
                raise GraphError(f"labels must have length {n}")
            if not np.isin(y, (-1, 0, 1)).all():
                raise GraphError("labels must be in {0, 1} (or -1 for unlabeled)")
            object.__setattr__(self, "labels", _readonly(y))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def attr_dim(self) -> int:
        return self.attributes.shape[1]

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        n = self.num_nodes
        u, v = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * len(u), dtype=np.int8)
        adj = sp.csr_matrix((data, (np.r_[u, v], np.r_[v, u])), shape=(n, n))
        adj.sort_indices()
        return adj

    @cached_property
    def degrees(self) -> np.ndarray:
        return _readonly(np.diff(self.adjacency.indptr).astype(np.int64))

    def neighbors(self, v: int) -> np.ndarray:
        adj = self.adjacency
        return adj.indices[adj.indptr[v]:adj.indptr[v + 1]]

    def check_nodes(self, nodes: Iterable[int]) -> np.ndarray:
        arr = np.asarray(sorted(set(int(v) for v in nodes)), dtype=np.int64)
        if arr.size and (arr[0] < 0 or arr[-1] >= self.num_nodes):
            raise GraphError(f"node index out of range for graph with {self.num_nodes} nodes")
        return arr

    def same_as(self, other: "AttributedGraph") -> bool:
        if self.num_nodes != other.num_nodes or self.attribute_kind != other.attribute_kind:
            return False
        if not np.array_equal(self.edges, other.edges):
            return False
        if not np.array_equal(self.attributes, other.attributes):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)


@dataclass(frozen=True)
class TargetSet:
    """One fraud gang with its attack budgets."""

    set_id: int
    members: tuple[int, ...]
    closed_neighborhood_size: int
    node_budget: int
    edge_budget: int
    split: str = "test"

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(sorted(int(v) for v in self.members)))
        if not self.members:
            raise GraphError("target set must be nonempty")
        if self.split not in SPLITS:
            raise GraphError(f"unknown split {self.split!r}")
        if self.node_budget < 1:
            raise GraphError("node budget must be >= 1")
        if self.edge_budget < self.node_budget:
            raise GraphError("edge budget must be >= node budget")
        if self.closed_neighborhood_size < len(self.members):
            raise GraphError("closed neighborhood smaller than target set")

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True, eq=False)
class GraphStatistics:
    mean_closed_neighborhood: float
    mean_degree: float
    attr_min: np.ndarray
    attr_max: np.ndarray
    mean_nonzero_attrs: int


@dataclass(frozen=True, eq=False)
class InjectionPlan:
    """Injected nodes, their attributes and adversarial edges.

    Attack nodes are indexed ``0..num_attack_nodes-1`` locally; once applied
    they become nodes ``n + i`` of the perturbed graph. ``original_edges``
    holds ``(attack_index, original_node)`` pairs and ``attack_edges`` holds
    ``(i, j)`` pairs of attack indices with ``i < j``.
    """

    attributes: np.ndarray
    original_edges: tuple[tuple[int, int], ...] = ()
    attack_edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        x = np.array(self.attributes, dtype=np.float64)
        if x.ndim != 2:
            raise GraphError("attack attributes must be a 2-d matrix")
        object.__setattr__(self, "attributes", _readonly(x))
        object.__setattr__(
            self, "original_edges", tuple(sorted((int(i), int(v)) for i, v in self.original_edges))
        )
        object.__setattr__(
            self,
            "attack_edges",
            tuple(sorted((min(int(i), int(j)), max(int(i), int(j))) for i, j in self.attack_edges)),
        )

    @property
    def num_attack_nodes(self) -> int:
        return self.attributes.shape[0]

    @property
    def num_edges(self) -> int:
        return len(self.original_edges) + len(self.attack_edges)

    def attack_degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_attack_nodes, dtype=np.int64)
        for i, _ in self.original_edges:
            deg[i] += 1
        for i, j in self.attack_edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def global_edges(self, num_original: int) -> np.ndarray:
        rows = [(v, num_original + i) for i, v in self.original_edges]
        rows += [(num_original + i, num_original + j) for i, j in self.attack_edges]
        return np.asarray(rows, dtype=np.int64).reshape(-1, 2)

    def equals(self, other: "InjectionPlan", atol: float = 0.0) -> bool:
        return (
            self.attributes.shape == other.attributes.shape
            and np.allclose(self.attributes, other.attributes, rtol=0.0, atol=atol)
            and self.original_edges == other.original_edges
            and self.attack_edges == other.attack_edges
        )


def k_hop_neighbors(graph: AttributedGraph, targets: Iterable[int], K: int) -> set[int]:
    """Nodes within 1..K hops of any target, excluding the targets."""
    if K < 1:
        raise ConfigError("K must be >= 1")
    seeds = graph.check_nodes(targets)
    if seeds.size == 0:
        return set()
    adj = graph.adjacency
    reached = np.zeros(graph.num_nodes, dtype=bool)
    reached[seeds] = True
    frontier = seeds
    for _ in range(K):
        if frontier.size == 0:
            break
        nxt = np.unique(adj[frontier].indices)
        nxt = nxt[~reached[nxt]]
        reached[nxt] = True
        frontier = nxt
    reached[seeds] = False
    return set(np.flatnonzero(reached).tolist())


def closed_neighborhood_size(graph: AttributedGraph, targets: Iterable[int]) -> int:
    members = set(int(t) for t in targets)
    return len(k_hop_neighbors(graph, members, 1) | members)


def target_mean_degree(graph: AttributedGraph, targets: Iterable[int]) -> float:
    idx = graph.check_nodes(targets)
    return float(graph.degrees[idx].mean())


def mean_degree(graph: AttributedGraph) -> float:
    return 2.0 * graph.num_edges / graph.num_nodes


def compute_node_budget(B: int, mean_B: float, rho: float) -> int:
    if not 0 < rho <= 1:
        raise ConfigError(f"rho must be in (0, 1], got {rho}")
    if B < 1 or mean_B <= 0:
        raise ConfigError("B must be >= 1 and mean_B > 0")
    return max(math.floor(rho * min(B, mean_B) + 0.5), 1)


def compute_edge_budget(delta: int, target_mean_degree: float, graph_mean_degree: float, xi: float) -> int:
    if delta < 1:
        raise ConfigError("delta must be >= 1")
    if xi <= 0:
        raise ConfigError(f"xi must be positive, got {xi}")
    per_node = max(math.floor(min(target_mean_degree, xi * graph_mean_degree) + 0.5), 1)
    return delta * per_node


def make_target_sets(
    graph: AttributedGraph,
    groups: Sequence[Iterable[int]],
    splits: Sequence[str],
    rho: float,
    xi: float,
) -> list[TargetSet]:
    """Build target sets with budgets; B-bar is taken over all groups given."""
    if not groups:
        raise ConfigError("at least one target set is required")
    members = [sorted(set(int(v) for v in g)) for g in groups]
    Bs = [closed_neighborhood_size(graph, m) for m in members]
    mean_B = float(np.mean(Bs))
    d_bar = mean_degree(graph)
    out = []
    for set_id, (m, B, split) in enumerate(zip(members, Bs, splits)):
        delta = compute_node_budget(B, mean_B, rho)
        d_T = target_mean_degree(graph, m)
        # isolated gangs still get one edge per attack node
        eta = compute_edge_budget(delta, max(d_T, 1e-12), max(d_bar, 1e-12), xi)
        out.append(TargetSet(set_id, tuple(m), B, delta, eta, split))
    return out


def compute_statistics(graph: AttributedGraph, target_sets: Sequence[TargetSet]) -> GraphStatistics:
    if graph.num_nodes == 0:
        raise GraphError("graph is empty")
    if not target_sets:
        raise ConfigError("mean closed neighborhood is undefined without target sets")
    x = graph.attributes
    nnz = np.count_nonzero(x, axis=1).mean()
    lam = max(int(math.floor(nnz + 0.5)), 1)
    return GraphStatistics(
        mean_closed_neighborhood=float(np.mean([t.closed_neighborhood_size for t in target_sets])),
        mean_degree=mean_degree(graph),
        attr_min=_readonly(x.min(axis=0).copy()),
        attr_max=_readonly(x.max(axis=0).copy()),
        mean_nonzero_attrs=lam,
    )


def validate_plan(graph: AttributedGraph, plan: InjectionPlan, targets: TargetSet | None = None, lam: int | None = None):
    """Raise GraphError naming the first violated plan invariant."""
    n, delta = graph.num_nodes, plan.num_attack_nodes
    if delta < 1:
        raise GraphError("plan must inject at least one attack node")
    if plan.attributes.shape[1] != graph.attr_dim:
        raise GraphError("attack attribute dimension does not match graph")
    if targets is not None:
        if delta > targets.node_budget:
            raise GraphError("node budget exceeded")
        if plan.num_edges > targets.edge_budget:
            raise GraphError("edge budget exceeded")
    seen = set()
    for i, v in plan.original_edges:
        if not 0 <= i < delta:
            raise GraphError(f"attack index {i} out of range")
        if not 0 <= v < n:
            raise GraphError(f"original node {v} out of range")
        if (i, v) in seen:
            raise GraphError("duplicate edge")
        seen.add((i, v))
    for i, j in plan.attack_edges:
        if not (0 <= i < delta and 0 <= j < delta):
            raise GraphError(f"attack index out of range in edge ({i}, {j})")
        if i == j:
            raise GraphError("self-loop")
        if (-1 - i, j) in seen:
            raise GraphError("duplicate edge")
        seen.add((-1 - i, j))
    deg = plan.attack_degrees()
    if np.any(deg == 0):
        raise GraphError(f"dangling attack node {int(np.flatnonzero(deg == 0)[0])}")
    if targets is not None:
        member_set = set(targets.members)
        hit = np.zeros(delta, dtype=bool)
        for i, v in plan.original_edges:
            if v in member_set:
                hit[i] = True
        if not hit.all():
            raise GraphError(f"attack node {int(np.flatnonzero(~hit)[0])} has no edge to a target")
    if graph.attribute_kind == DISCRETE:
        if not np.isin(plan.attributes, (0.0, 1.0)).all():
            raise GraphError("discrete attack attributes must be 0/1")
        if lam is not None and not np.all(plan.attributes.sum(axis=1) == lam):
            raise GraphError(f"discrete attack rows must have exactly {lam} ones")


def apply_injection(graph: AttributedGraph, plan: InjectionPlan, targets: TargetSet | None = None) -> AttributedGraph:
    """Return the perturbed graph with attack nodes appended after index n-1."""
    validate_plan(graph, plan, targets)
    n = graph.num_nodes
    edges = np.vstack([graph.edges, plan.global_edges(n)])
    labels = None
    if graph.labels is not None:
        labels = np.r_[graph.labels, -np.ones(plan.num_attack_nodes, dtype=np.int64)]
    return AttributedGraph(
        n + plan.num_attack_nodes,
        edges,
        np.vstack([graph.attributes, plan.attributes]),
        graph.attribute_kind,
        labels,
    )


def remove_nodes_after(graph: AttributedGraph, n: int) -> AttributedGraph:
    """Drop every node with index >= n together with its incident edges."""
    keep = (graph.edges < n).all(axis=1)
    labels = None if graph.labels is None else graph.labels[:n].copy()
    return AttributedGraph(n, graph.edges[keep], graph.attributes[:n], graph.attribute_kind, labels)


def bfs_distances(graph: AttributedGraph, sources: Iterable[int]) -> dict[int, int]:
    """Plain breadth-first search; reference implementation for tests and locality checks."""
    dist = {int(s): 0 for s in sources}
    queue = deque(dist)
    while queue:
        u = queue.popleft()
        for w in graph.neighbors(u):
            w = int(w)
            if w not in dist:
                dist[w] = dist[u] + 1
                queue.append(w)
    return dist
