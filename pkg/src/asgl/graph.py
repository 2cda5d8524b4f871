"""Skeleton graph, spatio-temporal graph, hop distances and D-bounded neighbourhoods."""

from __future__ import annotations

import functools
import json
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

# bones of the 14-joint body (see pose.JOINT_NAMES); the neck-hip bones stand in for the spine
DEFAULT_BONES = (
    (0, 1),
    (1, 2), (1, 3),
    (2, 4), (3, 5),
    (4, 6), (5, 7),
    (1, 8), (1, 9),
    (8, 10), (9, 11),
    (10, 12), (11, 13),
)

UNBOUNDED = -1  # partition distance sentinel meaning "no limit"


def bfs_distances(num_nodes, edges):
    """All-pairs hop counts; unreachable pairs are -1."""
    adj = [[] for _ in range(num_nodes)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    dist = np.full((num_nodes, num_nodes), -1, dtype=np.int64)
    for src in range(num_nodes):
        row = dist[src]
        row[src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if row[v] < 0:
                    row[v] = row[u] + 1
                    queue.append(v)
    return dist


def _components(dist):
    seen, comps = set(), []
    for i in range(len(dist)):
        if i not in seen:
            comp = sorted(int(j) for j in np.flatnonzero(dist[i] >= 0))
            seen.update(comp)
            comps.append(comp)
    return comps


@dataclass(frozen=True)
class SkeletonGraph:
    num_nodes: int
    edges: tuple  # undirected, each pair stored once with i < j
    distance_table: np.ndarray

    @property
    def adjacency(self):
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=bool)
        for i, j in self.edges:
            a[i, j] = a[j, i] = True
        return a

    @property
    def neighbor_mask(self):
        """Adjacency with self-loops: row i marks the members of Q_i."""
        return self.adjacency | np.eye(self.num_nodes, dtype=bool)

    @property
    def neighbor_sets(self):
        return [tuple(int(j) for j in np.flatnonzero(row)) for row in self.neighbor_mask]


def build_skeleton(edge_list=DEFAULT_BONES, num_nodes=14):
    edges = set()
    for pair in edge_list:
        i, j = (int(v) for v in pair)
        if not (0 <= i < num_nodes and 0 <= j < num_nodes):
            raise ConfigError(f"edge {(i, j)} has a node index outside [0, {num_nodes})")
        if i != j:
            edges.add((min(i, j), max(i, j)))
    edges = tuple(sorted(edges))
    dist = bfs_distances(num_nodes, edges)
    if (dist < 0).any():
        raise ConfigError(f"skeleton graph is disconnected; components: {_components(dist)}")
    return SkeletonGraph(num_nodes=num_nodes, edges=edges, distance_table=dist)


def load_skeleton(path, num_nodes=14):
    with open(path) as fh:
        pairs = json.load(fh)
    return build_skeleton([tuple(p) for p in pairs], num_nodes=num_nodes)


@dataclass(frozen=True)
class SpatioTemporalGraph:
    base: SkeletonGraph
    T: int
    st_edges: tuple
    features: np.ndarray | None = None

    @property
    def num_nodes(self):
        return self.T * self.base.num_nodes

    def node(self, t, j):
        return t * self.base.num_nodes + j


def st_edges(skeleton, T):
    k = skeleton.num_nodes
    edges = [(t * k + i, t * k + j) for t in range(T) for i, j in skeleton.edges]
    edges += [(t * k + j, (t + 1) * k + j) for t in range(T - 1) for j in range(k)]
    return tuple(edges)


def build_st_graph(features, skeleton):
    """Wrap ``features`` of shape (T, k, d) as a spatio-temporal graph."""
    features = np.asarray(features)
    if features.ndim != 3 or features.shape[1] != skeleton.num_nodes:
        raise DimensionError(
            f"features of shape {features.shape} do not match a {skeleton.num_nodes}-node skeleton"
        )
    T = features.shape[0]
    if T < 1:
        raise DimensionError("a spatio-temporal graph needs at least one frame")
    return SpatioTemporalGraph(base=skeleton, T=T, st_edges=st_edges(skeleton, T), features=features)


@functools.lru_cache(maxsize=64)
def _partition_mask(edges, k, T, D):
    dist = bfs_distances(T * k, st_edges_from(edges, k, T))
    if D == UNBOUNDED:
        return dist >= 0
    return (dist >= 0) & (dist <= D)


def st_edges_from(edges, k, T):
    return st_edges(SkeletonGraph(num_nodes=k, edges=edges, distance_table=np.zeros(0)), T)


def partition_mask(skeleton, T, D):
    """Boolean (T*k, T*k) mask: entry (i, j) set iff hop distance <= D.

    ``D = UNBOUNDED`` (or ``None``/``inf``) yields the full reachable set.
    The result is cached per (skeleton, T, D) and must not be mutated.
    """
    if D is None or D == float("inf"):
        D = UNBOUNDED
    D = int(D)
    if D < 0 and D != UNBOUNDED:
        raise ConfigError(f"partition distance must be >= 0, got {D}")
    mask = _partition_mask(skeleton.edges, skeleton.num_nodes, int(T), D)
    mask.flags.writeable = False
    return mask


def partition_neighbors(st_graph, D):
    """Per-node neighbour groups N(i) = {j : d(i, j) <= D} on the spatio-temporal graph."""
    mask = partition_mask(st_graph.base, st_graph.T, D)
    return [tuple(int(j) for j in np.flatnonzero(row)) for row in mask]
