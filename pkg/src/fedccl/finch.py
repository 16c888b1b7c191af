"""First-neighbour hierarchical clustering (FINCH) with cosine similarity.

Each point is linked to its most similar other point; connected components
of that graph form a partition.  Cluster means are then clustered the same
way, and the recursion continues until the cluster count stops changing or a
single cluster is left.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .numerics import cosine_matrix

# Similarities closer than this count as ties; the lowest index then wins.
# Keeps neighbour choice independent of BLAS summation order on duplicates.
TIE_TOL = 1e-12


@dataclass
class ClusterPartition:
    assignment: np.ndarray
    k: int
    level: int = 0

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == cluster)


@dataclass
class FinchResult:
    levels: list[ClusterPartition] = field(default_factory=list)

    @property
    def final(self) -> ClusterPartition:
        return self.levels[-1]

    @property
    def last_nontrivial(self) -> ClusterPartition:
        """Coarsest level that still has more than one cluster (or level 0)."""
        for part in reversed(self.levels):
            if part.k > 1:
                return part
        return self.levels[0]


def _as_matrix(vectors) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D array of vectors, got shape {x.shape}")
    return x


def first_neighbors(vectors) -> np.ndarray:
    """Index of each vector's most cosine-similar other vector."""
    x = _as_matrix(vectors)
    n = len(x)
    if n < 2:
        raise ValueError("first neighbours need at least 2 vectors")
    sim = cosine_matrix(x, x)
    np.fill_diagonal(sim, -np.inf)
    best = sim.max(axis=1, keepdims=True)
    # argmax over a boolean mask picks the first (lowest) tied index
    return np.argmax(sim >= best - TIE_TOL, axis=1)


def relabel_first_appearance(labels: np.ndarray) -> tuple[np.ndarray, int]:
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return rank[inverse.ravel()], len(order)


def adjacency_partition(neighbors, level: int = 0) -> ClusterPartition:
    """Connected components of the first-neighbour graph.

    Linking every point to its first neighbour already joins two points
    that share a first neighbour, so the three adjacency clauses reduce to
    a single undirected edge ``(i, neighbors[i])`` per point.
    """
    nb = np.asarray(neighbors, dtype=np.intp)
    n = len(nb)
    graph = coo_matrix((np.ones(n), (np.arange(n), nb)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    assignment, k = relabel_first_appearance(labels)
    return ClusterPartition(assignment, k, level)


def cluster_means(vectors, partition: ClusterPartition) -> np.ndarray:
    x = _as_matrix(vectors)
    sums = np.zeros((partition.k, x.shape[1]))
    np.add.at(sums, partition.assignment, x)
    counts = np.bincount(partition.assignment, minlength=partition.k)
    return sums / counts[:, None]


def finch_cluster(vectors) -> FinchResult:
    x = _as_matrix(vectors)
    n = len(x)
    if n == 0:
        raise ValueError("cannot cluster an empty set of vectors")
    if n == 1:
        return FinchResult([ClusterPartition(np.zeros(1, dtype=np.intp), 1, 0)])

    current = adjacency_partition(first_neighbors(x), level=0)
    result = FinchResult([current])
    while current.k > 1:
        means = cluster_means(x, current)
        merged = adjacency_partition(first_neighbors(means))
        assignment, k = relabel_first_appearance(merged.assignment[current.assignment])
        nxt = ClusterPartition(assignment, k, current.level + 1)
        result.levels.append(nxt)
        if k == current.k:
            break
        current = nxt
    return result
