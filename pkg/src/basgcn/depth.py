"""Depth-based (DB) vertex representations.

Entry ``k-1`` of a vertex's DB vector is the Shannon entropy (bits) of the
steady-state random walk on the subgraph induced by all vertices within
shortest-path distance ``k`` of the vertex.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .graphio import Graph


def bfs_distances(A: np.ndarray, root: int) -> np.ndarray:
    """Hop distances from ``root``; unreachable vertices get -1."""
    n = A.shape[0]
    dist = np.full(n, -1, dtype=np.int64)
    dist[root] = 0
    nbrs = [np.flatnonzero(A[i]) for i in range(n)]
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for w in nbrs[u]:
            if dist[w] < 0:
                dist[w] = dist[u] + 1
                queue.append(w)
    return dist


def expansion_subgraph(g: Graph, root: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Vertices within distance ``k`` of ``root`` and their induced adjacency.

    Returns ``(vertices, adjacency)`` with vertices in ascending index order.
    """
    if k < 1:
        raise ValueError("depth must be >= 1")
    A = g.adjacency()
    dist = bfs_distances(A, root)
    verts = np.flatnonzero((dist >= 0) & (dist <= k))
    return verts, A[np.ix_(verts, verts)]


def subgraph_entropy(adjacency: np.ndarray) -> float:
    deg = adjacency.sum(axis=1)
    total = deg.sum()
    if total == 0:
        return 0.0
    # sorted so the sum is independent of vertex order
    p = np.sort(deg[deg > 0]) / total
    return float(-(p * np.log2(p)).sum())


def db_representation(g: Graph, K: int) -> np.ndarray:
    """|V| x K matrix of expansion-subgraph entropies for depths 1..K."""
    if K < 1:
        raise ValueError("K must be >= 1")
    n = g.num_vertices
    A = g.adjacency()
    out = np.zeros((n, K))
    for root in range(n):
        dist = bfs_distances(A, root)
        reach = dist.max()
        for k in range(1, K + 1):
            if k > reach and k > 1:
                out[root, k - 1:] = out[root, k - 2]
                break
            mask = (dist >= 0) & (dist <= k)
            out[root, k - 1] = subgraph_entropy(A[np.ix_(mask, mask)])
    return out
