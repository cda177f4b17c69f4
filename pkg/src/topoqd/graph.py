"""Undirected multigraph helpers: bridge finding and connectivity.

Edges are identified by id, so parallel edges are handled individually: two
parallel branches between the same pair of nodes are never bridges.
"""

from __future__ import annotations

from collections.abc import Hashable, Iterable, Mapping

import numpy as np


def find_bridges(
    edges: Mapping[Hashable, tuple[Hashable, Hashable]],
    nodes: Iterable[Hashable] | None = None,
) -> set[Hashable]:
    """Return the ids of all bridges of an undirected multigraph.

    Iterative Tarjan low-link DFS, linear in nodes + edges. Works on every
    connected component, so a disconnected input yields the bridges of each
    component.

    Parameters
    ----------
    edges : Mapping
        Edge id -> (u, v) endpoints.
    nodes : Iterable, optional
        Additional (possibly isolated) nodes.
    """
    index: dict[Hashable, int] = {}
    for u, v in edges.values():
        index.setdefault(u, len(index))
        index.setdefault(v, len(index))
    if nodes is not None:
        for n in nodes:
            index.setdefault(n, len(index))
    ids = list(edges)
    src = np.fromiter((index[edges[e][0]] for e in ids), dtype=np.int64, count=len(ids))
    dst = np.fromiter((index[edges[e][1]] for e in ids), dtype=np.int64, count=len(ids))
    mask = bridge_mask(len(index), src, dst)
    return {ids[k] for k in np.flatnonzero(mask)}


def bridge_mask(
    n_nodes: int,
    src: np.ndarray,
    dst: np.ndarray,
    active: np.ndarray | None = None,
) -> np.ndarray:
    """Boolean mask over edges marking bridges; inactive edges are never bridges."""
    n_edges = len(src)
    if active is None:
        active = np.ones(n_edges, dtype=bool)
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n_nodes)]
    for k in np.flatnonzero(active):
        u, v = int(src[k]), int(dst[k])
        if u == v:
            continue
        adj[u].append((v, int(k)))
        adj[v].append((u, int(k)))

    disc = [-1] * n_nodes
    low = [0] * n_nodes
    out = np.zeros(n_edges, dtype=bool)
    counter = 0
    for root in range(n_nodes):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = counter
        counter += 1
        # frame: (node, edge id used to enter, neighbour cursor)
        stack = [(root, -1, 0)]
        while stack:
            node, via, i = stack[-1]
            nbrs = adj[node]
            if i < len(nbrs):
                stack[-1] = (node, via, i + 1)
                nxt, eid = nbrs[i]
                if eid == via:
                    continue
                if disc[nxt] == -1:
                    disc[nxt] = low[nxt] = counter
                    counter += 1
                    stack.append((nxt, eid, 0))
                elif disc[nxt] < low[node]:
                    low[node] = disc[nxt]
            else:
                stack.pop()
                if stack:
                    parent = stack[-1][0]
                    if low[node] < low[parent]:
                        low[parent] = low[node]
                    if low[node] > disc[parent]:
                        out[via] = True
    return out


def component_labels(
    n_nodes: int,
    src: np.ndarray,
    dst: np.ndarray,
    active: np.ndarray | None = None,
) -> np.ndarray:
    """Union-find component label per node."""
    parent = list(range(n_nodes))

    def root(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    edges = range(len(src)) if active is None else np.flatnonzero(active)
    for k in edges:
        a, b = root(int(src[k])), root(int(dst[k]))
        if a != b:
            parent[a] = b
    return np.array([root(i) for i in range(n_nodes)], dtype=np.int64)


def is_connected(
    n_nodes: int,
    src: np.ndarray,
    dst: np.ndarray,
    active: np.ndarray | None = None,
    nodes: np.ndarray | None = None,
) -> bool:
    """True if the given nodes (default: all) lie in one component."""
    if n_nodes == 0:
        return True
    labels = component_labels(n_nodes, src, dst, active)
    if nodes is not None:
        labels = labels[nodes]
    return len(labels) == 0 or bool(np.all(labels == labels[0]))
