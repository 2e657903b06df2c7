"""Balanced K-way graph partitioning (a METIS stand-in) and partition import.

``partition`` grows K parts by breadth-first search from spread-out seeds and
then applies Kernighan-Lin style single-node moves that strictly reduce the
edge cut while respecting the size cap. Genuine METIS output can be loaded
with :func:`load_partition`.
"""

from __future__ import annotations

import math
import os
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import read_csv, write_csv
from .graph import Graph


class PartitionError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True, eq=False)
class Partition:
    assignment: np.ndarray
    K: int
    subgraphs: tuple[Graph, ...]
    local_to_global: tuple[np.ndarray, ...]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.K)


def _neighbors(g: Graph) -> list[np.ndarray]:
    n = g.num_nodes
    if g.num_edges == 0:
        return [np.zeros(0, dtype=np.int64) for _ in range(n)]
    src = np.concatenate([g.edges[:, 0], g.edges[:, 1]])
    dst = np.concatenate([g.edges[:, 1], g.edges[:, 0]])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    bounds = np.searchsorted(src, np.arange(n + 1))
    return [dst[bounds[i]:bounds[i + 1]] for i in range(n)]


def induced_subgraph(g: Graph, nodes: np.ndarray) -> Graph:
    nodes = np.asarray(nodes, dtype=np.int64)
    local = np.full(g.num_nodes, -1, dtype=np.int64)
    local[nodes] = np.arange(len(nodes))
    e = g.edges
    keep = (local[e[:, 0]] >= 0) & (local[e[:, 1]] >= 0) if len(e) else np.zeros(0, dtype=bool)
    sub_edges = np.stack([local[e[keep, 0]], local[e[keep, 1]]], axis=1) if len(e) else e
    return Graph(g.features[nodes], sub_edges, g.labels[nodes], g.num_classes,
                 g.train_mask[nodes], g.val_mask[nodes], g.test_mask[nodes])


def from_assignment(g: Graph, assignment, K: int) -> Partition:
    assignment = np.array(assignment, dtype=np.int64)
    if assignment.shape != (g.num_nodes,):
        raise PartitionError("incomplete_assignment", "assignment must cover every node")
    if len(assignment) and (assignment.min() < 0 or assignment.max() >= K):
        raise PartitionError("part_out_of_range", f"part ids must lie in [0, {K})")
    sizes = np.bincount(assignment, minlength=K)
    if np.any(sizes == 0):
        raise PartitionError("empty_part", f"part(s) {np.flatnonzero(sizes == 0).tolist()} are empty")
    l2g = tuple(np.flatnonzero(assignment == k) for k in range(K))
    subs = tuple(induced_subgraph(g, nodes) for nodes in l2g)
    assignment.setflags(write=False)
    return Partition(assignment, K, subs, l2g)


def edge_cut(g: Graph, p: Partition | np.ndarray) -> int:
    a = p.assignment if isinstance(p, Partition) else np.asarray(p)
    if g.num_edges == 0:
        return 0
    return int(np.sum(a[g.edges[:, 0]] != a[g.edges[:, 1]]))


def class_distribution(p: Partition) -> np.ndarray:
    """K x C matrix of label counts per part."""
    c = p.subgraphs[0].num_classes
    return np.stack([np.bincount(s.labels, minlength=c) for s in p.subgraphs])


def _bfs_distances(nbrs, sources, n):
    dist = np.full(n, np.inf)
    q = deque()
    for s in sources:
        dist[s] = 0
        q.append(s)
    while q:
        u = q.popleft()
        for v in nbrs[u]:
            if dist[v] == np.inf:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def _grow(nbrs, n, K, cap, rng) -> np.ndarray:
    seeds = [int(rng.integers(n))]
    while len(seeds) < K:
        dist = _bfs_distances(nbrs, seeds, n)
        dist[seeds] = -1
        # farthest node, unreachable first, lowest id on ties
        seeds.append(int(np.argmax(dist)))

    assign = np.full(n, -1, dtype=np.int64)
    sizes = np.zeros(K, dtype=np.int64)
    frontiers = [deque([s]) for s in seeds]
    for k, s in enumerate(seeds):
        assign[s] = k
        sizes[k] = 1
    remaining = n - K
    while remaining > 0:
        progressed = False
        for k in np.argsort(sizes, kind="stable"):
            if sizes[k] >= cap:
                continue
            fr = frontiers[k]
            picked = -1
            while fr and picked < 0:
                u = fr[0]
                cand = [v for v in nbrs[u] if assign[v] < 0]
                if cand:
                    picked = int(min(cand))
                else:
                    fr.popleft()
            if picked < 0:
                continue
            assign[picked] = k
            sizes[k] += 1
            fr.append(picked)
            remaining -= 1
            progressed = True
            if remaining == 0:
                break
        if not progressed:
            # stranded nodes (other components): reseed the smallest part with the lowest free id
            k = int(np.argmin(sizes))
            v = int(np.flatnonzero(assign < 0)[0])
            assign[v] = k
            sizes[k] += 1
            frontiers[k].append(v)
            remaining -= 1
    return assign


def refine(g: Graph, assignment: np.ndarray, K: int, cap: int, floor: int = 1,
           passes: int = 10) -> tuple[np.ndarray, list[int]]:
    """Greedy single-node moves with strictly positive cut gain.

    Nodes are visited in increasing id order and each moves to the part that
    removes the most cut edges (lowest part id on ties). Returns the refined
    assignment and the edge cut before the first pass and after each pass.
    """
    nbrs = _neighbors(g)
    a = np.array(assignment, dtype=np.int64)
    sizes = np.bincount(a, minlength=K)
    history = [edge_cut(g, a)]
    for _ in range(passes):
        moved = False
        for v in range(g.num_nodes):
            own = a[v]
            if sizes[own] - 1 < floor or len(nbrs[v]) == 0:
                continue
            counts = np.bincount(a[nbrs[v]], minlength=K)
            gains = counts - counts[own]
            gains[own] = 0
            gains[sizes >= cap] = 0
            best = int(np.argmax(gains))
            if gains[best] > 0:
                a[v] = best
                sizes[own] -= 1
                sizes[best] += 1
                moved = True
        history.append(edge_cut(g, a))
        if not moved:
            break
    return a, history


def partition(g: Graph, K: int, balance_tol: float = 0.1, seed: int = 0) -> Partition:
    n = g.num_nodes
    if K < 1:
        raise PartitionError("bad_k", "K must be at least 1")
    if K > n:
        raise PartitionError("k_exceeds_nodes", f"K={K} > N={n}")
    if K == 1:
        return from_assignment(g, np.zeros(n, dtype=np.int64), 1)
    rng = np.random.default_rng(seed)
    nbrs = _neighbors(g)
    cap = math.ceil((1.0 + balance_tol) * n / K)
    floor = max(1, math.floor((1.0 - balance_tol) * n / K))
    assign = _grow(nbrs, n, K, math.ceil(n / K), rng)
    assign, _ = refine(g, assign, K, cap, floor)
    return from_assignment(g, assign, K)


def save_partition(p: Partition, path: str | os.PathLike) -> None:
    write_csv(path, ["node", "part"], enumerate(p.assignment.tolist()))


def load_partition(path: str | os.PathLike, g: Graph, K: int | None = None) -> Partition:
    """Read ``node,part`` rows (e.g. converted METIS output) and validate them."""
    path = Path(path)
    rows = read_csv(path)
    if rows and set(rows[0]) != {"node", "part"}:
        raise PartitionError("malformed_row", "expected header node,part")
    a = np.full(g.num_nodes, -1, dtype=np.int64)
    for lineno, row in enumerate(rows, start=2):
        try:
            node, part = int(row["node"]), int(row["part"])
        except (TypeError, ValueError):
            raise PartitionError("malformed_row", f"line {lineno}") from None
        if not 0 <= node < g.num_nodes:
            raise PartitionError("node_out_of_range", f"node {node} on line {lineno}")
        if a[node] >= 0:
            raise PartitionError("duplicate_node", f"node {node} on line {lineno}")
        if part < 0:
            raise PartitionError("part_out_of_range", f"part {part} on line {lineno}")
        a[node] = part
    missing = np.flatnonzero(a < 0)
    if len(missing):
        raise PartitionError("incomplete_assignment", f"nodes {missing[:10].tolist()} have no part")
    if K is None:
        K = int(a.max()) + 1
        present = np.unique(a)
        if len(present) != K:
            raise PartitionError("non_contiguous_parts", f"part ids {present.tolist()} are not 0..{K - 1}")
    elif a.max() >= K:
        raise PartitionError("part_out_of_range", f"part id {int(a.max())} >= K={K}")
    return from_assignment(g, a, K)
