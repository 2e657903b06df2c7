"""Class prototypes per client and nearest-prototype ownership assignment."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gnn import ModelParams, first_layer_embedding
from .graph import Graph


class NoCandidateError(ValueError):
    """No client holds the query node's class."""


@dataclass(frozen=True)
class PrototypeSet:
    """Per-class mean first-layer embeddings of one client's reconstruction."""

    means: dict[int, np.ndarray]
    counts: dict[int, int]

    @property
    def classes(self) -> set[int]:
        return set(self.means)


def prototypes_from_embeddings(emb: np.ndarray, labels: np.ndarray) -> PrototypeSet:
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if not len(classes):
        raise ValueError("reconstruction has no nodes")
    means, counts = {}, {}
    for c in classes:
        idx = labels == c
        means[int(c)] = emb[idx].mean(axis=0)
        counts[int(c)] = int(idx.sum())
    return PrototypeSet(means, counts)


def build_prototypes(global_params: ModelParams, recon_graphs: Sequence[Graph]) -> list[PrototypeSet]:
    """One PrototypeSet per client graph (reconstructed features, sampled edges, labels)."""
    return [prototypes_from_embeddings(first_layer_embedding(global_params, g), g.labels)
            for g in recon_graphs]


def owner_distances(embedding: np.ndarray, label: int, prototypes: Sequence[PrototypeSet]) -> np.ndarray:
    """Cosine distance to each client's prototype of ``label``; inf where absent.

    A zero query embedding gets the maximal finite distance 2 for every
    candidate, so the lowest-index candidate wins.
    """
    e = np.asarray(embedding, dtype=np.float64)
    ne = np.linalg.norm(e)
    d = np.full(len(prototypes), np.inf)
    if ne == 0:
        warnings.warn("zero query embedding; cosine distance set to 2", RuntimeWarning, stacklevel=2)
    for k, ps in enumerate(prototypes):
        mu = ps.means.get(int(label))
        if mu is None:
            continue
        nm = np.linalg.norm(mu)
        if ne == 0 or nm == 0:
            d[k] = 2.0
        else:
            d[k] = 1.0 - float(e @ mu) / (ne * nm)
    return d


def assign_from_embedding(embedding, label, prototypes) -> tuple[int, np.ndarray]:
    d = owner_distances(embedding, label, prototypes)
    if np.all(np.isinf(d)):
        raise NoCandidateError(f"no client has class {label}")
    return int(np.argmin(d)), d


def assign_owner(global_params: ModelParams, target: Graph, node: int, prototypes) -> tuple[int, np.ndarray]:
    emb = first_layer_embedding(global_params, target)
    return assign_from_embedding(emb[node], target.labels[node], prototypes)


def assign_all(global_params: ModelParams, target: Graph, nodes, prototypes):
    """Assign several nodes with one forward pass; returns ``(pred, distances)``."""
    nodes = np.asarray(nodes, dtype=np.int64)
    emb = first_layer_embedding(global_params, target)
    pred = np.zeros(len(nodes), dtype=np.int64)
    dist = np.zeros((len(nodes), len(prototypes)))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for r, i in enumerate(nodes):
            pred[r], dist[r] = assign_from_embedding(emb[i], target.labels[i], prototypes)
    dead = sum(1 for w in caught if issubclass(w.category, RuntimeWarning))
    if dead:
        warnings.warn(f"{dead} query nodes had zero embeddings", RuntimeWarning, stacklevel=2)
    return pred, dist


def ownership_accuracy(assignments, truth) -> float:
    a = np.asarray(assignments)
    t = np.asarray(truth)
    if a.size == 0:
        raise ValueError("empty query")
    if a.shape != t.shape:
        raise ValueError("assignment and truth differ in length")
    return float(np.mean(a == t))


# ---------------------------------------------------------------- structure


def clustering_coefficients(g: Graph) -> np.ndarray:
    a = g.adjacency()
    deg = a.sum(axis=1)
    tri = np.einsum("ij,jk,ki->i", a, a, a) / 2.0
    pairs = deg * (deg - 1) / 2.0
    return np.divide(tri, pairs, out=np.zeros_like(tri), where=deg >= 2)


def structural_similarity_kl(g_inv: Graph, g_shadow: Graph, bins: int = 10, eps: float = 1e-3) -> float:
    """KL(degree hist) + KL(clustering hist) with probabilities floored at ``eps``.

    Degree histograms share the union of observed degrees as support; the
    clustering coefficient range [0, 1] is cut into ``bins`` equal bins with
    the last bin closed.
    """
    if g_inv.num_nodes == 0 or g_shadow.num_nodes == 0:
        raise ValueError("graphs must be non-empty")
    d1, d2 = g_inv.degrees(), g_shadow.degrees()
    support = np.union1d(d1, d2)
    p1 = np.array([np.mean(d1 == k) for k in support])
    p2 = np.array([np.mean(d2 == k) for k in support])

    def hist(g):
        cc = clustering_coefficients(g)
        idx = np.minimum((cc * bins).astype(np.int64), bins - 1)
        return np.bincount(idx, minlength=bins) / g.num_nodes

    q1, q2 = hist(g_inv), hist(g_shadow)

    def kl(a, b):
        a = np.maximum(a, eps)
        b = np.maximum(b, eps)
        return float(np.sum(a * np.log(a / b)))

    return kl(p1, p2) + kl(q1, q2)


def uniform_baseline(K: int) -> float:
    return 1.0 / K if K else math.nan
