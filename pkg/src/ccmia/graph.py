"""Graph data model, on-disk bundle format and synthetic SBM graphs."""

from __future__ import annotations

import csv
import enum
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write_text

DEGREE_EPS = 1e-12
MAX_DENSE_NODES = 5000


class PropagationMode(str, enum.Enum):
    SYM_NORM_ADJ_SELF_LOOPS = "sym_norm_adj_self_loops"
    NORMALIZED_LAPLACIAN = "normalized_laplacian"


class BundleError(ValueError):
    """Structured failure while reading a graph bundle.

    ``code`` is one of ``missing_file``, ``dimension_mismatch``,
    ``label_out_of_range``, ``self_loop``, ``duplicate_edge``,
    ``node_out_of_range``, ``malformed_row``, ``overlapping_masks``.
    """

    def __init__(self, code: str, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f" [{path}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(f"{code}: {message}{where}")
        self.code = code
        self.path = path
        self.line = line


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable attributed undirected graph with node labels and split masks.

    ``edges`` is an ``(E, 2)`` integer array holding every undirected edge
    once with ``src < dst``, sorted lexicographically.
    """

    features: np.ndarray
    edges: np.ndarray
    labels: np.ndarray
    num_classes: int
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        n = x.shape[0]
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        y = np.asarray(self.labels, dtype=np.int64)
        masks = [np.asarray(m, dtype=bool) for m in (self.train_mask, self.val_mask, self.test_mask)]
        if y.shape != (n,) or any(m.shape != (n,) for m in masks):
            raise ValueError("labels and masks must have one entry per node")
        if n and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        if len(e):
            if e.min() < 0 or e.max() >= n:
                raise ValueError("edge endpoint out of range")
            if np.any(e[:, 0] == e[:, 1]):
                raise ValueError("self-loops are not allowed")
            e = np.sort(e, axis=1)
            order = np.lexsort((e[:, 1], e[:, 0]))
            e = e[order]
            if np.any(np.all(e[1:] == e[:-1], axis=1)):
                raise ValueError("duplicate edge")
        if np.any(masks[0] & masks[1]) or np.any(masks[0] & masks[2]) or np.any(masks[1] & masks[2]):
            raise ValueError("train/val/test masks must be disjoint")
        object.__setattr__(self, "features", _frozen(x))
        object.__setattr__(self, "edges", _frozen(e))
        object.__setattr__(self, "labels", _frozen(y))
        object.__setattr__(self, "num_classes", int(self.num_classes))
        object.__setattr__(self, "train_mask", _frozen(masks[0]))
        object.__setattr__(self, "val_mask", _frozen(masks[1]))
        object.__setattr__(self, "test_mask", _frozen(masks[2]))

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.num_nodes)

    def adjacency(self) -> np.ndarray:
        """Dense symmetric 0/1 adjacency (no self loops)."""
        if "adj" not in self._cache:
            if self.num_nodes > MAX_DENSE_NODES:
                raise ValueError(
                    f"graph has {self.num_nodes} nodes; dense operations are capped at {MAX_DENSE_NODES}"
                )
            a = np.zeros((self.num_nodes, self.num_nodes))
            if self.num_edges:
                a[self.edges[:, 0], self.edges[:, 1]] = 1.0
                a[self.edges[:, 1], self.edges[:, 0]] = 1.0
            self._cache["adj"] = _frozen(a)
        return self._cache["adj"]

    def with_features(self, features: np.ndarray) -> "Graph":
        return Graph(features, self.edges, self.labels, self.num_classes,
                     self.train_mask, self.val_mask, self.test_mask)

    def same_as(self, other: "Graph") -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.train_mask, other.train_mask)
            and np.array_equal(self.val_mask, other.val_mask)
            and np.array_equal(self.test_mask, other.test_mask)
        )


def graph_from_adjacency(features, adjacency, labels, num_classes, train_mask=None,
                         val_mask=None, test_mask=None) -> Graph:
    """Build a Graph from a dense 0/1 adjacency; only the upper triangle is read."""
    a = np.asarray(adjacency)
    n = a.shape[0]
    iu, ju = np.nonzero(np.triu(a, 1))
    empty = np.zeros(n, dtype=bool)
    return Graph(
        features,
        np.stack([iu, ju], axis=1),
        labels,
        num_classes,
        empty if train_mask is None else train_mask,
        empty if val_mask is None else val_mask,
        empty if test_mask is None else test_mask,
    )


def propagation_matrix(g: Graph, mode: PropagationMode | str) -> np.ndarray:
    """Dense propagation operator for the GCN.

    ``sym_norm_adj_self_loops``: D~^-1/2 (A + I) D~^-1/2 with D~ the degrees of A + I.
    ``normalized_laplacian``: D^-1/2 (D - A) D^-1/2; zero degrees become ``DEGREE_EPS``.
    """
    mode = PropagationMode(mode)
    key = ("prop", mode)
    if key not in g._cache:
        g._cache[key] = _frozen(dense_propagation(g.adjacency(), mode))
    return g._cache[key]


def dense_propagation(a: np.ndarray, mode: PropagationMode | str) -> np.ndarray:
    """Propagation operator for a dense (possibly weighted) symmetric adjacency."""
    mode = PropagationMode(mode)
    n = a.shape[0]
    if mode is PropagationMode.SYM_NORM_ADJ_SELF_LOOPS:
        at = a + np.eye(n)
        s = 1.0 / np.sqrt(at.sum(axis=1))
        p = s[:, None] * at * s[None, :]
    else:
        d = a.sum(axis=1)
        dg = np.where(d > 0, d, DEGREE_EPS)
        s = 1.0 / np.sqrt(dg)
        p = -(s[:, None] * a * s[None, :])
        p[np.diag_indices(n)] += d / dg
    # elementwise products of s_i a_ij s_j are not bitwise commutative; force symmetry
    return np.triu(p) + np.triu(p, 1).T


# ---------------------------------------------------------------- bundles

_BUNDLE_FILES = ("meta.json", "features.csv", "edges.csv", "labels.csv", "masks.csv")


def _fmt(v: float) -> str:
    return repr(float(v))


def save_bundle(g: Graph, path: str | os.PathLike) -> None:
    """Write ``g`` as a canonical bundle directory (deterministic bytes)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"num_nodes": g.num_nodes, "num_features": g.num_features, "num_classes": g.num_classes}
    atomic_write_text(path / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")

    lines = ["node," + ",".join(f"f{j}" for j in range(g.num_features))]
    for i, row in enumerate(g.features):
        lines.append(",".join([str(i)] + [_fmt(v) for v in row]))
    atomic_write_text(path / "features.csv", "\n".join(lines) + "\n")

    lines = ["src,dst"] + [f"{s},{d}" for s, d in g.edges]
    atomic_write_text(path / "edges.csv", "\n".join(lines) + "\n")

    lines = ["node,label"] + [f"{i},{y}" for i, y in enumerate(g.labels)]
    atomic_write_text(path / "labels.csv", "\n".join(lines) + "\n")

    lines = ["node,train,val,test"] + [
        f"{i},{int(a)},{int(b)},{int(c)}"
        for i, (a, b, c) in enumerate(zip(g.train_mask, g.val_mask, g.test_mask))
    ]
    atomic_write_text(path / "masks.csv", "\n".join(lines) + "\n")


def _read_rows(path: Path, header: Sequence[str] | None, width: int | None):
    """Yield ``(line_number, fields)`` for the data rows of a CSV file."""
    text = path.read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise BundleError("malformed_row", "file is empty", str(path), 1)
    if header is not None and rows[0] != list(header):
        raise BundleError("malformed_row", f"expected header {','.join(header)}", str(path), 1)
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if width is not None and len(row) != width:
            raise BundleError("malformed_row", f"expected {width} fields, got {len(row)}", str(path), lineno)
        yield lineno, row


def _int(v: str, path: Path, lineno: int) -> int:
    try:
        return int(v)
    except ValueError:
        raise BundleError("malformed_row", f"not an integer: {v!r}", str(path), lineno) from None


def _node_column(rows, n, path):
    """Check that the first column enumerates 0..n-1 in order."""
    out = []
    for expected, (lineno, row) in enumerate(rows):
        node = _int(row[0], path, lineno)
        if node != expected:
            raise BundleError("malformed_row", f"expected node {expected}, got {node}", str(path), lineno)
        out.append((lineno, row))
    if len(out) != n:
        raise BundleError("dimension_mismatch", f"expected {n} rows, found {len(out)}", str(path))
    return out


def load_bundle(path: str | os.PathLike) -> Graph:
    """Read and validate a bundle directory written by :func:`save_bundle`."""
    path = Path(path)
    for name in _BUNDLE_FILES:
        if not (path / name).is_file():
            raise BundleError("missing_file", f"bundle lacks {name}", str(path / name))
    try:
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
        n, d, c = int(meta["num_nodes"]), int(meta["num_features"]), int(meta["num_classes"])
    except (KeyError, ValueError, TypeError) as exc:
        raise BundleError("malformed_row", f"bad meta.json ({exc})", str(path / "meta.json")) from None

    fpath = path / "features.csv"
    header = ["node"] + [f"f{j}" for j in range(d)]
    first = fpath.read_text(encoding="utf-8").split("\n", 1)[0].strip().split(",")
    if len(first) != d + 1:
        raise BundleError("dimension_mismatch", f"meta says {d} features, header has {len(first) - 1}",
                          str(fpath), 1)
    x = np.zeros((n, d))
    for i, (lineno, row) in enumerate(_node_column(_read_rows(fpath, header, d + 1), n, fpath)):
        try:
            x[i] = [float(v) for v in row[1:]]
        except ValueError:
            raise BundleError("malformed_row", "non-numeric feature", str(fpath), lineno) from None

    epath = path / "edges.csv"
    seen: set[tuple[int, int]] = set()
    edges = []
    for lineno, row in _read_rows(epath, ["src", "dst"], 2):
        s, t = _int(row[0], epath, lineno), _int(row[1], epath, lineno)
        if s == t:
            raise BundleError("self_loop", f"edge ({s},{t})", str(epath), lineno)
        if not (0 <= s < n and 0 <= t < n):
            raise BundleError("node_out_of_range", f"edge ({s},{t}) with {n} nodes", str(epath), lineno)
        key = (min(s, t), max(s, t))
        if key in seen:
            raise BundleError("duplicate_edge", f"edge ({s},{t})", str(epath), lineno)
        seen.add(key)
        edges.append(key)

    lpath = path / "labels.csv"
    y = np.zeros(n, dtype=np.int64)
    for i, (lineno, row) in enumerate(_node_column(_read_rows(lpath, ["node", "label"], 2), n, lpath)):
        y[i] = _int(row[1], lpath, lineno)
        if not 0 <= y[i] < c:
            raise BundleError("label_out_of_range", f"label {y[i]} with {c} classes", str(lpath), lineno)

    mpath = path / "masks.csv"
    masks = np.zeros((n, 3), dtype=bool)
    for i, (lineno, row) in enumerate(
        _node_column(_read_rows(mpath, ["node", "train", "val", "test"], 4), n, mpath)
    ):
        vals = [_int(v, mpath, lineno) for v in row[1:]]
        if any(v not in (0, 1) for v in vals):
            raise BundleError("malformed_row", "mask entries must be 0 or 1", str(mpath), lineno)
        if sum(vals) > 1:
            raise BundleError("overlapping_masks", f"node {i} is in more than one split", str(mpath), lineno)
        masks[i] = vals

    return Graph(x, np.array(edges, dtype=np.int64).reshape(-1, 2), y, c,
                 masks[:, 0], masks[:, 1], masks[:, 2])


# ---------------------------------------------------------------- SBM


@dataclass(frozen=True)
class SbmParams:
    """Stochastic block model with Gaussian block-centred features.

    ``block_labels`` optionally maps blocks to class labels (several blocks
    may share a class); by default block ``b`` gets label ``b``. Nodes are
    split into train/val/test at random with the given fractions.
    """

    blocks: tuple[int, ...]
    p_in: float
    p_out: float
    feature_centers: np.ndarray
    feature_noise: float = 1.0
    block_labels: tuple[int, ...] | None = None
    train_fraction: float = 0.4
    val_fraction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        centers = np.atleast_2d(np.asarray(self.feature_centers, dtype=np.float64))
        object.__setattr__(self, "feature_centers", centers)
        if self.block_labels is not None:
            object.__setattr__(self, "block_labels", tuple(int(b) for b in self.block_labels))
        self.validate()

    def validate(self) -> None:
        if not self.blocks or any(b <= 0 for b in self.blocks):
            raise ValueError("block sizes must be positive")
        if not 0.0 <= self.p_out <= self.p_in <= 1.0:
            raise ValueError("need 0 <= p_out <= p_in <= 1")
        if self.feature_centers.shape[0] != len(self.blocks):
            raise ValueError("need one feature centre per block")
        if self.feature_noise < 0:
            raise ValueError("feature_noise must be non-negative")
        if self.block_labels is not None:
            if len(self.block_labels) != len(self.blocks) or min(self.block_labels) < 0:
                raise ValueError("block_labels needs one non-negative label per block")
        if not (0 <= self.train_fraction and 0 <= self.val_fraction
                and self.train_fraction + self.val_fraction <= 1):
            raise ValueError("bad split fractions")

    @classmethod
    def simple(cls, blocks, p_in, p_out, num_features=16, separation=1.0, noise=1.0, seed=0, **kw):
        """Random unit-ish centres scaled by ``separation``; handy for experiments."""
        rng = np.random.default_rng(seed)
        centers = rng.normal(size=(len(blocks), num_features))
        centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
        return cls(tuple(blocks), p_in, p_out, centers, noise, **kw)

    def to_dict(self) -> dict:
        return {
            "blocks": list(self.blocks),
            "p_in": self.p_in,
            "p_out": self.p_out,
            "feature_centers": self.feature_centers.tolist(),
            "feature_noise": self.feature_noise,
            "block_labels": None if self.block_labels is None else list(self.block_labels),
            "train_fraction": self.train_fraction,
            "val_fraction": self.val_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SbmParams":
        d = dict(d)
        if "feature_centers" not in d:
            return cls.simple(
                d.pop("blocks"), d.pop("p_in"), d.pop("p_out"),
                num_features=d.pop("num_features", 16), separation=d.pop("separation", 1.0),
                noise=d.pop("feature_noise", 1.0), seed=d.pop("centers_seed", 0), **d,
            )
        bl = d.get("block_labels")
        return cls(tuple(d["blocks"]), d["p_in"], d["p_out"], np.asarray(d["feature_centers"]),
                   d.get("feature_noise", 1.0), None if bl is None else tuple(bl),
                   d.get("train_fraction", 0.4), d.get("val_fraction", 0.0))


def gen_sbm(p: SbmParams, seed: int) -> Graph:
    """Sample a graph from the block model; deterministic given ``seed``."""
    rng = np.random.default_rng(seed)
    block_of = np.repeat(np.arange(len(p.blocks)), p.blocks)
    n = len(block_of)
    label_map = np.arange(len(p.blocks)) if p.block_labels is None else np.asarray(p.block_labels)
    labels = label_map[block_of]

    iu, ju = np.triu_indices(n, 1)
    prob = np.where(block_of[iu] == block_of[ju], p.p_in, p.p_out)
    keep = rng.random(len(iu)) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    x = p.feature_centers[block_of] + rng.normal(0.0, p.feature_noise, size=(n, p.feature_centers.shape[1]))

    perm = rng.permutation(n)
    n_train = int(round(p.train_fraction * n))
    n_val = int(round(p.val_fraction * n))
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    train[perm[:n_train]] = True
    val[perm[n_train:n_train + n_val]] = True
    test = ~(train | val)
    return Graph(x, edges, labels, int(label_map.max()) + 1, train, val, test)
