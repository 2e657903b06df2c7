import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccmia.graph import (BundleError, Graph, PropagationMode, SbmParams, gen_sbm, graph_from_adjacency,
                         load_bundle, propagation_matrix, save_bundle)

from conftest import random_graph, small_sbm


def _write_bundle(d, n=4, dim=2, c=2, edges=((0, 1), (1, 2)), labels=None):
    d.mkdir(parents=True, exist_ok=True)
    (d / "meta.json").write_text(json.dumps({"num_nodes": n, "num_features": dim, "num_classes": c}))
    rows = ["node," + ",".join(f"f{j}" for j in range(dim))]
    rows += [",".join([str(i)] + ["0.5"] * dim) for i in range(n)]
    (d / "features.csv").write_text("\n".join(rows) + "\n")
    (d / "edges.csv").write_text("src,dst\n" + "".join(f"{s},{t}\n" for s, t in edges))
    labels = [i % c for i in range(n)] if labels is None else labels
    (d / "labels.csv").write_text("node,label\n" + "".join(f"{i},{y}\n" for i, y in enumerate(labels)))
    (d / "masks.csv").write_text("node,train,val,test\n" + "".join(f"{i},1,0,0\n" for i in range(n)))


def _bytes(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_load_small_bundle(tmp_path):
    _write_bundle(tmp_path / "b")
    g = load_bundle(tmp_path / "b")
    assert g.num_edges == 2
    assert g.degrees()[1] == 2
    assert (g.num_nodes, g.num_features, g.num_classes) == (4, 2, 2)


@pytest.mark.parametrize("edges, code, line", [
    (((0, 1), (2, 2)), "self_loop", 3),
    (((0, 1), (1, 0)), "duplicate_edge", 3),
    (((0, 7),), "node_out_of_range", 2),
])
def test_bad_edges_are_rejected(tmp_path, edges, code, line):
    _write_bundle(tmp_path / "b", edges=edges)
    with pytest.raises(BundleError) as e:
        load_bundle(tmp_path / "b")
    assert e.value.code == code and e.value.line == line


def test_bundle_errors(tmp_path):
    _write_bundle(tmp_path / "b", labels=[0, 1, 2, 0])
    with pytest.raises(BundleError) as e:
        load_bundle(tmp_path / "b")
    assert e.value.code == "label_out_of_range" and e.value.line == 4

    _write_bundle(tmp_path / "c")
    (tmp_path / "c" / "masks.csv").unlink()
    with pytest.raises(BundleError) as e:
        load_bundle(tmp_path / "c")
    assert e.value.code == "missing_file"

    _write_bundle(tmp_path / "d")
    (tmp_path / "d" / "meta.json").write_text(json.dumps({"num_nodes": 4, "num_features": 3, "num_classes": 2}))
    with pytest.raises(BundleError) as e:
        load_bundle(tmp_path / "d")
    assert e.value.code == "dimension_mismatch"

    _write_bundle(tmp_path / "e")
    (tmp_path / "e" / "edges.csv").write_text("src,dst\n0,1\n1,x\n")
    with pytest.raises(BundleError) as e:
        load_bundle(tmp_path / "e")
    assert e.value.code == "malformed_row" and e.value.line == 3


def test_roundtrip_is_byte_identical(tmp_path):
    g = gen_sbm(SbmParams.simple([25, 25], 0.2, 0.02, num_features=6, seed=3), 3)
    save_bundle(g, tmp_path / "a")
    h = load_bundle(tmp_path / "a")
    assert h.same_as(g)
    save_bundle(h, tmp_path / "b")
    assert _bytes(tmp_path / "a") == _bytes(tmp_path / "b")
    save_bundle(g, tmp_path / "c")
    assert _bytes(tmp_path / "a") == _bytes(tmp_path / "c")


def test_empty_edge_file(tmp_path):
    g = graph_from_adjacency(np.zeros((3, 2)), np.zeros((3, 3)), [0, 1, 0], 2)
    save_bundle(g, tmp_path / "g")
    assert (tmp_path / "g" / "edges.csv").read_text() == "src,dst\n"
    assert load_bundle(tmp_path / "g").num_edges == 0


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 12), d=st.integers(1, 4), p=st.floats(0, 1), seed=st.integers(0, 2**16))
def test_roundtrip_property(tmp_path_factory, n, d, p, seed):
    c = min(n, 3)
    g = random_graph(n, d, c, p=p, seed=seed)
    path = tmp_path_factory.mktemp("rt")
    save_bundle(g, path)
    assert load_bundle(path).same_as(g)


def test_graph_invariants_enforced():
    x = np.zeros((3, 1))
    z = np.zeros(3, dtype=bool)
    with pytest.raises(ValueError):
        Graph(x, [[1, 1]], [0, 0, 0], 1, z, z, z)
    with pytest.raises(ValueError):
        Graph(x, [[0, 1], [1, 0]], [0, 0, 0], 1, z, z, z)
    with pytest.raises(ValueError):
        Graph(x, [[0, 3]], [0, 0, 0], 1, z, z, z)
    with pytest.raises(ValueError):
        Graph(x, [], [0, 0, 2], 2, z, z, z)
    t = np.array([True, False, False])
    with pytest.raises(ValueError):
        Graph(x, [], [0, 0, 0], 1, t, t, z)


def test_sbm_complete_blocks():
    g = gen_sbm(SbmParams.simple([3, 3], 1.0, 0.0, num_features=2), 0)
    assert g.num_edges == 6
    a = g.adjacency()
    triangles = np.trace(a @ a @ a) / 6
    assert triangles == 2
    assert list(g.labels) == [0, 0, 0, 1, 1, 1]


def test_sbm_edge_count_binomial():
    # within pairs: 2 * C(50,2) at p_in, cross pairs: 50*50 at p_out
    n_in, n_out = 2 * 50 * 49 // 2, 50 * 50
    mean = n_in * 0.2 + n_out * 0.02
    var = n_in * 0.2 * 0.8 + n_out * 0.02 * 0.98
    assert mean == pytest.approx(540.0)
    p = SbmParams.simple([50, 50], 0.2, 0.02, num_features=2)
    counts = [gen_sbm(p, s).num_edges for s in range(100)]
    assert abs(np.mean(counts) - mean) < 3 * np.sqrt(var / 100)


def test_sbm_features_and_determinism():
    p = SbmParams.simple([200, 200], 0.05, 0.01, num_features=4, separation=3.0, noise=0.1)
    g = gen_sbm(p, 7)
    assert gen_sbm(p, 7).same_as(g)
    assert not gen_sbm(p, 8).same_as(g)
    for b in range(2):
        rows = g.features[g.labels == b]
        assert np.allclose(rows.mean(axis=0), p.feature_centers[b], atol=0.03)
        assert rows.std(axis=0).mean() == pytest.approx(0.1, rel=0.1)


def test_sbm_params_validation():
    with pytest.raises(ValueError):
        SbmParams.simple([3, 3], 0.1, 0.2)
    with pytest.raises(ValueError):
        SbmParams.simple([3, 0], 0.2, 0.1)
    with pytest.raises(ValueError):
        SbmParams((3, 3), 0.2, 0.1, np.zeros((3, 2)))


def test_block_labels_extension():
    p = SbmParams.simple([4, 4, 4], 0.5, 0.1, num_features=2, block_labels=(0, 1, 0))
    g = gen_sbm(p, 0)
    assert g.num_classes == 2
    assert list(g.labels) == [0] * 4 + [1] * 4 + [0] * 4


def test_laplacian_single_edge():
    g = graph_from_adjacency(np.zeros((2, 1)), [[0, 1], [1, 0]], [0, 0], 1)
    L = propagation_matrix(g, PropagationMode.NORMALIZED_LAPLACIAN)
    assert np.array_equal(L, [[1.0, -1.0], [-1.0, 1.0]])


def test_isolated_node_self_loop():
    g = graph_from_adjacency(np.zeros((1, 1)), [[0]], [0], 1)
    assert np.array_equal(propagation_matrix(g, "sym_norm_adj_self_loops"), [[1.0]])


@pytest.mark.parametrize("mode", list(PropagationMode))
def test_propagation_symmetric(mode):
    for seed in range(5):
        g = small_sbm(seed=seed)
        P = propagation_matrix(g, mode)
        assert np.array_equal(P, P.T)


def test_sym_norm_against_formula():
    g = random_graph(9, 2, 2, p=0.4, seed=1)
    a = g.adjacency() + np.eye(9)
    dinv = np.diag(1 / np.sqrt(a.sum(1)))
    assert np.allclose(propagation_matrix(g, "sym_norm_adj_self_loops"), dinv @ a @ dinv, atol=1e-15)
