import numpy as np
import pytest

from ccmia.graph import Graph, SbmParams, gen_sbm, graph_from_adjacency


def path_graph(n, d=2, seed=0, num_classes=2):
    rng = np.random.default_rng(seed)
    edges = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)
    labels = np.arange(n) % num_classes
    mask = np.ones(n, dtype=bool)
    z = np.zeros(n, dtype=bool)
    return Graph(rng.normal(size=(n, d)), edges, labels, num_classes, mask, z, z)


def random_graph(n, d, c, p=0.3, seed=0, train=1.0):
    rng = np.random.default_rng(seed)
    a = np.triu(rng.random((n, n)) < p, 1)
    a = a | a.T
    y = rng.integers(0, c, size=n)
    y[:c] = np.arange(c)  # every class present
    tr = rng.random(n) < train
    tr[0] = True
    return graph_from_adjacency(rng.normal(size=(n, d)), a, y, c, train_mask=tr)


def small_sbm(blocks=(20, 20), p_in=0.3, p_out=0.02, d=8, seed=0, **kw):
    return gen_sbm(SbmParams.simple(blocks, p_in, p_out, num_features=d, separation=2.0,
                                    noise=0.5, seed=seed, **kw), seed)


@pytest.fixture
def sbm40():
    return small_sbm()
