import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccmia.gnn import ModelParams, init_params, loss_and_grads
from ccmia.graph import PropagationMode, graph_from_adjacency
from ccmia.inversion import (InversionConfig, InversionError, cosine_grad_loss, invert, project_unit,
                             sample_top_edges, smoothness, synthetic_gradient, total_loss, total_loss_and_grads)
from ccmia.metrics import rnmse

from conftest import random_graph, small_sbm

MODES = list(PropagationMode)


def test_cosine_examples():
    g = np.array([[1.0, 0.0]])
    assert cosine_grad_loss(g, g) == pytest.approx(0.0, abs=1e-15)
    assert cosine_grad_loss(g, -g) == pytest.approx(2.0, abs=1e-15)
    assert cosine_grad_loss(g, np.array([[1.0, 1.0]])) == pytest.approx(1 - 1 / np.sqrt(2), abs=1e-12)
    assert cosine_grad_loss(g, np.zeros((1, 2))) == 1.0
    with pytest.raises(ValueError):
        cosine_grad_loss(g, np.zeros((2, 1)))


def test_smoothness_examples():
    edge = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert smoothness(np.ones((2, 3)), edge) == 0.0
    assert smoothness(np.array([[1.0, 0.0], [0.0, 0.0]]), edge) == pytest.approx(1.0, abs=1e-15)
    assert smoothness(np.random.default_rng(0).normal(size=(4, 2)), np.zeros((4, 4))) == 0.0


def pairwise(X, A):
    d = A.sum(1)
    Y = X / np.sqrt(d)[:, None]
    diff = Y[:, None, :] - Y[None, :, :]
    return 0.5 * np.sum(A * np.sum(diff ** 2, axis=2))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 8), seed=st.integers(0, 10**6))
def test_smoothness_pairwise_expansion(n, seed):
    rng = np.random.default_rng(seed)
    A = np.triu(rng.uniform(0.05, 1, size=(n, n)), 1)
    A = A + A.T
    X = rng.normal(size=(n, 3))
    assert smoothness(X, A) == pytest.approx(pairwise(X, A), rel=1e-9, abs=1e-12)


def client(n=6, d=4, c=2, seed=0):
    return random_graph(n, d, c, p=0.5, seed=seed)


def test_synthetic_gradient_is_the_gcn_gradient():
    for mode in MODES:
        g = client(seed=3)
        p = init_params(4, 5, 2, 1, mode)
        _, grads = loss_and_grads(p, g)
        assert np.allclose(synthetic_gradient(p, g.features, g.adjacency(), g.labels, g.train_mask), grads.W1,
                           atol=1e-14)


def test_total_loss_algebra():
    g = client(seed=1)
    p = init_params(4, 5, 2, 0)
    g_true = loss_and_grads(p, g)[1]
    X, A = g.features, g.adjacency()
    fixed = total_loss(p, g_true, X, A, g.labels, InversionConfig(alpha=0, beta=0), g.train_mask)
    assert fixed <= 1e-10

    rng = np.random.default_rng(0)
    Xh = rng.normal(size=X.shape)
    Ah = rng.uniform(size=A.shape)
    Ah = np.triu(Ah, 1) + np.triu(Ah, 1).T
    cos = cosine_grad_loss(g_true, synthetic_gradient(p, Xh, Ah, g.labels, g.train_mask))
    assert total_loss(p, g_true, Xh, Ah, g.labels, InversionConfig(alpha=0, beta=0), g.train_mask) == cos
    one = total_loss(p, g_true, Xh, Ah, g.labels, InversionConfig(beta=0.3), g.train_mask)
    two = total_loss(p, g_true, Xh, Ah, g.labels, InversionConfig(beta=0.6), g.train_mask)
    assert two - one == pytest.approx(0.3 * np.sum(Ah ** 2), rel=1e-12)


def _fd_inversion(mode, seed, eps=1e-6):
    rng = np.random.default_rng(seed)
    g = client(6, 3, 2, seed=seed)
    p = init_params(3, 4, 2, seed, mode)
    p = ModelParams(p.W1, rng.normal(scale=0.1, size=4), p.W2, rng.normal(scale=0.1, size=2), mode)
    g_true = loss_and_grads(p, g)[1]
    cfg = InversionConfig(alpha=0.1, beta=0.05)
    X = rng.normal(size=(6, 3))
    A = np.triu(rng.uniform(0.1, 0.9, size=(6, 6)), 1)
    A = A + A.T
    _, _, dX, dA = total_loss_and_grads(p, g_true, X, A, g.labels, cfg, g.train_mask)

    def f(X_, A_):
        return total_loss(p, g_true, X_, A_, g.labels, cfg, g.train_mask)

    worst = 0.0
    for idx in np.ndindex(X.shape):
        hi, lo = X.copy(), X.copy()
        hi[idx] += eps
        lo[idx] -= eps
        num = (f(hi, A) - f(lo, A)) / (2 * eps)
        worst = max(worst, abs(dX[idx] - num) / max(abs(dX[idx]), abs(num), 1e-6))
    for i, j in zip(*np.triu_indices(6, 1)):
        hi, lo = A.copy(), A.copy()
        hi[i, j] += eps
        hi[j, i] += eps
        lo[i, j] -= eps
        lo[j, i] -= eps
        num = (f(X, hi) - f(X, lo)) / (2 * eps)
        worst = max(worst, abs(dA[i, j] - num) / max(abs(dA[i, j]), abs(num), 1e-6))
    assert np.array_equal(dA, dA.T) and not np.diag(dA).any()
    return worst


@pytest.mark.parametrize("mode", MODES)
def test_inversion_gradients_match_finite_differences(mode):
    for seed in range(3):
        assert _fd_inversion(mode, seed) < 1e-3


def test_stationary_at_true_data():
    g = client(seed=4)
    p = init_params(4, 5, 2, 2)
    g_true = loss_and_grads(p, g)[1]
    cfg = InversionConfig(alpha=0, beta=0)
    X, A = g.features, g.adjacency()
    c0, (cos0, _, _), dX, dA = total_loss_and_grads(p, g_true, X, A, g.labels, cfg, g.train_mask)
    c1 = total_loss(p, g_true, X - 0.1 * dX, project_unit(A - 0.1 * dA), g.labels, cfg, g.train_mask)
    assert c1 <= cos0 + 1e-8


def test_projection_example_and_idempotence():
    assert np.array_equal(project_unit(np.array([1.3, -0.2, 0.6])), [1.0, 0.0, 0.6])
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(0.5, 1.0, size=(7, 7))
        once = project_unit(a)
        assert np.array_equal(project_unit(once), once)


def test_top_edge_sampling():
    rng = np.random.default_rng(1)
    for t in range(20):
        n = int(rng.integers(3, 12))
        rho = rng.uniform(0, 2)
        a = rng.random((n, n))
        a = project_unit(np.triu(a, 1) + np.triu(a, 1).T)
        out = sample_top_edges(a, int(np.floor(rho * n)))
        assert np.array_equal(out, out.T) and set(np.unique(out)) <= {0.0, 1.0}
        assert not np.diag(out).any()
        assert np.triu(out, 1).sum() == min(int(np.floor(rho * n)), n * (n - 1) // 2)
        # kept weights dominate dropped ones
        iu = np.triu_indices(n, 1)
        kept, dropped = a[iu][out[iu] == 1], a[iu][out[iu] == 0]
        if len(kept) and len(dropped):
            assert kept.min() >= dropped.max()
    assert not sample_top_edges(rng.random((5, 5)), 0).any()


def test_top_edge_ties_go_to_lowest_pair():
    out = sample_top_edges(np.full((4, 4), 0.5), 2)
    assert out[0, 1] == out[0, 2] == 1 and np.triu(out, 1).sum() == 2


def test_invert_small_sbm_client():
    g = small_sbm((4, 4), p_in=0.6, p_out=0.1, d=6, seed=2, train_fraction=1.0)
    p = init_params(6, 16, 2, 0)
    g_true = loss_and_grads(p, g)[1]
    cfg = InversionConfig(epochs=300, rho=g.num_edges / g.num_nodes, seed=5)
    rec = invert(p, g_true, g.labels, cfg, g.train_mask)
    assert rec.loss_trace[-1, 0] < rec.loss_trace[0, 0]
    baseline = np.random.default_rng(99).normal(0.0, cfg.init_std, size=g.features.shape)
    assert rnmse(g.features, rec.X_hat) < rnmse(g.features, baseline)
    assert rec.A_cont.min() >= 0 and rec.A_cont.max() <= 1
    assert np.triu(rec.A_hat, 1).sum() == int(np.floor(cfg.rho * 8))
    assert rec.to_graph(2).num_edges == int(np.floor(cfg.rho * 8))


def test_invert_is_deterministic():
    g = client(seed=6)
    p = init_params(4, 5, 2, 0)
    cfg = InversionConfig(epochs=20, rho=1.0, seed=1)
    a = invert(p, loss_and_grads(p, g)[1], g.labels, cfg)
    b = invert(p, loss_and_grads(p, g)[1], g.labels, cfg)
    assert np.array_equal(a.X_hat, b.X_hat) and np.array_equal(a.A_hat, b.A_hat)


def test_invert_errors():
    g = client(seed=6)
    p = init_params(4, 5, 2, 0)
    g_true = loss_and_grads(p, g)[1]
    with pytest.raises(ValueError):
        invert(p, g_true, g.labels, InversionConfig(n_hat=3))
    with pytest.raises(InversionError), np.errstate(all="ignore"):
        invert(p, g_true, g.labels, InversionConfig(epochs=50, lr_x=1e300, alpha=1.0))
    with pytest.raises(ValueError):
        InversionConfig(alpha=-1)
