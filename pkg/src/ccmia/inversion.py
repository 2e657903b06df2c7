"""Reconstruct a client's features and adjacency from its first-layer gradient.

Dummy features ``X`` and a continuous symmetric adjacency ``A`` in [0, 1] are
optimised so that the first-layer weight gradient they induce through the
(known) global model points in the same direction as the intercepted one:

    total = cos_loss(g, g_syn(X, A)) + alpha * tr(X^T Lap(A) X) + beta * ||A||_F^2

``g_syn`` is itself a gradient, so descending ``total`` needs derivatives of
a backward pass. They are written out by hand below (reverse mode over the
GCN's own backward pass) and checked against finite differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gnn import Gradients, ModelParams, softmax
from .graph import DEGREE_EPS, Graph, PropagationMode, graph_from_adjacency


class InversionError(RuntimeError):
    pass


@dataclass(frozen=True)
class InversionConfig:
    alpha: float = 1e-3
    beta: float = 1e-4
    epochs: int = 300
    lr_x: float = 0.1
    lr_a: float = 0.1
    rho: float = 1.0
    n_hat: int | None = None
    seed: int = 0
    init_std: float = 0.1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.epochs < 0 or self.rho < 0:
            raise ValueError("epochs and rho must be non-negative")


@dataclass(frozen=True, eq=False)
class Reconstruction:
    X_hat: np.ndarray
    A_cont: np.ndarray
    A_hat: np.ndarray
    labels: np.ndarray
    loss_trace: np.ndarray  # (epochs + 1) x 4: total, cos, smooth, frob

    def to_graph(self, num_classes: int, train_mask=None) -> Graph:
        return graph_from_adjacency(self.X_hat, self.A_hat, self.labels, num_classes, train_mask)


# ------------------------------------------------------------------ pieces


def project_unit(a: np.ndarray) -> np.ndarray:
    """Entry-wise projection onto [0, 1]."""
    return np.clip(a, 0.0, 1.0)


def sample_top_edges(a_cont: np.ndarray, n_edges: int) -> np.ndarray:
    """Keep the ``n_edges`` largest upper-triangle weights as a 0/1 symmetric matrix.

    Ties go to the lexicographically smallest ``(i, j)``.
    """
    n = a_cont.shape[0]
    iu, ju = np.triu_indices(n, 1)
    n_edges = int(min(max(n_edges, 0), len(iu)))
    order = np.argsort(-a_cont[iu, ju], kind="stable")[:n_edges]
    out = np.zeros((n, n))
    out[iu[order], ju[order]] = 1.0
    out[ju[order], iu[order]] = 1.0
    return out


def _as_w1(g) -> np.ndarray:
    return np.asarray(g.W1 if isinstance(g, Gradients) else g, dtype=np.float64)


def _cosine_and_grad(g_true: np.ndarray, g_syn: np.ndarray):
    nt = np.linalg.norm(g_true)
    ns = np.linalg.norm(g_syn)
    if nt == 0:
        raise ValueError("intercepted gradient is zero")
    if ns == 0:
        return 1.0, np.zeros_like(g_syn)
    dot = float(np.sum(g_true * g_syn))
    val = 1.0 - dot / (nt * ns)
    grad = -(g_true / (nt * ns) - dot * g_syn / (nt * ns ** 3))
    return val, grad


def cosine_grad_loss(g_true, g_syn) -> float:
    """``1 - <g, g_syn> / (|g| |g_syn|)``; a zero synthetic gradient scores 1."""
    a, b = _as_w1(g_true), _as_w1(g_syn)
    if a.shape != b.shape:
        raise ValueError("gradient shapes differ")
    return _cosine_and_grad(a, b)[0]


def _laplacian(a: np.ndarray):
    d = a.sum(axis=1)
    dg = np.where(d > 0, d, DEGREE_EPS)
    s = 1.0 / np.sqrt(dg)
    lap = -(s[:, None] * a * s[None, :])
    lap[np.diag_indices_from(lap)] += d / dg
    return lap, (d, dg, s)


def _laplacian_backward(lbar: np.ndarray, a: np.ndarray, cache) -> np.ndarray:
    """Gradient w.r.t. every entry of ``a`` of a scalar with ``dL/dLap = lbar``.

    The diagonal ``d/d`` is constant wherever the degree is positive.
    """
    d, dg, s = cache
    abar = -lbar * np.outer(s, s)
    m = lbar * a
    sbar = -(m @ s + m.T @ s)
    dbar = sbar * (-0.5) * dg ** -1.5 * (d > 0)
    return abar + dbar[:, None]


def _propagation(a: np.ndarray, mode: PropagationMode):
    if mode is PropagationMode.NORMALIZED_LAPLACIAN:
        return _laplacian(a)
    at = a + np.eye(a.shape[0])
    d = at.sum(axis=1)
    s = 1.0 / np.sqrt(d)
    return s[:, None] * at * s[None, :], (d, at, s)


def _propagation_backward(pbar: np.ndarray, a: np.ndarray, mode: PropagationMode, cache) -> np.ndarray:
    if mode is PropagationMode.NORMALIZED_LAPLACIAN:
        return _laplacian_backward(pbar, a, cache)
    d, at, s = cache
    abar = pbar * np.outer(s, s)
    m = pbar * at
    sbar = m @ s + m.T @ s
    dbar = sbar * (-0.5) * d ** -1.5
    return abar + dbar[:, None]


def smoothness(X: np.ndarray, A: np.ndarray) -> float:
    """``tr(X^T Lap X)`` with ``Lap`` the normalised Laplacian of ``A``."""
    lap, _ = _laplacian(np.asarray(A, dtype=np.float64))
    X = np.asarray(X, dtype=np.float64)
    return float(np.sum(X * (lap @ X)))


def _targets(labels, n, c, mask):
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("no labelled nodes in the loss")
    Y = np.zeros((n, c))
    Y[np.arange(n)[mask], labels[mask]] = 1.0
    w = mask.astype(np.float64)[:, None] / mask.sum()
    return Y, w


def synthetic_gradient(params: ModelParams, X: np.ndarray, A: np.ndarray, labels, mask=None) -> np.ndarray:
    """First-layer weight gradient of the masked cross-entropy on ``(X, A)``."""
    return _synthetic_forward(params, X, A, labels, mask)[0]


def _synthetic_forward(params, X, A, labels, mask):
    mode = params.mode
    P, pc = _propagation(A, mode)
    Y, w = _targets(labels, X.shape[0], params.num_classes, mask)
    Q = P @ X
    Z1 = Q @ params.W1 + params.b1
    Hm = (Z1 > 0).astype(np.float64)
    E = Z1 * Hm
    R = P @ E
    S = softmax(R @ params.W2 + params.b2)
    G2 = (S - Y) * w
    U = P @ G2
    dZ1 = (U @ params.W2.T) * Hm
    g_syn = Q.T @ dZ1
    cache = dict(P=P, pc=pc, Q=Q, Hm=Hm, E=E, S=S, G2=G2, dZ1=dZ1, w=w)
    return g_syn, cache


def _synthetic_backward(params, X, A, cache, gbar):
    """Pull ``dL/dg_syn`` back to ``(dL/dX, dL/dA)``."""
    P, Q, Hm, E, S, G2, dZ1, w = (cache[k] for k in ("P", "Q", "Hm", "E", "S", "G2", "dZ1", "w"))
    W1, W2 = params.W1, params.W2
    Qbar = dZ1 @ gbar.T
    Vbar = (Q @ gbar) * Hm
    Ubar = Vbar @ W2
    Pbar = Ubar @ G2.T
    G2bar = P @ Ubar
    Sbar = G2bar * w
    Z2bar = S * (Sbar - np.sum(Sbar * S, axis=1, keepdims=True))
    Rbar = Z2bar @ W2.T
    Pbar += Rbar @ E.T
    Z1bar = (P @ Rbar) * Hm
    Qbar += Z1bar @ W1.T
    Pbar += Qbar @ X.T
    Xbar = P @ Qbar
    Abar = _propagation_backward(Pbar, A, params.mode, cache["pc"])
    return Xbar, Abar


def total_loss_and_grads(params: ModelParams, g_true, X: np.ndarray, A: np.ndarray, labels,
                         cfg: InversionConfig, mask=None):
    """Objective value, its parts ``(cos, smooth, frob)`` and gradients.

    The adjacency gradient is taken w.r.t. the symmetric parameterisation
    (one free value per unordered pair, mirrored), so it is returned as a
    symmetric matrix with zero diagonal.
    """
    g_true = _as_w1(g_true)
    g_syn, cache = _synthetic_forward(params, X, A, labels, mask)
    cos, gbar = _cosine_and_grad(g_true, g_syn)
    Xbar, Abar = _synthetic_backward(params, X, A, cache, gbar)

    lap, lc = _laplacian(A)
    smooth = float(np.sum(X * (lap @ X)))
    frob = float(np.sum(A * A))
    if cfg.alpha:
        Xbar = Xbar + 2.0 * cfg.alpha * (lap @ X)
        Abar = Abar + cfg.alpha * _laplacian_backward(X @ X.T, A, lc)
    Abar = Abar + 2.0 * cfg.beta * A

    dA = Abar + Abar.T
    np.fill_diagonal(dA, 0.0)
    total = cos + cfg.alpha * smooth + cfg.beta * frob
    return total, (cos, smooth, frob), Xbar, dA


def total_loss(params: ModelParams, g_true, X_hat, A_cont, labels, cfg: InversionConfig, mask=None) -> float:
    g_syn = synthetic_gradient(params, X_hat, A_cont, labels, mask)
    return (cosine_grad_loss(g_true, g_syn) + cfg.alpha * smoothness(X_hat, A_cont)
            + cfg.beta * float(np.sum(np.asarray(A_cont) ** 2)))


def invert(params: ModelParams, g_true, labels, cfg: InversionConfig, mask=None) -> Reconstruction:
    """Plain projected gradient descent on dummy features and adjacency."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels) if cfg.n_hat is None else cfg.n_hat
    if len(labels) != n:
        raise ValueError("need one label per reconstructed node")
    g_true = _as_w1(g_true)
    rng = np.random.default_rng(cfg.seed)
    X = rng.normal(0.0, cfg.init_std, size=(n, params.in_features))
    A = np.triu(rng.uniform(0.0, 1.0, size=(n, n)), 1)
    A = A + A.T

    trace = np.zeros((cfg.epochs + 1, 4))
    for e in range(cfg.epochs + 1):
        total, parts, dX, dA = total_loss_and_grads(params, g_true, X, A, labels, cfg, mask)
        trace[e] = (total, *parts)
        if not np.isfinite(total) or not (np.all(np.isfinite(dX)) and np.all(np.isfinite(dA))):
            raise InversionError(
                f"non-finite objective at epoch {e}: total={total}, cos={parts[0]}, "
                f"smooth={parts[1]}, frob={parts[2]}, |X|max={np.abs(X).max():.3g}"
            )
        if e == cfg.epochs:
            break
        X = X - cfg.lr_x * dX
        A = project_unit(A - cfg.lr_a * dA)
        np.fill_diagonal(A, 0.0)

    a_hat = sample_top_edges(A, int(np.floor(cfg.rho * n)))
    return Reconstruction(X, A, a_hat, labels, trace)
