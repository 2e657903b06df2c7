"""Two-layer GCN: forward pass, exact backpropagation and checkpoints.

All matrices are dense. The forward pass is

    E1     = relu(P X W1 + 1 b1^T)
    logits = P E1 W2 + 1 b2^T
    probs  = softmax(logits)

with ``P`` the propagation operator chosen by :class:`PropagationMode`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .graph import Graph, PropagationMode, propagation_matrix
from .tensorio import load_tensors, save_tensors

PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass(frozen=True)
class Gradients:
    """A bundle of tensors shaped like the GCN parameters."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def map(self, fn, *others) -> "Gradients":
        return Gradients(*(fn(getattr(self, k), *(getattr(o, k) for o in others)) for k in PARAM_NAMES))

    def __add__(self, other):
        return self.map(np.add, other)

    def __sub__(self, other):
        return self.map(np.subtract, other)

    def __mul__(self, c: float):
        return self.map(lambda a: a * c)

    __rmul__ = __mul__

    def __truediv__(self, c: float):
        return self.map(lambda a: a / c)

    def sq_norm(self) -> float:
        return float(sum(np.sum(a * a) for a in self.tensors().values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.tensors().values()])

    def equal(self, other: "Gradients") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in PARAM_NAMES)

    @classmethod
    def zeros_like(cls, p) -> "Gradients":
        return cls(*(np.zeros_like(getattr(p, k)) for k in PARAM_NAMES))


@dataclass(frozen=True)
class ModelParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    mode: PropagationMode = PropagationMode.SYM_NORM_ADJ_SELF_LOOPS

    def __post_init__(self):
        object.__setattr__(self, "mode", PropagationMode(self.mode))
        d, h = np.shape(self.W1)
        if np.shape(self.b1) != (h,) or np.shape(self.W2)[0] != h or np.shape(self.b2) != (np.shape(self.W2)[1],):
            raise ValueError("inconsistent parameter shapes")

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def in_features(self) -> int:
        return self.W1.shape[0]

    @property
    def num_classes(self) -> int:
        return self.W2.shape[1]

    def as_gradients(self) -> Gradients:
        return Gradients(self.W1, self.b1, self.W2, self.b2)

    def tensors(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def step(self, direction: Gradients, lr: float) -> "ModelParams":
        """``self - lr * direction``."""
        return replace(self, **{k: getattr(self, k) - lr * getattr(direction, k) for k in PARAM_NAMES})

    def with_tensors(self, g: Gradients) -> "ModelParams":
        return replace(self, **g.tensors())

    def equal(self, other: "ModelParams") -> bool:
        return self.mode == other.mode and self.as_gradients().equal(other.as_gradients())


def init_params(in_features: int, hidden: int, num_classes: int, seed,
                mode: PropagationMode | str = PropagationMode.SYM_NORM_ADJ_SELF_LOOPS) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    l1 = np.sqrt(6.0 / (in_features + hidden))
    l2 = np.sqrt(6.0 / (hidden + num_classes))
    return ModelParams(
        rng.uniform(-l1, l1, size=(in_features, hidden)),
        np.zeros(hidden),
        rng.uniform(-l2, l2, size=(hidden, num_classes)),
        np.zeros(num_classes),
        PropagationMode(mode),
    )


def _check_shapes(p: ModelParams, g: Graph) -> None:
    if p.in_features != g.num_features:
        raise ValueError(f"model expects {p.in_features} features, graph has {g.num_features}")
    if p.num_classes < g.num_classes:
        raise ValueError(f"model has {p.num_classes} outputs, graph has {g.num_classes} classes")


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def forward(p: ModelParams, g: Graph):
    """Return ``(E1, logits, probs)``."""
    _check_shapes(p, g)
    P = propagation_matrix(g, p.mode)
    E1 = np.maximum(P @ g.features @ p.W1 + p.b1, 0.0)
    logits = P @ E1 @ p.W2 + p.b2
    return E1, logits, softmax(logits)


def first_layer_embedding(p: ModelParams, g: Graph) -> np.ndarray:
    return forward(p, g)[0]


def loss_and_grads(p: ModelParams, g: Graph, mask=None, targets: np.ndarray | None = None):
    """Mean cross-entropy over the masked nodes and its exact gradients.

    ``mask`` defaults to the graph's train mask. ``targets`` optionally
    replaces the one-hot labels with soft target rows (used for distillation).
    """
    _check_shapes(p, g)
    mask = g.train_mask if mask is None else np.asarray(mask, dtype=bool)
    m = int(mask.sum())
    if m == 0:
        raise ValueError("mask selects no nodes")
    if targets is None:
        Y = np.zeros((g.num_nodes, p.num_classes))
        Y[np.arange(g.num_nodes), g.labels] = 1.0
    else:
        Y = np.asarray(targets, dtype=np.float64)

    P = propagation_matrix(g, p.mode)
    Q = P @ g.features
    Z1 = Q @ p.W1 + p.b1
    E1 = np.maximum(Z1, 0.0)
    R = P @ E1
    Z2 = R @ p.W2 + p.b2
    logp = log_softmax(Z2)
    loss = float(-np.sum(Y[mask] * logp[mask]) / m)

    G2 = np.exp(logp) - Y
    G2[~mask] = 0.0
    G2 /= m
    dW2 = R.T @ G2
    db2 = G2.sum(axis=0)
    dZ1 = (P @ (G2 @ p.W2.T)) * (Z1 > 0)
    dW1 = Q.T @ dZ1
    db1 = dZ1.sum(axis=0)
    return loss, Gradients(dW1, db1, dW2, db2)


def accuracy(p: ModelParams, g: Graph, mask=None) -> float:
    mask = g.test_mask if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        return float("nan")
    pred = forward(p, g)[2].argmax(axis=1)
    return float(np.mean(pred[mask] == g.labels[mask]))


def grad_check(p: ModelParams, g: Graph, mask=None, eps: float = 1e-4, floor: float = 1e-7) -> float:
    """Max relative error between analytic gradients and central differences.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps entries that vanish on both routes from dominating.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    _, grads = loss_and_grads(p, g, mask)
    worst = 0.0
    for name in PARAM_NAMES:
        base = getattr(p, name)
        analytic = getattr(grads, name)
        for idx in np.ndindex(base.shape):
            hi = base.copy()
            lo = base.copy()
            hi[idx] += eps
            lo[idx] -= eps
            f_hi = loss_and_grads(replace(p, **{name: hi}), g, mask)[0]
            f_lo = loss_and_grads(replace(p, **{name: lo}), g, mask)[0]
            num = (f_hi - f_lo) / (2 * eps)
            a = analytic[idx]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst


def save_params(p: ModelParams, path: str | os.PathLike, meta: dict | None = None) -> None:
    save_tensors(path, p.tensors(), {"mode": p.mode.value, **(meta or {})})


def load_params(path: str | os.PathLike) -> ModelParams:
    t, meta = load_tensors(path)
    return ModelParams(t["W1"], t["b1"], t["W2"], t["b2"], PropagationMode(meta["mode"]))


def gradients_to_tensors(g: Gradients, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v for k, v in g.tensors().items()}


def gradients_from_tensors(t: dict[str, np.ndarray], prefix: str = "") -> Gradients:
    return Gradients(*(t[prefix + k] for k in PARAM_NAMES))


__all__ = [
    "Gradients", "ModelParams", "init_params", "forward", "first_layer_embedding",
    "loss_and_grads", "grad_check", "accuracy", "save_params", "load_params", "softmax",
]
