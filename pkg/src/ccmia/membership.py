"""Shadow-model membership inference on first-layer GCN embeddings.

The attacker trains its own GCN on a shadow graph with a known member split,
takes the first-layer embeddings, and fits an MLP member/non-member
classifier on them. Target nodes are scored by passing the *global* model's
first-layer embeddings through that classifier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .gnn import ModelParams, first_layer_embedding, init_params, loss_and_grads, softmax
from .graph import Graph, PropagationMode

BN_EPS = 1e-5


# ------------------------------------------------------------ attacker GCN


@dataclass(frozen=True)
class GnnHyper:
    hidden: int = 128
    lr: float = 1e-3
    epochs: int = 100
    momentum: float = 0.0
    weight_decay: float = 0.0
    mode: PropagationMode = PropagationMode.SYM_NORM_ADJ_SELF_LOOPS

    def __post_init__(self):
        object.__setattr__(self, "mode", PropagationMode(self.mode))
        if self.epochs < 0 or not self.lr > 0:
            raise ValueError("need epochs >= 0 and lr > 0")


class AttackerGnn(NamedTuple):
    params: ModelParams
    members: np.ndarray
    losses: np.ndarray


def shadow_split(n: int, train_fraction: float, seed) -> np.ndarray:
    """Boolean member mask with exactly ``ceil(train_fraction * n)`` members."""
    k = math.ceil(train_fraction * n)
    if not 0 < k < n:
        raise ValueError(f"split of {n} nodes at fraction {train_fraction} leaves a side empty")
    rng = np.random.default_rng(seed)
    members = np.zeros(n, dtype=bool)
    members[rng.permutation(n)[:k]] = True
    return members


def train_attacker_gnn(shadow: Graph, train_fraction: float = 0.4, hyper: GnnHyper | None = None,
                       seed: int = 0, init: ModelParams | None = None) -> AttackerGnn:
    """Full-batch training on the shadow member split.

    ``init`` lets the attacker start from the global model it receives each
    round, which keeps its embedding space aligned with the target's.
    """
    hyper = hyper or GnnHyper()
    if len(np.unique(shadow.labels)) < 2:
        raise ValueError("shadow graph needs at least two classes")
    members = shadow_split(shadow.num_nodes, train_fraction, np.random.SeedSequence(seed, spawn_key=(1,)))
    if init is None:
        W = init_params(shadow.num_features, hyper.hidden, shadow.num_classes,
                        np.random.SeedSequence(seed, spawn_key=(2,)), hyper.mode)
    else:
        if init.in_features != shadow.num_features:
            raise ValueError("init model and shadow graph disagree on feature width")
        W = init
    M = None
    losses = []
    for _ in range(hyper.epochs):
        loss, g = loss_and_grads(W, shadow, members)
        losses.append(loss)
        if hyper.weight_decay:
            g = g + W.as_gradients() * hyper.weight_decay
        M = g if M is None or hyper.momentum == 0 else M * hyper.momentum + g
        W = W.step(M, hyper.lr)
    return AttackerGnn(W, members, np.array(losses))


@dataclass(frozen=True, eq=False)
class AttackDataset:
    embeddings: np.ndarray
    member_labels: np.ndarray
    nodes: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.member_labels, dtype=bool)
        if len(y) != len(self.embeddings):
            raise ValueError("one label per embedding row")
        object.__setattr__(self, "member_labels", y)


def build_attack_dataset(attacker: ModelParams, shadow: Graph, members: np.ndarray) -> AttackDataset:
    emb = first_layer_embedding(attacker, shadow)
    return AttackDataset(emb, np.asarray(members, dtype=bool), np.arange(shadow.num_nodes))


# ------------------------------------------------------------------- MLP


@dataclass(frozen=True)
class MlpHyper:
    hidden: tuple[int, ...] = (128, 128)
    keep: float = 0.5
    batchnorm: bool = True
    lr: float = 1e-3
    steps: int = 500
    bn_momentum: float = 0.1
    sort_units: bool = True

    def __post_init__(self):
        if not 0.0 < self.keep <= 1.0:
            raise ValueError("keep probability must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Hidden layers ``(W, b, gamma, beta, running_mean, running_var)`` and a 2-way head."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    gammas: tuple[np.ndarray, ...]
    betas: tuple[np.ndarray, ...]
    running_mean: tuple[np.ndarray, ...]
    running_var: tuple[np.ndarray, ...]
    head_W: np.ndarray
    head_b: np.ndarray
    keep: float = 0.5
    batchnorm: bool = True
    sort_units: bool = True

    @property
    def in_features(self) -> int:
        return (self.weights[0] if self.weights else self.head_W).shape[0]

    def trainable(self) -> dict[str, np.ndarray]:
        out = {"head_W": self.head_W, "head_b": self.head_b}
        for i in range(len(self.weights)):
            out[f"W{i}"] = self.weights[i]
            out[f"b{i}"] = self.biases[i]
            if self.batchnorm:
                out[f"gamma{i}"] = self.gammas[i]
                out[f"beta{i}"] = self.betas[i]
        return out

    def with_trainable(self, t: dict[str, np.ndarray]) -> "MlpParams":
        L = len(self.weights)
        return replace(
            self,
            weights=tuple(t[f"W{i}"] for i in range(L)),
            biases=tuple(t[f"b{i}"] for i in range(L)),
            gammas=tuple(t.get(f"gamma{i}", self.gammas[i]) for i in range(L)),
            betas=tuple(t.get(f"beta{i}", self.betas[i]) for i in range(L)),
            head_W=t["head_W"],
            head_b=t["head_b"],
        )

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.trainable())
        for i in range(len(self.weights)):
            out[f"gamma{i}"] = self.gammas[i]
            out[f"beta{i}"] = self.betas[i]
            out[f"running_mean{i}"] = self.running_mean[i]
            out[f"running_var{i}"] = self.running_var[i]
        return out

    def meta(self) -> dict:
        return {"layers": len(self.weights), "keep": self.keep, "batchnorm": self.batchnorm,
                "sort_units": self.sort_units}

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray], meta: dict) -> "MlpParams":
        L = int(meta["layers"])
        g = lambda name: tuple(t[f"{name}{i}"] for i in range(L))  # noqa: E731
        return cls(g("W"), g("b"), g("gamma"), g("beta"), g("running_mean"), g("running_var"),
                   t["head_W"], t["head_b"], float(meta["keep"]), bool(meta["batchnorm"]),
                   bool(meta.get("sort_units", True)))


def init_mlp(in_features: int, hyper: MlpHyper, seed) -> MlpParams:
    rng = np.random.default_rng(seed)
    sizes = (in_features, *hyper.hidden)
    Ws, bs = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (a + b))
        Ws.append(rng.uniform(-lim, lim, size=(a, b)))
        bs.append(np.zeros(b))
    lim = np.sqrt(6.0 / (sizes[-1] + 2))
    ones = tuple(np.ones(h) for h in hyper.hidden)
    zeros = tuple(np.zeros(h) for h in hyper.hidden)
    return MlpParams(tuple(Ws), tuple(bs), ones, zeros, zeros, ones,
                     rng.uniform(-lim, lim, size=(sizes[-1], 2)), np.zeros(2), hyper.keep, hyper.batchnorm,
                     hyper.sort_units)


def mlp_forward(p: MlpParams, X: np.ndarray, train: bool = False, rng: np.random.Generator | None = None,
                masks=None):
    """Class probabilities; in training mode also returns a cache for backprop.

    Each hidden layer is linear -> batchnorm -> relu -> dropout mask. Dropout
    is inverted (kept units scaled by 1/keep) so inference needs no rescaling.
    ``masks`` may supply fixed dropout masks instead of drawing from ``rng``.

    With ``sort_units`` each input row is first sorted in descending order.
    Hidden units of two independently trained GCNs carry no shared meaning,
    so the classifier only sees the activation profile, which transfers from
    the attacker's model to the global one.
    """
    H = np.asarray(X, dtype=np.float64)
    if p.sort_units:
        H = -np.sort(-H, axis=1)
    cache = []
    for i in range(len(p.weights)):
        Z = H @ p.weights[i] + p.biases[i]
        entry = {"H_in": H}
        if p.batchnorm:
            if train:
                mu, var = Z.mean(axis=0), Z.var(axis=0)
            else:
                mu, var = p.running_mean[i], p.running_var[i]
            inv = 1.0 / np.sqrt(var + BN_EPS)
            Zh = (Z - mu) * inv
            B = p.gammas[i] * Zh + p.betas[i]
            entry.update(Zh=Zh, inv=inv, mu=mu, var=var)
        else:
            B = Z
        A = np.maximum(B, 0.0)
        if train and p.keep < 1.0:
            if masks is not None:
                M = masks[i]
            else:
                M = (rng.random(A.shape) < p.keep) / p.keep
            entry["M"] = M
            A = A * M
        entry["B"] = B
        cache.append(entry)
        H = A
    logits = H @ p.head_W + p.head_b
    probs = softmax(logits)
    if train:
        return probs, (cache, H)
    return probs


def mlp_loss_and_grads(p: MlpParams, X, y, rng=None, masks=None):
    """Mean cross-entropy in training mode and gradients of the trainable tensors.

    Also returns the batch statistics ``[(mean, var), ...]`` for running averages.
    """
    y = np.asarray(y, dtype=np.int64)
    probs, (cache, H) = mlp_forward(p, X, train=True, rng=rng, masks=masks)
    n = len(y)
    loss = float(-np.mean(np.log(np.clip(probs[np.arange(n), y], 1e-300, None))))
    G = probs.copy()
    G[np.arange(n), y] -= 1.0
    G /= n
    grads = {"head_W": H.T @ G, "head_b": G.sum(axis=0)}
    dH = G @ p.head_W.T
    stats = []
    for i in reversed(range(len(p.weights))):
        e = cache[i]
        dA = dH * e["M"] if "M" in e else dH
        dB = dA * (e["B"] > 0)
        if p.batchnorm:
            Zh, inv = e["Zh"], e["inv"]
            grads[f"gamma{i}"] = np.sum(dB * Zh, axis=0)
            grads[f"beta{i}"] = np.sum(dB, axis=0)
            dZh = dB * p.gammas[i]
            dZ = inv / n * (n * dZh - dZh.sum(axis=0) - Zh * np.sum(dZh * Zh, axis=0))
            stats.append((e["mu"], e["var"]))
        else:
            dZ = dB
        grads[f"W{i}"] = e["H_in"].T @ dZ
        grads[f"b{i}"] = dZ.sum(axis=0)
        dH = dZ @ p.weights[i].T
    stats.reverse()
    return loss, grads, stats


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            out[k] = params[k] - self.lr * mh / (np.sqrt(vh) + self.eps)
        return out


def train_mlp(ds: AttackDataset, hyper: MlpHyper | None = None, seed: int = 0,
              return_losses: bool = False):
    """Full-batch Adam on the member/non-member cross-entropy.

    Dropout masks are redrawn every step; batchnorm running statistics are
    updated with momentum ``hyper.bn_momentum``.
    """
    hyper = hyper or MlpHyper()
    y = ds.member_labels.astype(np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("attack dataset has a single class")
    p = init_mlp(ds.embeddings.shape[1], hyper, np.random.SeedSequence(seed, spawn_key=(0,)))
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    opt = _Adam(hyper.lr)
    losses = []
    rm, rv = list(p.running_mean), list(p.running_var)
    for _ in range(hyper.steps):
        loss, grads, stats = mlp_loss_and_grads(p, ds.embeddings, y, rng=rng)
        losses.append(loss)
        p = p.with_trainable(opt.step(p.trainable(), grads))
        if hyper.batchnorm:
            m = hyper.bn_momentum
            n = len(y)
            for i, (mu, var) in enumerate(stats):
                rm[i] = (1 - m) * rm[i] + m * mu
                rv[i] = (1 - m) * rv[i] + m * var * n / max(n - 1, 1)
    p = replace(p, running_mean=tuple(rm), running_var=tuple(rv))
    return (p, np.array(losses)) if return_losses else p


def mlp_scores(p: MlpParams, X: np.ndarray) -> np.ndarray:
    """Member-class probability in inference mode."""
    return mlp_forward(p, X, train=False)[:, 1]


def infer_membership(clf: MlpParams, global_params: ModelParams, target: Graph, nodes=None) -> np.ndarray:
    if clf.in_features != global_params.hidden:
        raise ValueError(
            f"classifier expects width {clf.in_features}, global first layer has {global_params.hidden}"
        )
    emb = first_layer_embedding(global_params, target)
    nodes = np.arange(target.num_nodes) if nodes is None else np.asarray(nodes, dtype=np.int64)
    return mlp_scores(clf, emb[nodes])
