"""Metric (d_chi) privacy on node features for the Euclidean metric.

Each row gets additive noise ``r * u`` with ``u`` uniform on the unit sphere
and ``r ~ Gamma(D, 1/eta)``; the density of the noise is proportional to
``exp(-eta * |z|)``, which gives ``eta * d``-privacy w.r.t. Euclidean ``d``.
``eta = inf`` is a no-op sentinel.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .graph import Graph


class Metric(str, enum.Enum):
    EUCLIDEAN = "euclidean"


@dataclass(frozen=True)
class DefenseConfig:
    eta: float = math.inf
    metric: Metric = Metric.EUCLIDEAN
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric(self.metric))
        object.__setattr__(self, "eta", float(self.eta))
        if not self.eta > 0:
            raise ValueError(f"privacy budget must be positive, got {self.eta}")

    @property
    def active(self) -> bool:
        return math.isfinite(self.eta)


def sphere_noise(n: int, d: int, eta: float, rng: np.random.Generator) -> np.ndarray:
    u = rng.normal(size=(n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = rng.gamma(shape=d, scale=1.0 / eta, size=n)
    return u * r[:, None]


def perturb_features(X: np.ndarray, cfg: DefenseConfig) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if not cfg.active:
        return X
    rng = np.random.default_rng(cfg.seed)
    return X + sphere_noise(X.shape[0], X.shape[1], cfg.eta, rng)


def perturb_graph(g: Graph, cfg: DefenseConfig) -> Graph:
    """Same graph with perturbed features; the very same object when inactive."""
    if not cfg.active:
        return g
    return g.with_features(perturb_features(g.features, cfg))


def tradeoff_sweep(etas, exp_cfg, seeds=None) -> list[dict]:
    """Rerun federation and both attacks once per ``(eta, seed)``.

    Rows carry ``eta, test_acc, mi_auc, own_acc, seed``.
    """
    from .pipeline import run_experiment

    seeds = [exp_cfg.seed] if seeds is None else list(seeds)
    rows = []
    for eta in etas:
        for s in seeds:
            res = run_experiment(exp_cfg.with_seed(s), eta=eta)
            rows.append({"eta": float(eta), "test_acc": res.test_acc, "mi_auc": res.mi_auc,
                         "own_acc": res.own_acc, "seed": s})
    return rows
