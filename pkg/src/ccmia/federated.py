"""Federated training rounds with gradient uploads.

Clients compute gradients on their subgraph and upload them; the server
averages the uploads and applies weight decay and momentum:

    dW = mean_k(upload_k) + weight_decay * W
    M  = momentum * M + dW
    W  = W - lr * M

The same server step wraps every strategy's aggregated direction.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import seeding
from .gnn import Gradients, ModelParams, forward, init_params, loss_and_grads
from .graph import Graph, PropagationMode


class Strategy(str, enum.Enum):
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    SCAFFOLD = "scaffold"
    FEDNOVA = "fednova"
    FEDDF_SIMPLIFIED = "feddf_simplified"


@dataclass(frozen=True)
class FedConfig:
    strategy: Strategy = Strategy.FEDAVG
    rounds: int = 100
    local_steps: int | tuple[int, ...] = 1
    lr: float = 1e-3
    local_lr: float | None = None
    momentum: float = 0.0
    weight_decay: float = 0.0
    prox_mu: float = 0.01
    seed: int = 0
    hidden: int = 128
    mode: PropagationMode = PropagationMode.SYM_NORM_ADJ_SELF_LOOPS
    distill_steps: int = 1
    distill_lr: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "mode", PropagationMode(self.mode))
        if not isinstance(self.local_steps, int):
            object.__setattr__(self, "local_steps", tuple(int(s) for s in self.local_steps))
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.prox_mu < 0:
            raise ValueError("weight_decay and prox_mu must be non-negative")
        if min(self.local_steps if isinstance(self.local_steps, tuple) else (self.local_steps,)) < 1:
            raise ValueError("local_steps must be >= 1")

    def steps_list(self, K: int) -> list[int]:
        if isinstance(self.local_steps, int):
            return [self.local_steps] * K
        if len(self.local_steps) != K:
            raise ValueError(f"local_steps lists {len(self.local_steps)} clients, federation has {K}")
        return list(self.local_steps)

    @property
    def client_lr(self) -> float:
        return self.lr if self.local_lr is None else self.local_lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        d["mode"] = self.mode.value
        if not isinstance(self.local_steps, int):
            d["local_steps"] = list(self.local_steps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FedConfig":
        d = dict(d)
        if isinstance(d.get("local_steps"), list):
            d["local_steps"] = tuple(d["local_steps"])
        return cls(**d)


@dataclass
class ClientState:
    control: Gradients | None = None


@dataclass(frozen=True, eq=False)
class RoundRecord:
    round: int
    uploads: tuple[Gradients, ...]
    snapshot: ModelParams
    selected: np.ndarray
    losses: tuple[float, ...] = field(default=())


class FedRun(NamedTuple):
    params: ModelParams
    records: list[RoundRecord]
    log: list[tuple[int, int, float, float]]


SERVER_NOTE = (
    "server applies mean(upload) + weight_decay*W with momentum to every strategy's "
    "aggregated direction; feddf_simplified replaces ensemble distillation by soft-label "
    "steps on a transfer graph"
)


def local_update(global_params: ModelParams, g_k: Graph, cfg: FedConfig, client_state: ClientState | None = None,
                 server_control: Gradients | None = None, steps: int | None = None):
    """One client's round: returns ``(upload, new_state, loss_at_global)``."""
    if not g_k.train_mask.any():
        raise ValueError("client has an empty train mask")
    client_state = client_state or ClientState()
    tau = cfg.steps_list(1)[0] if steps is None else steps
    strategy = cfg.strategy
    lr = cfg.client_lr

    W = global_params
    acc = None
    raw_acc = None
    first_loss = None
    for s in range(tau):
        loss, g = loss_and_grads(W, g_k)
        if first_loss is None:
            first_loss = loss
        raw = g
        if strategy is Strategy.FEDPROX and cfg.prox_mu > 0:
            g = g + (W.as_gradients() - global_params.as_gradients()) * cfg.prox_mu
        elif strategy is Strategy.SCAFFOLD and client_state.control is not None:
            c = server_control if server_control is not None else Gradients.zeros_like(g)
            g = g - client_state.control + c
        acc = g if acc is None else acc + g
        raw_acc = raw if raw_acc is None else raw_acc + raw
        if s + 1 < tau:
            W = W.step(g, lr)

    # plain local SGD: (W_global - W_final) / (tau * lr) == mean of the local directions
    upload = acc / tau
    new_state = client_state
    if strategy is Strategy.SCAFFOLD:
        new_state = ClientState(control=raw_acc / tau)
    return upload, new_state, first_loss


def aggregate(uploads: Sequence[Gradients], W: ModelParams, M: Gradients | None, cfg: FedConfig):
    """Server step with weight decay and momentum; returns ``(W_next, M_next)``."""
    if not uploads:
        raise ValueError("need at least one upload")
    shapes = [a.shape for a in W.tensors().values()]
    for u in uploads:
        if [a.shape for a in u.tensors().values()] != shapes:
            raise ValueError("upload shape does not match the model")
    total = uploads[0]
    for u in uploads[1:]:
        total = total + u
    delta = total / len(uploads)
    if cfg.weight_decay:
        delta = delta + W.as_gradients() * cfg.weight_decay
    if M is None:
        M = Gradients.zeros_like(W)
    M_next = delta if cfg.momentum == 0 else M * cfg.momentum + delta
    return W.step(M_next, cfg.lr), M_next


def _distill(W: ModelParams, client_models: list[ModelParams], transfer: Graph, cfg: FedConfig) -> ModelParams:
    probs = [forward(m, transfer)[2] for m in client_models]
    target = np.mean(probs, axis=0)
    mask = np.ones(transfer.num_nodes, dtype=bool)
    lr = cfg.lr if cfg.distill_lr is None else cfg.distill_lr
    for _ in range(cfg.distill_steps):
        _, g = loss_and_grads(W, transfer, mask, targets=target)
        W = W.step(g, lr)
    return W


def run_federation(graphs: Sequence[Graph], cfg: FedConfig, transfer: Graph | None = None,
                   init: ModelParams | None = None) -> FedRun:
    """Run ``cfg.rounds`` rounds with full participation."""
    K = len(graphs)
    if K < 1:
        raise ValueError("need at least one client")
    if cfg.strategy is Strategy.FEDDF_SIMPLIFIED and transfer is None:
        raise ValueError("feddf_simplified needs a transfer graph")
    d = graphs[0].num_features
    c = max(g.num_classes for g in graphs)
    W = init if init is not None else init_params(d, cfg.hidden, c, seeding.seed_seq(cfg.seed, "init"), cfg.mode)
    steps = cfg.steps_list(K)
    states = [ClientState() for _ in range(K)]
    if cfg.strategy is Strategy.SCAFFOLD:
        states = [ClientState(control=Gradients.zeros_like(W)) for _ in range(K)]
    server_control = Gradients.zeros_like(W)
    M = Gradients.zeros_like(W)
    records: list[RoundRecord] = []
    log: list[tuple[int, int, float, float]] = []

    for t in range(cfg.rounds):
        uploads, losses = [], []
        new_states = []
        for k, g_k in enumerate(graphs):
            up, st, loss = local_update(W, g_k, cfg, states[k], server_control, steps[k])
            uploads.append(up)
            new_states.append(st)
            losses.append(loss)
            log.append((t, k, loss, float(np.sqrt(up.sq_norm()))))
        records.append(RoundRecord(t, tuple(uploads), W, np.ones(K, dtype=bool), tuple(losses)))

        agg = uploads
        if cfg.strategy is Strategy.FEDNOVA:
            tau_eff = float(np.mean(steps))
            if tau_eff != 1.0:
                agg = [u * tau_eff for u in uploads]
        if cfg.strategy is Strategy.SCAFFOLD:
            diff = new_states[0].control - states[0].control
            for k in range(1, K):
                diff = diff + (new_states[k].control - states[k].control)
            server_control = server_control + diff / K
        states = new_states

        W_next, M = aggregate(agg, W, M, cfg)
        if cfg.strategy is Strategy.FEDDF_SIMPLIFIED:
            client_models = [W.step(u, cfg.client_lr) for u in uploads]
            W_next = _distill(W_next, client_models, transfer, cfg)
        W = W_next
    return FedRun(W, records, log)


def round_losses(log) -> np.ndarray:
    """Mean client loss per round from a run log."""
    if not log:
        return np.zeros(0)
    T = max(r[0] for r in log) + 1
    out = np.zeros(T)
    cnt = np.zeros(T)
    for t, _, loss, _ in log:
        out[t] += loss
        cnt[t] += 1
    return out / cnt


def config_json(cfg: FedConfig) -> str:
    return json.dumps({**cfg.to_dict(), "server_note": SERVER_NOTE}, sort_keys=True, indent=2)


