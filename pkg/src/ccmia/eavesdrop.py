"""Interception of client uploads.

Each (round, client) upload is intercepted independently with probability
``gamma``. Missed cells are either filled with the last intercepted upload of
the same client (``zero_order_hold``; zeros before the first success) or left
empty (``skip``).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .federated import RoundRecord
from .gnn import Gradients


class ProxyRule(str, enum.Enum):
    ZERO_ORDER_HOLD = "zero_order_hold"
    SKIP = "skip"


@dataclass(frozen=True)
class TapConfig:
    gamma: float = 1.0
    seed: int = 0
    proxy_rule: ProxyRule = ProxyRule.ZERO_ORDER_HOLD

    def __post_init__(self):
        object.__setattr__(self, "proxy_rule", ProxyRule(self.proxy_rule))
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class TapTrace:
    """``intercepted`` and ``selected`` are T x K; ``estimates[t][k]`` is
    a Gradients object, or None for skipped cells. ``source_round[t, k]`` is the
    round whose upload the estimate came from (-1 for zeros or skipped)."""

    rounds: np.ndarray
    intercepted: np.ndarray
    selected: np.ndarray
    estimates: tuple[tuple[Gradients | None, ...], ...]
    source_round: np.ndarray


def tap(records: list[RoundRecord], cfg: TapConfig) -> TapTrace:
    if not records:
        raise ValueError("no rounds to tap")
    T = len(records)
    K = len(records[0].uploads)
    rng = np.random.default_rng(cfg.seed)
    hit = rng.random((T, K)) < cfg.gamma
    held: list[Gradients | None] = [None] * K
    held_round = np.full(K, -1)
    estimates = []
    source = np.full((T, K), -1)
    for t, rec in enumerate(records):
        row = []
        for k in range(K):
            if hit[t, k]:
                held[k] = rec.uploads[k]
                held_round[k] = rec.round
                row.append(rec.uploads[k])
                source[t, k] = rec.round
            elif cfg.proxy_rule is ProxyRule.SKIP:
                row.append(None)
            elif held[k] is None:
                row.append(Gradients.zeros_like(rec.uploads[k]))
            else:
                row.append(held[k])
                source[t, k] = held_round[k]
        estimates.append(tuple(row))
    selected = np.stack([np.asarray(r.selected, dtype=bool) for r in records])
    return TapTrace(np.array([r.round for r in records]), hit, selected, tuple(estimates), source)


def cell_errors(trace: TapTrace, records: list[RoundRecord]) -> np.ndarray:
    """T x K squared Frobenius errors; NaN where the proxy rule left a gap."""
    T, K = trace.intercepted.shape
    out = np.zeros((T, K))
    for t in range(T):
        for k in range(K):
            est = trace.estimates[t][k]
            if trace.intercepted[t, k]:
                out[t, k] = 0.0
            elif est is None:
                out[t, k] = np.nan
            else:
                out[t, k] = (records[t].uploads[k] - est).sq_norm()
    return out


def estimation_error(trace: TapTrace, records: list[RoundRecord]) -> np.ndarray:
    """Per-round mean over clients of the squared estimation error.

    A round containing a skipped cell is NaN (undefined).
    """
    return cell_errors(trace, records).mean(axis=1)


def latest_intercepted(trace: TapTrace, records: list[RoundRecord], client: int):
    """``(snapshot, upload)`` of the most recent intercepted round for ``client``,
    or None if the attacker never saw it."""
    hits = np.flatnonzero(trace.intercepted[:, client])
    if not len(hits):
        return None
    t = int(hits[-1])
    return records[t].snapshot, records[t].uploads[client]
