"""Straggler-aware client selection: EMA of training durations plus per-architecture round-robin."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence


class InvalidBeta(ValueError):
    pass


class NotEnoughClients(ValueError):
    pass


@dataclass(frozen=True)
class ClientProfile:
    client_id: str
    architecture_id: str
    graph_hash: str = ""
    model_ref: str = ""
    partition_ref: str = ""
    hyperparameters: Mapping[str, Any] = field(default_factory=dict)
    ema_duration_ms: float | None = None
    recent_failures: int = 0

    def __post_init__(self):
        if self.ema_duration_ms is not None and self.ema_duration_ms < 0:
            raise ValueError("ema_duration_ms must be nonnegative")
        if self.recent_failures < 0:
            raise ValueError("recent_failures must be nonnegative")

    def observe(self, outcome: str, duration_ms: float, beta: float) -> ClientProfile:
        """Profile after one training invocation; only completed runs move the EMA."""
        if outcome == "ok":
            return replace(self, ema_duration_ms=update_ema(self.ema_duration_ms, duration_ms, beta), recent_failures=0)
        return replace(self, recent_failures=self.recent_failures + 1)


def update_ema(prev: float | None, observed_ms: float, beta: float) -> float:
    if not 0.0 < beta <= 1.0:
        raise InvalidBeta(f"beta must lie in (0, 1], got {beta}")
    if observed_ms < 0:
        raise ValueError("observed duration must be nonnegative")
    if prev is None:
        return float(observed_ms)
    return beta * observed_ms + (1.0 - beta) * prev


def _rank(p: ClientProfile) -> tuple:
    if p.recent_failures > 0:
        tier = 2
    elif p.ema_duration_ms is None:
        tier = 0
    else:
        tier = 1
    ema = p.ema_duration_ms if p.ema_duration_ms is not None else 0.0
    return (tier, ema, p.client_id)


def select_clients(pool: Sequence[ClientProfile], n: int, round: int = 0, rotate: bool = True) -> list[str]:
    """Pick ``n`` client ids.

    Within each architecture group clients are ranked: unknown EMA first, then
    ascending EMA, then clients with recent failures. Groups are then drained
    round-robin in architecture order. With ``rotate`` the group that opens
    the round-robin advances with the round number, so leftover slots are not
    always granted to the same architecture.
    """
    if not 1 <= n <= len(pool):
        raise NotEnoughClients(f"cannot select {n} of {len(pool)} clients")
    groups: dict[str, list[ClientProfile]] = {}
    for p in pool:
        groups.setdefault(p.architecture_id, []).append(p)
    order = sorted(groups)
    queues = {a: sorted(groups[a], key=_rank) for a in order}
    if rotate and order:
        k = round % len(order)
        order = order[k:] + order[:k]
    picked: list[str] = []
    depth = 0
    while len(picked) < n:
        for arch in order:
            if depth < len(queues[arch]) and len(picked) < n:
                picked.append(queues[arch][depth].client_id)
        depth += 1
    return picked
