"""Server-side ensemble distillation of one architecture's student."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..model_dsl import LayerGraph
from ..nn import Batch, NonFiniteLoss, build_network, kl_distill, load_blob_into, network_to_blob, predict, train_step
from ..nn.losses import distill_loss
from .aggregation import EmptyInput, fedavg_weights


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 1.0
    lr: float = 0.01
    batch_size: int = 32
    eval_every: int = 20
    patience: int = 5
    min_delta: float = 1e-4
    max_steps: int = 1000
    val_fraction: float = 0.1
    optimizer: str = "sgd"


@dataclass(frozen=True)
class DistillResult:
    blob: bytes
    steps: int
    best_val_loss: float
    initial_val_loss: float
    stop_reason: str


def teacher_logits(teachers: Sequence[tuple[LayerGraph, bytes]], features: np.ndarray) -> np.ndarray:
    """Mean of the teachers' pre-softmax outputs on ``features``."""
    if not teachers:
        raise EmptyInput("ensemble distillation needs at least one teacher")
    total = None
    for graph, blob in teachers:
        net = build_network(graph, 0)
        load_blob_into(net, blob)
        out = predict(net, features)
        total = out if total is None else total + out
    return total / len(teachers)


def ensemble_distill(
    student: LayerGraph,
    init_weights: bytes | Sequence[tuple[bytes, int]],
    teachers: Sequence[tuple[LayerGraph, bytes]],
    public_features: np.ndarray,
    config: DistillConfig = DistillConfig(),
    seed: int = 0,
    *,
    targets: np.ndarray | None = None,
    check: Callable[[], None] | None = None,
) -> DistillResult:
    """Distill the averaged teacher logits into ``student``.

    ``init_weights`` is either one blob or ``(blob, sample_count)`` pairs of
    same-architecture teachers, which are FedAvg-combined. A held-out slice
    of the public data is scored every ``eval_every`` steps; training stops
    after ``patience`` evaluations without an improvement of ``min_delta`` or
    at ``max_steps``, and the best-scoring weights are returned. Pass
    precomputed teacher ``targets`` to skip the teacher forward passes.
    """
    if isinstance(init_weights, (bytes, bytearray)):
        blob = bytes(init_weights)
    else:
        pairs = list(init_weights)
        blob = fedavg_weights([b for b, _ in pairs], [c for _, c in pairs])
    features = np.asarray(public_features, dtype=np.float64)
    if targets is None:
        targets = teacher_logits(teachers, features)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(features))
    n_val = max(1, math.ceil(config.val_fraction * len(features)))
    if n_val >= len(features):
        raise ValueError("public set too small for a validation split")
    val_idx, train_idx = np.sort(perm[:n_val]), perm[n_val:]
    xv, tv = features[val_idx], targets[val_idx]

    net = build_network(student, seed, config.optimizer)
    load_blob_into(net, blob)
    loss = kl_distill(config.temperature)

    def score() -> float:
        return distill_loss(predict(net, xv), tv, config.temperature)

    best = initial = score()
    best_weights = net.copy_weights()
    bad = 0
    steps = 0
    reason = "max_steps"
    evaluated_at = 0
    stop = config.max_steps == 0
    while not stop:
        order = rng.permutation(train_idx)
        for start in range(0, len(order), config.batch_size):
            if steps >= config.max_steps:
                stop = True
                break
            if check is not None:
                check()
            idx = order[start : start + config.batch_size]
            try:
                train_step(net, Batch(features[idx], targets[idx]), loss, config.lr)
            except NonFiniteLoss:
                reason, stop = "non_finite", True
                break
            steps += 1
            if steps % config.eval_every == 0:
                evaluated_at = steps
                value = score()
                if value < best - config.min_delta:
                    best, best_weights, bad = value, net.copy_weights(), 0
                else:
                    bad += 1
                    if bad >= config.patience:
                        reason, stop = "plateau", True
                        break
    if reason == "max_steps" and steps > evaluated_at:
        value = score()
        if value < best - config.min_delta:
            best, best_weights = value, net.copy_weights()
    net.set_weights(best_weights)
    return DistillResult(network_to_blob(net), steps, best, initial, reason)
