"""Function handlers. Each takes ``(payload, ctx)`` and talks only to ``ctx.store`` and ``ctx.data``.

Payloads carry store references ``[namespace, owner, round]`` rather than
arrays. Per-client settings (model description, partition indices, seeds,
hyperparameters) are read from the ``client_config`` namespace.
"""

from __future__ import annotations

import json
from functools import lru_cache
from typing import Any

import numpy as np

from ..data import public_subset
from ..model_dsl import LayerGraph, parse_model_spec
from ..nn import (
    CROSS_ENTROPY,
    LossKind,
    build_network,
    evaluate as evaluate_net,
    fit,
    forward_macs,
    iter_batches,
    load_blob_into,
    network_to_blob,
    predict,
)
from ..nn.losses import compute_loss
from ..store import StoreKey
from .aggregation import aggregate_logits, decode_array, encode_array, fedavg_weights
from .distill import DistillConfig, ensemble_distill, teacher_logits

# throughput assumed by the "modeled" time model
FLOPS_PER_VCPU_MS = 2.4e5


def ref(namespace: str, owner: str, round: int) -> list:
    return [namespace, owner, int(round)]


def key_of(reference) -> StoreKey:
    namespace, owner, round = reference
    return StoreKey(namespace, owner, int(round))


@lru_cache(maxsize=128)
def _graph(text: str) -> LayerGraph:
    return parse_model_spec(text)


def client_config(ctx, owner: str) -> dict[str, Any]:
    return json.loads(ctx.store.get_bytes(StoreKey("client_config", owner, 0)))


def _network(ctx, cfg, weights=None):
    net = build_network(_graph(cfg["model"]), cfg["init_seed"], cfg.get("optimizer", "sgd"))
    if weights is not None:
        load_blob_into(net, ctx.store.get_bytes(key_of(weights)))
    return net


def _charge(ctx, net, samples: int, passes: float) -> None:
    """Declare modeled compute: ``passes`` forward-equivalents over ``samples`` inputs."""
    ctx.charge(2.0 * forward_macs(net) * samples * passes / (ctx.vcpus * FLOPS_PER_VCPU_MS))


def _private(ctx, cfg):
    data = ctx.data["private"]
    idx = np.asarray(cfg["indices"], dtype=np.int64)
    return data.features[idx], data.labels[idx] + cfg.get("label_offset", 0)


def _train(ctx, net, cfg, x, y, loss, epochs, seed, lr=None):
    lr = cfg["lr"] if lr is None else lr
    losses = fit(net, x, y, loss, epochs, cfg["batch_size"], lr, seed, on_batch=ctx.check)
    _charge(ctx, net, len(x) * epochs, 3.0)
    return losses


# ---------------------------------------------------------------------------
# shared handlers


def local_train(payload, ctx):
    """Train on the client's private partition (transfer fine-tune, revisit, FedDF local step)."""
    cfg = client_config(ctx, payload["client"])
    net = _network(ctx, cfg, payload.get("src"))
    x, y = _private(ctx, cfg)
    losses = _train(ctx, net, cfg, x, y, CROSS_ENTROPY, payload["epochs"], payload["seed"])
    ctx.store.put_bytes(key_of(payload["dst"]), network_to_blob(net))
    return {"samples": int(len(x)), "losses": losses}


def evaluate(payload, ctx):
    """Top-1 accuracy of stored weights on a catalog dataset."""
    cfg = client_config(ctx, payload["config"])
    net = _network(ctx, cfg, payload["src"])
    data = ctx.data[payload["dataset"]]
    labels = data.labels + payload.get("label_offset", 0)
    metrics = evaluate_net(net, iter_batches(data.features, labels))
    _charge(ctx, net, len(data), 1.0)
    return metrics


# ---------------------------------------------------------------------------
# FedMD


def transfer_public(payload, ctx):
    """Train on the labeled public set with early stopping on a validation split."""
    cfg = client_config(ctx, payload["client"])
    net = _network(ctx, cfg)
    train, val = ctx.data["public"].split(payload["val_fraction"], payload["seed"])

    def val_metrics():
        _charge(ctx, net, len(val), 1.0)
        return evaluate_net(net, iter_batches(val.features, val.labels))

    before = val_metrics()
    best_loss, best_weights, bad, epochs = before["mean_loss"], net.copy_weights(), 0, 0
    for epoch in range(payload["max_epochs"]):
        _train(ctx, net, cfg, train.features, train.labels, CROSS_ENTROPY, 1, [payload["seed"], epoch])
        epochs += 1
        loss = val_metrics()["mean_loss"]
        if loss < best_loss:
            best_loss, best_weights, bad = loss, net.copy_weights(), 0
        else:
            bad += 1
            if bad >= payload["patience"]:
                break
    net.set_weights(best_weights)
    after = val_metrics()
    ctx.store.put_bytes(key_of(payload["dst"]), network_to_blob(net))
    return {"epochs": epochs, "val_accuracy_before": before["top1_accuracy"],
            "val_accuracy_after": after["top1_accuracy"]}


def _round_subset(ctx, payload):
    size, seed = payload["subset"]
    idx = public_subset(len(ctx.data["public"]), size, seed)
    return idx, ctx.data["public"].features[idx]


def communicate(payload, ctx):
    """Logits of the client model on the round's public subset."""
    cfg = client_config(ctx, payload["client"])
    net = _network(ctx, cfg, payload["src"])
    _, x = _round_subset(ctx, payload)
    logits = predict(net, x)
    _charge(ctx, net, len(x), 1.0)
    ctx.store.put_bytes(key_of(payload["dst"]), encode_array(logits))
    return {"rows": int(len(x))}


def aggregate(payload, ctx):
    """Average the listed clients' logits into the round consensus."""
    matrices = [decode_array(ctx.store.get_bytes(key_of(r))) for r in payload["logits"]]
    idx, _ = _round_subset(ctx, payload)
    consensus = aggregate_logits(matrices, payload["round"], idx)
    ctx.charge(1e-6 * consensus.matrix.size * len(matrices))
    ctx.store.put_bytes(key_of(payload["dst"]), encode_array(consensus.matrix))
    return {"clients": len(matrices)}


def digest(payload, ctx):
    """Move the client's logits on the subset toward the consensus."""
    cfg = client_config(ctx, payload["client"])
    net = _network(ctx, cfg, payload["src"])
    _, x = _round_subset(ctx, payload)
    target = decode_array(ctx.store.get_bytes(key_of(payload["consensus"])))
    loss = LossKind.parse(payload["loss"])
    initial = float(compute_loss(loss, predict(net, x), target)[0])
    losses = _train(ctx, net, cfg, x, target, loss, payload["epochs"], payload["seed"])
    ctx.store.put_bytes(key_of(payload["dst"]), network_to_blob(net))
    return {"initial_loss": initial, "losses": losses}


# ---------------------------------------------------------------------------
# FedDF


def distill(payload, ctx):
    """One architecture's aggregator: FedAvg init, ensemble distillation, evaluation, write-back."""
    arch_cfg = client_config(ctx, payload["architecture"])
    graph = _graph(arch_cfg["model"])
    public = ctx.data["public"].features
    teachers = []
    same_arch = []
    for t in payload["teachers"]:
        tcfg = client_config(ctx, t["client"])
        blob = ctx.store.get_bytes(key_of(t["weights"]))
        teachers.append((_graph(tcfg["model"]), blob))
        if tcfg["architecture_id"] == arch_cfg["architecture_id"]:
            same_arch.append((blob, len(tcfg["indices"])))
    if same_arch:
        init = fedavg_weights([b for b, _ in same_arch], [c for _, c in same_arch])
    else:
        init = ctx.store.get_bytes(key_of(payload["init"]))
    targets = teacher_logits(teachers, public)
    for g, _ in teachers:
        _charge(ctx, build_network(g, 0), len(public), 1.0)
    config = DistillConfig(**payload["config"])
    result = ensemble_distill(graph, init, teachers, public, config, payload["seed"], targets=targets,
                              check=ctx.check)
    student = _network(ctx, arch_cfg)
    _charge(ctx, student, result.steps * config.batch_size, 3.0)
    _charge(ctx, student, (result.steps // config.eval_every + 1) * max(1, int(config.val_fraction * len(public))), 1.0)

    def accuracy(blob):
        load_blob_into(student, blob)
        data = ctx.data[payload["dataset"]]
        _charge(ctx, student, len(data), 1.0)
        return evaluate_net(student, iter_batches(data.features, data.labels))["top1_accuracy"]

    init_acc = accuracy(init)
    final_acc = accuracy(result.blob)
    for dst in payload["dst"]:
        ctx.store.put_bytes(key_of(dst), result.blob)
    return {"steps": result.steps, "stop_reason": result.stop_reason, "init_accuracy": init_acc,
            "accuracy": final_acc, "best_val_loss": result.best_val_loss}
