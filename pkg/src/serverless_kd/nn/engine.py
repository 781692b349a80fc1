"""Forward/backward execution of layer graphs in float64."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from ..model_dsl import LayerGraph, ShapeMismatch, infer_shapes_and_count, same_padding, topological_order
from . import kernels
from .losses import LossKind, compute_loss

TRAINABLE = ("kernel", "bias", "gamma", "beta")


class NonFiniteLoss(FloatingPointError):
    pass


class EmptyDataset(ValueError):
    pass


@dataclass
class Batch:
    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets)
        if self.targets.dtype.kind == "f":
            self.targets = self.targets.astype(np.float64)
        if len(self.features) < 1:
            raise EmptyDataset("batch must hold at least one sample")
        if len(self.features) != len(self.targets):
            raise ShapeMismatch("features and targets differ in length")


class SGD:
    name = "sgd"

    def __init__(self, momentum: float = 0.0):
        self.momentum = momentum
        self.state: dict[tuple[str, str], np.ndarray] = {}

    def step(self, weights, grads, lr):
        for key, g in grads.items():
            w = weights[key[0]][key[1]]
            if self.momentum:
                v = self.state.get(key)
                v = g if v is None else self.momentum * v + g
                self.state[key] = v
                g = v
            w -= lr * g


class Adam:
    name = "adam"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.state: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = {}

    def step(self, weights, grads, lr):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for key, g in grads.items():
            m, v = self.state.get(key, (np.zeros_like(g), np.zeros_like(g)))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.state[key] = (m, v)
            weights[key[0]][key[1]] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str = "sgd"):
    if name == "sgd":
        return SGD()
    if name == "adam":
        return Adam()
    raise ValueError(f"unknown optimizer {name!r}")


@dataclass
class Network:
    graph: LayerGraph
    weights: dict[str, dict[str, np.ndarray]]
    rng_seed: int
    optimizer: SGD | Adam = field(default_factory=SGD)
    mode: str = "eval"
    order: tuple[str, ...] = ()
    shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)
    steps: int = 0

    @property
    def logit_node(self) -> str:
        out = self.graph.output_node
        node = self.graph.node(out)
        if node.kind == "softmax" and len(node.inputs) == 1:
            return node.inputs[0]
        return out

    def trainable(self):
        for name in self.order:
            for key, arr in self.weights.get(name, {}).items():
                if key in TRAINABLE:
                    yield (name, key), arr

    def num_parameters(self) -> int:
        return sum(arr.size for _, arr in self.trainable())

    def copy_weights(self) -> dict[str, dict[str, np.ndarray]]:
        return {n: {k: a.copy() for k, a in d.items()} for n, d in self.weights.items()}

    def set_weights(self, weights: dict[str, dict[str, np.ndarray]]) -> None:
        for n, d in weights.items():
            for k, a in d.items():
                if self.weights[n][k].shape != a.shape:
                    raise ShapeMismatch(f"{n}/{k}: expected {self.weights[n][k].shape}, got {a.shape}")
                self.weights[n][k][...] = a


def _glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_network(graph: LayerGraph, seed: int, optimizer: str = "sgd") -> Network:
    """Instantiate weights deterministically from ``seed`` (Glorot-uniform kernels, zero biases)."""
    info = infer_shapes_and_count(graph)
    order = tuple(topological_order(graph))
    rng = np.random.default_rng(seed)
    weights: dict[str, dict[str, np.ndarray]] = {}
    for name in order:
        node = graph.node(name)
        p = node.params
        if node.kind in ("dense", "conv2d", "batchnorm"):
            in_shape = info.shapes[node.inputs[0]]
        if node.kind == "dense":
            fan_in, units = in_shape[0], p["units"]
            weights[name] = {
                "kernel": _glorot(rng, (fan_in, units), fan_in, units),
                "bias": np.zeros(units),
            }
        elif node.kind == "conv2d":
            k, cin, cout = p["kernel_size"], in_shape[-1], p["filters"]
            weights[name] = {
                "kernel": _glorot(rng, (k, k, cin, cout), k * k * cin, k * k * cout),
                "bias": np.zeros(cout),
            }
        elif node.kind == "batchnorm":
            c = in_shape[-1]
            weights[name] = {
                "gamma": np.ones(c),
                "beta": np.zeros(c),
                "moving_mean": np.zeros(c),
                "moving_var": np.ones(c),
            }
    return Network(graph, weights, seed, make_optimizer(optimizer), "eval", order, dict(info.shapes))


def forward_macs(net: Network) -> int:
    """Multiply-accumulates of one forward pass for a single sample (elementwise ops count 1)."""
    total = 0
    for name in net.order:
        node = net.graph.node(name)
        out = net.shapes[name]
        if node.kind == "dense":
            total += net.weights[name]["kernel"].size
        elif node.kind == "conv2d":
            total += math.prod(out[:2]) * net.weights[name]["kernel"].size
        elif node.kind != "input":
            total += math.prod(out)
    return total


# ---------------------------------------------------------------------------
# layer forward / backward


def _pad(x, pads_h, pads_w, value=0.0):
    if pads_h == (0, 0) and pads_w == (0, 0):
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), pads_h, pads_w, (0, 0)), constant_values=value)


def _window_geometry(h, w, k, stride, padding):
    if padding == "same":
        ph, pw = same_padding(h, k, stride), same_padding(w, k, stride)
        ho, wo = math.ceil(h / stride), math.ceil(w / stride)
    else:
        ph = pw = (0, 0)
        ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    return ph, pw, ho, wo


def _conv_forward(x, wts, p):
    n, h, w, c = x.shape
    k, s = p["kernel_size"], p["stride"]
    ph, pw, ho, wo = _window_geometry(h, w, k, s, p["padding"])
    xp = _pad(x, ph, pw)
    cols = kernels.im2col(xp, k, s, ho, wo)
    kmat = wts["kernel"].reshape(k * k * c, -1)
    out = (cols @ kmat + wts["bias"]).reshape(n, ho, wo, -1)
    return out, (cols, xp.shape, ph, pw, ho, wo)


def _conv_backward(dout, x, wts, p, cache, grads, name):
    cols, (n, hp, wp, c), ph, pw, ho, wo = cache
    k, s = p["kernel_size"], p["stride"]
    d2 = dout.reshape(-1, dout.shape[-1])
    kmat = wts["kernel"].reshape(k * k * c, -1)
    grads[(name, "kernel")] = (cols.T @ d2).reshape(wts["kernel"].shape)
    grads[(name, "bias")] = d2.sum(axis=0)
    dcols = np.ascontiguousarray(d2 @ kmat.T)
    dxp = kernels.col2im(dcols, n, hp, wp, c, k, s, ho, wo)
    return dxp[:, ph[0] : hp - ph[1], pw[0] : wp - pw[1]]


def _pool_forward(x, p):
    n, h, w, c = x.shape
    k, s = p["pool_size"], p["stride"]
    ph, pw, ho, wo = _window_geometry(h, w, k, s, p["padding"])
    xp = _pad(x, ph, pw, value=-np.inf)
    out, arg = kernels.maxpool_forward(xp, k, s, ho, wo)
    return out, (arg, xp.shape, ph, pw)


def _pool_backward(dout, cache):
    arg, (n, hp, wp, c), ph, pw = cache
    dxp = kernels.maxpool_backward(np.ascontiguousarray(dout), arg, hp, wp)
    return dxp[:, ph[0] : hp - ph[1], pw[0] : wp - pw[1]]


def _bn_forward(x, wts, p, train, update_stats):
    axes = tuple(range(x.ndim - 1))
    eps = p["epsilon"]
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_stats:
            m = p["momentum"]
            wts["moving_mean"][...] = m * wts["moving_mean"] + (1 - m) * mean
            wts["moving_var"][...] = m * wts["moving_var"] + (1 - m) * var
    else:
        mean, var = wts["moving_mean"], wts["moving_var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    return wts["gamma"] * xhat + wts["beta"], (xhat, inv, train)


def _bn_backward(dout, wts, cache, grads, name):
    xhat, inv, train = cache
    axes = tuple(range(dout.ndim - 1))
    grads[(name, "gamma")] = (dout * xhat).sum(axis=axes)
    grads[(name, "beta")] = dout.sum(axis=axes)
    dxhat = dout * wts["gamma"]
    if not train:
        return dxhat * inv
    m = dout.size // dout.shape[-1]
    return inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))


def _softmax(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _run(net: Network, x: np.ndarray, train: bool, rng: np.random.Generator | None, update_stats: bool = True):
    graph = net.graph
    expected = tuple(net.shapes[graph.input_node])
    if x.shape[1:] != expected:
        raise ShapeMismatch(f"expected features of shape (batch, {expected}), got {x.shape}")
    values: dict[str, np.ndarray] = {}
    caches: dict[str, object] = {}
    stop = net.logit_node
    for name in net.order:
        node = graph.node(name)
        p = node.params
        if node.kind == "input":
            values[name] = x
            if name == stop:
                break
            continue
        h = values[node.inputs[0]]
        for extra in node.inputs[1:]:
            h = h + values[extra]
        caches[name + "/in"] = h
        kind = node.kind
        if kind == "dense":
            out = h @ net.weights[name]["kernel"] + net.weights[name]["bias"]
        elif kind == "conv2d":
            out, caches[name] = _conv_forward(h, net.weights[name], p)
        elif kind == "maxpool2d":
            out, caches[name] = _pool_forward(h, p)
        elif kind == "flatten":
            out = h.reshape(len(h), -1)
        elif kind == "relu":
            out = np.maximum(h, 0.0)
        elif kind == "dropout":
            if train and p["rate"] > 0:
                keep = 1.0 - p["rate"]
                mask = (rng.random(h.shape) < keep) / keep
                caches[name] = mask
                out = h * mask
            else:
                caches[name] = None
                out = h
        elif kind == "batchnorm":
            out, caches[name] = _bn_forward(h, net.weights[name], p, train, update_stats)
        elif kind == "softmax":
            out = _softmax(h)
        else:  # pragma: no cover - kinds validated at parse time
            raise ValueError(kind)
        values[name] = out
        if name == stop:
            break
    return values, caches


def _backward(net: Network, values, caches, dlogits):
    graph = net.graph
    grads: dict[tuple[str, str], np.ndarray] = {}
    upstream: dict[str, np.ndarray] = {net.logit_node: dlogits}
    for name in reversed(net.order):
        if name not in upstream:
            continue
        node = graph.node(name)
        if node.kind == "input":
            continue
        dout = upstream.pop(name)
        h = caches[name + "/in"]
        p = node.params
        kind = node.kind
        if kind == "dense":
            w = net.weights[name]
            grads[(name, "kernel")] = h.T @ dout
            grads[(name, "bias")] = dout.sum(axis=0)
            dh = dout @ w["kernel"].T
        elif kind == "conv2d":
            dh = _conv_backward(dout, h, net.weights[name], p, caches[name], grads, name)
        elif kind == "maxpool2d":
            dh = _pool_backward(dout, caches[name])
        elif kind == "flatten":
            dh = dout.reshape(h.shape)
        elif kind == "relu":
            dh = dout * (h > 0)
        elif kind == "dropout":
            dh = dout if caches[name] is None else dout * caches[name]
        elif kind == "batchnorm":
            dh = _bn_backward(dout, net.weights[name], caches[name], grads, name)
        elif kind == "softmax":
            s = values[name]
            dh = s * (dout - (dout * s).sum(axis=-1, keepdims=True))
        for src in node.inputs:
            if src in upstream:
                upstream[src] = upstream[src] + dh
            else:
                upstream[src] = dh
    return grads


def forward(net: Network, batch: Batch | np.ndarray, train: bool = False, rng=None) -> np.ndarray:
    """Logits for a batch. The output softmax, if any, is not applied."""
    x = batch.features if isinstance(batch, Batch) else np.asarray(batch, dtype=np.float64)
    if train and rng is None:
        rng = np.random.default_rng([net.rng_seed, net.steps])
    values, _ = _run(net, x, train, rng, update_stats=False)
    return values[net.logit_node]


def loss_and_grads(net: Network, batch: Batch, loss: LossKind, rng=None, update_stats=False):
    values, caches = _run(net, batch.features, True, rng, update_stats=update_stats)
    value, dlogits = compute_loss(loss, values[net.logit_node], batch.targets)
    return value, _backward(net, values, caches, dlogits)


def train_step(net: Network, batch: Batch, loss: LossKind, lr: float) -> float:
    """One optimizer step; returns the loss measured before the update."""
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    rng = np.random.default_rng([net.rng_seed, net.steps])
    value, grads = loss_and_grads(net, batch, loss, rng, update_stats=True)
    if not math.isfinite(value):
        raise NonFiniteLoss(f"loss became {value}")
    backup = net.copy_weights()
    net.optimizer.step(net.weights, grads, lr)
    net.steps += 1
    if not all(np.isfinite(a).all() for _, a in net.trainable()):
        net.set_weights(backup)
        raise NonFiniteLoss("weights became non-finite")
    return value


def fit(net: Network, features, targets, loss: LossKind, epochs: int, batch_size: int, lr: float, seed,
        on_batch: Callable[[], None] | None = None) -> list[float]:
    """Shuffled mini-batch training; returns the mean loss of every epoch.

    ``on_batch`` runs before every step (e.g. a deadline check).
    """
    rng = np.random.default_rng(seed)
    n = len(features)
    history = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            if on_batch is not None:
                on_batch()
            total += train_step(net, Batch(features[idx], targets[idx]), loss, lr) * len(idx)
        history.append(total / n)
    return history


def iter_batches(features, labels, batch_size: int = 256) -> Iterable[Batch]:
    for start in range(0, len(features), batch_size):
        yield Batch(features[start : start + batch_size], labels[start : start + batch_size])


def predict(net: Network, features, batch_size: int = 512) -> np.ndarray:
    return np.concatenate(
        [forward(net, features[s : s + batch_size]) for s in range(0, len(features), batch_size)]
    )


def evaluate(net: Network, data: Iterable[Batch]) -> dict[str, float]:
    correct = 0
    total = 0
    loss_sum = 0.0
    for batch in data:
        logits = forward(net, batch)
        labels = batch.targets.astype(np.int64)
        correct += int((logits.argmax(axis=1) == labels).sum())
        loss_sum += compute_loss(LossKind("cross_entropy"), logits, labels)[0] * len(labels)
        total += len(labels)
    if total == 0:
        raise EmptyDataset("nothing to evaluate")
    return {"top1_accuracy": correct / total, "mean_loss": loss_sum / total}


def gradient_check(net: Network, batch: Batch, loss: LossKind, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between backprop and central differences over all trainable parameters.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. Dropout masks are
    frozen and batch-norm running statistics are left untouched.
    """
    seed = [net.rng_seed, 2**31 - 1]
    _, grads = loss_and_grads(net, batch, loss, np.random.default_rng(seed))

    def f():
        values, _ = _run(net, batch.features, True, np.random.default_rng(seed), update_stats=False)
        return compute_loss(loss, values[net.logit_node], batch.targets)[0]

    worst = 0.0
    for key, arr in net.trainable():
        analytic = grads.get(key, np.zeros_like(arr))
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            down = f()
            flat[i] = old
            num = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst
