import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_graph, mlp_layers
from serverless_kd.model_dsl import ShapeMismatch
from serverless_kd.nn import (
    CROSS_ENTROPY,
    LOGIT_L1,
    MSE,
    ArchitectureMismatch,
    Batch,
    EmptyDataset,
    NonFiniteLoss,
    build_network,
    decode_weights,
    distill_loss,
    evaluate,
    fit,
    forward,
    gradient_check,
    iter_batches,
    kl_distill,
    load_blob_into,
    network_to_blob,
    softmax,
    train_step,
)
from serverless_kd.nn.losses import compute_loss
from serverless_kd.nn.serialize import MAGIC, BlobFormatError


def dense_graph(fan_in=10, units=5):
    return make_graph([
        {"name": "x", "type": "input", "params": {"shape": [fan_in]}},
        {"name": "d", "type": "dense", "params": {"units": units}, "inputs": ["x"]},
    ])


def test_build_is_deterministic_and_shaped():
    g = dense_graph()
    a, b = build_network(g, 7), build_network(g, 7)
    assert a.weights["d"]["kernel"].shape == (10, 5)
    assert a.weights["d"]["bias"].shape == (5,)
    assert np.array_equal(a.weights["d"]["kernel"], b.weights["d"]["kernel"])
    assert not np.array_equal(a.weights["d"]["kernel"], build_network(g, 8).weights["d"]["kernel"])
    limit = math.sqrt(6 / 15)
    assert np.abs(a.weights["d"]["kernel"]).max() <= limit


def test_zero_weights_give_zero_logits(rng):
    net = build_network(dense_graph(), 1)
    for arrays_ in net.weights.values():
        for arr in arrays_.values():
            arr[...] = 0
    assert not forward(net, rng.normal(size=(4, 10))).any()


def test_wrong_feature_shape():
    net = build_network(dense_graph(), 1)
    with pytest.raises(ShapeMismatch):
        forward(net, np.zeros((2, 9)))


def _oracle_forward(net, x):
    """Straight-line loops over the fixture CNN; no shared code with the engine."""
    w = net.weights
    n = x.shape[0]

    def conv_same(inp, kernel, bias):
        h, wd, cin = inp.shape[1:]
        k = kernel.shape[0]
        pad = (k - 1) // 2
        padded = np.zeros((n, h + k - 1, wd + k - 1, cin))
        padded[:, pad:pad + h, pad:pad + wd] = inp
        out = np.zeros((n, h, wd, kernel.shape[3]))
        for b in range(n):
            for i in range(h):
                for j in range(wd):
                    for f in range(kernel.shape[3]):
                        acc = bias[f]
                        for di in range(k):
                            for dj in range(k):
                                for c in range(cin):
                                    acc += padded[b, i + di, j + dj, c] * kernel[di, dj, c, f]
                        out[b, i, j, f] = acc
        return out

    def pool2(inp):
        h, wd, c = inp.shape[1:]
        out = np.zeros((n, h // 2, wd // 2, c))
        for b in range(n):
            for i in range(h // 2):
                for j in range(wd // 2):
                    for ch in range(c):
                        out[b, i, j, ch] = max(inp[b, 2 * i + a, 2 * j + d, ch] for a in range(2) for d in range(2))
        return out

    h = pool2(np.maximum(conv_same(x, w["c1"]["kernel"], w["c1"]["bias"]), 0))
    h = conv_same(h, w["c2"]["kernel"], w["c2"]["bias"])
    bn = w["bn"]
    h = bn["gamma"] * (h - bn["moving_mean"]) / np.sqrt(bn["moving_var"] + 1e-5) + bn["beta"]
    h = pool2(np.maximum(h, 0)).reshape(n, -1)
    return h @ w["fc"]["kernel"] + w["fc"]["bias"]


def test_forward_matches_independent_oracle(two_conv_graph, rng):
    net = build_network(two_conv_graph, 3)
    net.weights["bn"]["moving_mean"][...] = rng.normal(size=8)
    net.weights["bn"]["moving_var"][...] = rng.uniform(0.5, 2, size=8)
    net.weights["c1"]["bias"][...] = rng.normal(size=4)
    x = rng.uniform(size=(3, 8, 8, 1))
    logits = forward(net, x)
    assert np.abs(logits - _oracle_forward(net, x)).max() < 1e-10
    assert np.array_equal(logits, forward(net, x))


def test_lr_zero_leaves_weights_and_reports_eval_loss(rng):
    net = build_network(dense_graph(), 2)
    before = net.copy_weights()
    batch = Batch(rng.normal(size=(4, 10)), np.array([0, 1, 2, 3]))
    loss = train_step(net, batch, CROSS_ENTROPY, 0.0)
    assert all(np.array_equal(before["d"][k], net.weights["d"][k]) for k in before["d"])
    assert loss == pytest.approx(compute_loss(CROSS_ENTROPY, forward(net, batch), batch.targets)[0], abs=1e-15)


def test_matched_distributions_give_zero_kl(rng):
    net = build_network(dense_graph(), 4)
    x = rng.normal(size=(6, 10))
    teacher = forward(net, x)
    from serverless_kd.nn.engine import loss_and_grads

    value, grads = loss_and_grads(net, Batch(x, teacher), kl_distill(2.0))
    assert abs(value) < 1e-12
    assert math.sqrt(sum(float((g**2).sum()) for g in grads.values())) < 1e-8


def test_train_step_returns_pre_update_loss(rng):
    net = build_network(dense_graph(), 5)
    batch = Batch(rng.normal(size=(4, 10)), np.array([0, 1, 2, 3]))
    expected = compute_loss(CROSS_ENTROPY, forward(net, batch), batch.targets)[0]
    assert train_step(net, batch, CROSS_ENTROPY, 0.5) == pytest.approx(expected, abs=1e-15)
    assert compute_loss(CROSS_ENTROPY, forward(net, batch), batch.targets)[0] < expected


def test_single_dense_cross_entropy_gradient(rng):
    net = build_network(dense_graph(), 6)
    batch = Batch(rng.normal(size=(4, 10)), np.array([0, 4, 2, 1]))
    assert gradient_check(net, batch, CROSS_ENTROPY) < 1e-4


def test_linear_regression_squared_loss_gradient(rng):
    net = build_network(dense_graph(3, 1), 6)
    batch = Batch(rng.normal(size=(8, 3)), rng.normal(size=(8, 1)))
    assert gradient_check(net, batch, MSE) < 1e-7
    # closed form: dL/dW = 2/n X^T (XW + b - y)
    from serverless_kd.nn.engine import loss_and_grads

    _, grads = loss_and_grads(net, batch, MSE)
    resid = batch.features @ net.weights["d"]["kernel"] + net.weights["d"]["bias"] - batch.targets
    assert np.allclose(grads[("d", "kernel")], 2 / 8 * batch.features.T @ resid, atol=1e-14)


@pytest.mark.parametrize("loss", [CROSS_ENTROPY, LOGIT_L1, MSE, kl_distill(1.0), kl_distill(3.0)],
                         ids=lambda l: f"{l.kind}-{l.temperature}")
def test_two_conv_gradients(two_conv_graph, rng, loss):
    net = build_network(two_conv_graph, 9)
    x = rng.uniform(size=(4, 8, 8, 1))
    targets = np.array([1, 3, 5, 7]) if loss.kind == "cross_entropy" else rng.normal(size=(4, 10))
    assert gradient_check(net, Batch(x, targets), loss) < 1e-4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts_and_keeps_weights(rng):
    net = build_network(dense_graph(), 1)
    before = net.copy_weights()
    batch = Batch(rng.normal(size=(2, 10)), np.full((2, 5), np.inf))
    with pytest.raises(NonFiniteLoss):
        train_step(net, batch, MSE, 0.1)
    assert np.array_equal(before["d"]["kernel"], net.weights["d"]["kernel"])


def test_distill_loss_analytic():
    teacher = np.array([[math.log(4), 0.0]])
    student = np.zeros((1, 2))
    assert distill_loss(student, teacher, 1.0) == pytest.approx(0.8 * math.log(1.6) + 0.2 * math.log(0.4), abs=1e-12)
    assert distill_loss(student, teacher, 1.0) == pytest.approx(0.19274, abs=1e-5)
    assert distill_loss(teacher, teacher, 2.0) == 0.0
    with pytest.raises(ShapeMismatch):
        distill_loss(np.zeros((1, 2)), np.zeros((1, 3)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-20, 20)), arrays(np.float64, (3, 4), elements=st.floats(-20, 20)),
       st.floats(0.5, 5))
def test_distill_loss_matches_direct_summation(student, teacher, t):
    total = 0.0
    for s_row, t_row in zip(student, teacher):
        ps = [math.exp(v / t) for v in t_row]
        qs = [math.exp(v / t) for v in s_row]
        zp, zq = math.fsum(ps), math.fsum(qs)
        total += math.fsum((p / zp) * math.log((p / zp) / (q / zq)) for p, q in zip(ps, qs))
    oracle = total / len(student) * t * t
    value = distill_loss(student, teacher, t)
    assert value >= -1e-12
    assert value == pytest.approx(oracle, abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_and_nonnegative_losses(z):
    assert np.allclose(softmax(z).sum(axis=1), 1.0, atol=1e-9)
    assert compute_loss(CROSS_ENTROPY, z, np.array([0, 1, 2, 3]))[0] >= 0
    assert compute_loss(kl_distill(1.0), z, z[::-1].copy())[0] >= -1e-12


def test_evaluate_counts():
    g = dense_graph(2, 2)
    net = build_network(g, 0)
    net.weights["d"]["kernel"][...] = np.eye(2)
    x = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 1.0]])
    assert evaluate(net, [Batch(x, np.array([0, 1, 0]))])["top1_accuracy"] == 1.0
    # constant logits tie everywhere; argmax picks class 0
    const = build_network(dense_graph(3, 10), 0)
    const.weights["d"]["kernel"][...] = 0
    labels = np.repeat(np.arange(10), 5)
    assert evaluate(const, iter_batches(np.ones((50, 3)), labels, 7))["top1_accuracy"] == pytest.approx(0.1)
    with pytest.raises(EmptyDataset):
        evaluate(const, [])


def test_evaluate_matches_counting_oracle(two_conv_graph, rng):
    net = build_network(two_conv_graph, 11)
    x = rng.uniform(size=(40, 8, 8, 1))
    y = rng.integers(0, 10, size=40)
    logits = forward(net, x)
    oracle = sum(int(np.argmax(row) == lab) for row, lab in zip(logits, y)) / 40
    assert evaluate(net, iter_batches(x, y, 16))["top1_accuracy"] == oracle


def test_dropout_expectation():
    net = build_network(make_graph([
        {"name": "x", "type": "input", "params": {"shape": [3]}},
        {"name": "drop", "type": "dropout", "params": {"rate": 0.3}, "inputs": ["x"]},
        {"name": "d", "type": "dense", "params": {"units": 2}, "inputs": ["drop"]},
    ]), 2)
    net.weights["d"]["bias"][...] = [0.5, -0.25]
    x = np.array([[1.0, 2.0, -1.5]])
    rows = np.repeat(x, 20000, axis=0)
    eval_out = forward(net, x)[0]
    train_mean = forward(net, rows, train=True, rng=np.random.default_rng(0)).mean(axis=0)
    assert np.all(np.abs(train_mean - eval_out) <= 0.02 * np.abs(eval_out))


def test_training_is_bit_reproducible(rng):
    g = make_graph(mlp_layers(dropout=0.2, batchnorm=True))
    x = rng.normal(size=(40, 6))
    y = rng.integers(0, 3, size=40)
    runs = []
    for _ in range(2):
        net = build_network(g, 5, "adam")
        fit(net, x, y, CROSS_ENTROPY, 3, 8, 0.01, seed=1)
        runs.append(network_to_blob(net))
    assert runs[0] == runs[1]


def test_fit_learns_separable_data(rng):
    x = np.concatenate([rng.normal(-2, 0.5, (50, 6)), rng.normal(2, 0.5, (50, 6))])
    y = np.repeat([0, 1], 50)
    net = build_network(make_graph(mlp_layers(out=2)), 0)
    losses = fit(net, x, y, CROSS_ENTROPY, 10, 16, 0.1, seed=0)
    assert losses[-1] < losses[0]
    assert evaluate(net, iter_batches(x, y))["top1_accuracy"] > 0.95


def test_blob_round_trip_and_layout(two_conv_graph):
    net = build_network(two_conv_graph, 1)
    blob = network_to_blob(net)
    assert blob[:4] == MAGIC
    assert int.from_bytes(blob[4:6], "little") == 1
    assert blob[6:38].hex() == two_conv_graph.fingerprint()
    digest, weights = decode_weights(blob)
    assert digest.hex() == two_conv_graph.fingerprint()
    other = build_network(two_conv_graph, 2)
    load_blob_into(other, blob)
    assert network_to_blob(other) == blob
    for name, arrs in net.weights.items():
        for key, arr in arrs.items():
            assert np.array_equal(weights[name][key], arr)


def test_blob_errors(two_conv_graph):
    blob = network_to_blob(build_network(two_conv_graph, 1))
    with pytest.raises(BlobFormatError):
        decode_weights(b"XXXX" + blob[4:])
    with pytest.raises(BlobFormatError):
        decode_weights(blob[:-3])
    with pytest.raises(ArchitectureMismatch):
        load_blob_into(build_network(dense_graph(), 0), blob)
