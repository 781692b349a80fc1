from pathlib import Path

import numpy as np
import pytest
import yaml

from serverless_kd.model_dsl import load_model_file, parse_model_spec

ROOT = Path(__file__).parent.parent
FIXTURES = Path(__file__).parent / "fixtures"
CONFIGS = ROOT / "configs"


def make_graph(layers):
    """Parse a layer list given as plain dicts."""
    return parse_model_spec(yaml.safe_dump({"layers": layers}, sort_keys=False))


def mlp_layers(in_dim=6, hidden=5, out=3, dropout=0.0, batchnorm=False):
    layers = [
        {"name": "x", "type": "input", "params": {"shape": [in_dim]}},
        {"name": "h", "type": "dense", "params": {"units": hidden}, "inputs": ["x"]},
    ]
    prev = "h"
    if batchnorm:
        layers.append({"name": "bn", "type": "batchnorm", "inputs": [prev]})
        prev = "bn"
    layers.append({"name": "act", "type": "relu", "inputs": [prev]})
    prev = "act"
    if dropout:
        layers.append({"name": "drop", "type": "dropout", "params": {"rate": dropout}, "inputs": [prev]})
        prev = "drop"
    layers.append({"name": "out", "type": "dense", "params": {"units": out}, "inputs": [prev]})
    layers.append({"name": "probs", "type": "softmax", "inputs": ["out"]})
    return layers


@pytest.fixture
def two_conv_graph():
    return load_model_file(FIXTURES / "models" / "cnn_two_conv.yaml")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def toy_raw(kind="fedmd", strategy=None, faas=None, **top):
    """The bundled toy config as a mapping, with overrides merged in."""
    raw = yaml.safe_load((CONFIGS / f"{kind}_toy.cfg").read_text())
    raw["strategy"].update(strategy or {})
    raw.setdefault("faas", {}).update(faas or {})
    raw.update(top)
    return raw


def toy_config(kind="fedmd", strategy=None, faas=None, **top):
    from serverless_kd.config import parse_config

    return parse_config(toy_raw(kind, strategy, faas, **top), base_dir=CONFIGS, name=f"{kind}_toy")


def small_data(classes=4, per_class=40, public_per_class=30, seed=11):
    spec = {"format": "synthetic", "classes": classes, "dim": [8, 8, 1], "spread": 1.0, "center_scale": 0.5}
    return {
        "private": dict(spec, samples_per_class=per_class, seed=seed),
        "public": dict(spec, samples_per_class=public_per_class, seed=seed, sample_seed=99),
        "test_fraction": 0.25,
    }


# a third FedDF architecture (4 outputs on 8x8x1 inputs)
WIDE_MLP = {"layers": [
    {"name": "x", "type": "input", "params": {"shape": [8, 8, 1]}},
    {"name": "flat", "type": "flatten", "inputs": ["x"]},
    {"name": "h", "type": "dense", "params": {"units": 24}, "inputs": ["flat"]},
    {"name": "act", "type": "relu", "inputs": ["h"]},
    {"name": "out", "type": "dense", "params": {"units": 4}, "inputs": ["act"]},
]}


PHASES = {
    "fedmd": ("transfer", "communicate", "aggregate", "digest", "revisit", "evaluate"),
    "feddf": ("evaluate", "train", "distill"),
}


def barrier_violations(records, strategy):
    """Pairs of (earlier phase, later phase) whose timestamps overlap.

    Phases are ordered by (round, position in the strategy's step order);
    every invocation of a phase must end before any invocation of the next
    phase starts.
    """
    order = PHASES[strategy]
    phases = {}
    for r in records:
        phases.setdefault((r.round, order.index(r.step)), []).append(r)
    keys = sorted(phases)
    bad = []
    for a, b in zip(keys, keys[1:]):
        if max(r.end_ms for r in phases[a]) > min(r.start_ms for r in phases[b]) + 1e-9:
            bad.append((a, b))
    return bad
