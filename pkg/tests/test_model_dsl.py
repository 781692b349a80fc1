import itertools
from pathlib import Path

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from serverless_kd.model_dsl import (
    CycleDetected,
    DuplicateName,
    InvalidGraph,
    InvalidParams,
    LayerGraph,
    LayerNode,
    ModelSyntaxError,
    ShapeMismatch,
    UnresolvableAuto,
    UnresolvedReference,
    infer_shapes_and_count,
    load_model_file,
    parse_model_spec,
    to_canonical_yaml,
    topological_order,
)

FIXTURES = Path(__file__).parent / "fixtures" / "models"
BUNDLED = Path(__file__).parent.parent / "configs" / "models"
CORPUS = sorted(FIXTURES.glob("*.yaml")) + sorted(BUNDLED.glob("*.yaml"))

BLOCK_DOC = """
blocks:
  pair: &pair
    - {name: fc, type: dense, params: {units: 4}, inputs: auto}
    - {name: act, type: relu, inputs: auto}
layers:
  - {name: x, type: input, params: {shape: [4]}}
  - {name: first, layers: *pair, inputs: [x]}
  - {name: second, layers: *pair, inputs: [first]}
  - {name: head, type: dense, params: {units: 2}, inputs: [second]}
  - {name: probs, type: softmax, inputs: [head]}
"""


def test_block_used_twice_gives_seven_nodes():
    g = parse_model_spec(BLOCK_DOC)
    # 3 standalone layers + 2 copies of a 2-layer block
    assert len(g.nodes) == 3 + 2 * 2
    first = {n for n in g.names if "__first__" in n}
    second = {n for n in g.names if "__second__" in n}
    assert first == {"pair__first__fc", "pair__first__act"}
    assert second == {"pair__second__fc", "pair__second__act"}
    assert g.node("pair__second__fc").inputs == ("pair__first__act",)
    assert g.node("head").inputs == ("pair__second__act",)


def test_minimal_graph():
    g = parse_model_spec("layers:\n  - {name: x, type: input, params: {shape: [3]}}\n"
                         "  - {name: y, type: dense, params: {units: 2}, inputs: [x]}\n")
    assert len(g.nodes) == 2
    assert g.edges == (("x", "y"),)
    assert g.input_shape == (3,) and g.output_dim == 2


def test_duplicate_name():
    doc = """
layers:
  - {name: x, type: input, params: {shape: [8, 8, 1]}}
  - {name: conv_a, type: conv2d, params: {filters: 2, kernel_size: 3}, inputs: [x]}
  - {name: conv_a, type: conv2d, params: {filters: 2, kernel_size: 3}, inputs: [conv_a]}
"""
    with pytest.raises(DuplicateName):
        parse_model_spec(doc)


# every parser error kind, each triggered by a minimal document
ERROR_CASES = [
    ("layers: [ {name: x, type: input", ModelSyntaxError),
    ("nope: 1", ModelSyntaxError),
    ("layers:\n  - {name: x, type: input, params: {shape: [2]}}\n  - {name: y, type: dense, params: {units: 1},"
     " inputs: [missing]}\n", UnresolvedReference),
    ("layers:\n  - {name: x, type: input, params: {shape: [2]}}\n  - {name: y, layers: *undefined,"
     " inputs: [x]}\n", UnresolvedReference),
    ("layers:\n  - {name: x, type: input, params: {shape: [2]}}\n  - {name: y, block: nothing, inputs: [x]}\n",
     UnresolvedReference),
    ("layers:\n  - {name: x, type: dense, params: {units: 2}, inputs: auto}\n", UnresolvableAuto),
    ("layers:\n  - {name: x, type: input, params: {shape: [2]}}\n  - {name: y, type: dense, inputs: [x]}\n",
     InvalidParams),
    ("layers:\n  - {name: x, type: input, params: {shape: [2]}}\n  - {name: y, type: lstm, inputs: [x]}\n",
     InvalidParams),
    ("layers:\n  - {name: x, type: input, params: {shape: [2]}}\n  - {name: y, type: dense, params: {units: 2},"
     " inputs: [z]}\n  - {name: z, type: dense, params: {units: 2}, inputs: [y]}\n", CycleDetected),
    ("layers:\n  - {name: x, type: input, params: {shape: [2]}}\n  - {name: y, type: conv2d,"
     " params: {filters: 1, kernel_size: 1}, inputs: [x]}\n", ShapeMismatch),
    ("layers:\n  - {name: x, type: input, params: {shape: [2]}}\n  - {name: a, type: dense, params: {units: 2},"
     " inputs: [x]}\n  - {name: b, type: dense, params: {units: 2}, inputs: [x]}\n", InvalidGraph),
]


@pytest.mark.parametrize("doc, error", ERROR_CASES)
def test_error_paths(doc, error):
    with pytest.raises(error):
        parse_model_spec(doc)


def test_recursive_block_rejected():
    doc = """
blocks:
  loop:
    - {name: fc, type: dense, params: {units: 2}, inputs: auto}
    - {name: again, block: loop, inputs: auto}
layers:
  - {name: x, type: input, params: {shape: [2]}}
  - {name: b, block: loop, inputs: [x]}
"""
    with pytest.raises(CycleDetected):
        parse_model_spec(doc)


def _graph(edges, names):
    inputs = {n: [] for n in names}
    for a, b in edges:
        inputs[b].append(a)
    kinds = {n: ("input" if not inputs[n] else "relu") for n in names}
    return LayerGraph(tuple(LayerNode(n, kinds[n], {"shape": (2,)} if kinds[n] == "input" else {}, tuple(inputs[n]))
                            for n in names))


def test_topological_order_chain_and_diamond():
    assert topological_order(_graph([("input", "dense"), ("dense", "softmax")], ["input", "dense", "softmax"])) == [
        "input", "dense", "softmax"]
    diamond = _graph([("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")], ["a", "b", "c", "d"])
    assert topological_order(diamond) == ["a", "b", "c", "d"]
    # declaration order decides ties, not names
    swapped = _graph([("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")], ["a", "c", "b", "d"])
    assert topological_order(swapped) == ["a", "c", "b", "d"]


def test_self_loop_detected():
    g = LayerGraph((LayerNode("a", "input", {"shape": (2,)}), LayerNode("d", "relu", {}, ("a", "d"))))
    with pytest.raises(CycleDetected):
        topological_order(g)


def test_parameter_counts():
    dense = parse_model_spec("layers:\n  - {name: x, type: input, params: {shape: [10]}}\n"
                             "  - {name: d, type: dense, params: {units: 5}, inputs: [x]}\n")
    assert infer_shapes_and_count(dense).params["d"] == 55
    conv = parse_model_spec("layers:\n  - {name: x, type: input, params: {shape: [6, 6, 1]}}\n"
                            "  - {name: c, type: conv2d, params: {filters: 8, kernel_size: 3}, inputs: [x]}\n"
                            "  - {name: f, type: flatten, inputs: [c]}\n")
    assert infer_shapes_and_count(conv).params["c"] == 80


def test_two_conv_fixture_matches_hand_sum():
    info = infer_shapes_and_count(load_model_file(FIXTURES / "cnn_two_conv.yaml"))
    # hand summation written in the fixture header
    assert info.params["c1"] == 40
    assert info.params["c2"] == 296
    assert info.params["bn"] == 16
    assert info.params["fc"] == 330
    assert info.total == 40 + 296 + 16 + 330 == 682
    assert info.shapes["p2"] == (2, 2, 8)


def test_strided_valid_shapes():
    info = infer_shapes_and_count(load_model_file(FIXTURES / "strided_valid.yaml"))
    assert info.shapes["c"] == (4, 4, 3)  # floor((9 - 3) / 2) + 1
    assert info.shapes["p"] == (3, 3, 3)
    assert info.total == (3 * 3 * 2 + 1) * 3 + (27 + 1) * 4


def test_nested_blocks_expand_with_unique_names():
    g = load_model_file(FIXTURES / "nested_blocks.yaml")
    assert len(g.nodes) == 1 + 2 * 2 * 2 + 1
    assert len(set(g.names)) == len(g.names)
    assert g.node("head").inputs == ("unit__stage__s2__second__act",)
    assert g.node("unit__stage__s2__first__fc").inputs == ("unit__stage__s1__second__act",)


def test_auto_equals_explicit_wiring():
    auto = parse_model_spec(BLOCK_DOC)
    explicit = parse_model_spec(to_canonical_yaml(auto))
    assert explicit == auto
    manual = """
layers:
  - {name: x, type: input, params: {shape: [4]}}
  - {name: pair__first__fc, type: dense, params: {units: 4}, inputs: [x]}
  - {name: pair__first__act, type: relu, inputs: [pair__first__fc]}
  - {name: pair__second__fc, type: dense, params: {units: 4}, inputs: [pair__first__act]}
  - {name: pair__second__act, type: relu, inputs: [pair__second__fc]}
  - {name: head, type: dense, params: {units: 2}, inputs: [pair__second__act]}
  - {name: probs, type: softmax, inputs: [head]}
"""
    assert parse_model_spec(manual) == auto


@pytest.mark.parametrize("path", CORPUS, ids=lambda p: p.name)
def test_canonical_round_trip(path):
    g = load_model_file(path)
    text = to_canonical_yaml(g)
    again = parse_model_spec(text)
    assert again == g
    assert to_canonical_yaml(again) == text
    assert again.fingerprint() == g.fingerprint()


def test_canonical_form_has_no_blocks_and_sorted_params():
    text = to_canonical_yaml(load_model_file(FIXTURES / "cnn_two_conv.yaml"))
    doc = yaml.safe_load(text)
    assert set(doc) == {"layers"}
    for layer in doc["layers"]:
        assert list(layer.get("params", {})) == sorted(layer.get("params", {}))
        assert isinstance(layer["inputs"], list)
    conv = next(layer for layer in doc["layers"] if layer["name"] == "c1")
    assert conv["params"] == {"filters": 4, "kernel_size": 3, "padding": "same", "stride": 1}


# ---------------------------------------------------------------------------
# properties


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(1, 3))
def test_block_copies_are_disjoint(widths, copies):
    block = "\n".join(f"    - {{name: l{i}, type: dense, params: {{units: {w}}}, inputs: auto}}"
                      for i, w in enumerate(widths))
    uses = "\n".join(f"  - {{name: u{k}, block: b, inputs: auto}}" for k in range(copies))
    doc = f"blocks:\n  b:\n{block}\nlayers:\n  - {{name: x, type: input, params: {{shape: [{widths[-1]}]}}}}\n{uses}\n"
    g = parse_model_spec(doc)
    sets = [{n for n in g.names if n.startswith(f"b__u{k}__")} for k in range(copies)]
    assert all(len(s) == len(widths) for s in sets)
    assert all(not (a & b) for a, b in itertools.combinations(sets, 2))
    assert len(g.nodes) == 1 + copies * len(widths)


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(4)), st.lists(st.integers(1, 5), min_size=4, max_size=4))
def test_param_count_invariant_under_parallel_reordering(order, units):
    branches = [f"  - {{name: b{i}, type: dense, params: {{units: {units[i]}}}, inputs: [x]}}" for i in range(4)]
    heads = [f"  - {{name: h{i}, type: dense, params: {{units: 3}}, inputs: [b{i}]}}" for i in range(4)]
    tail = "  - {name: sum, type: relu, inputs: [h0, h1, h2, h3]}\n"
    base = "layers:\n  - {name: x, type: input, params: {shape: [5]}}\n"
    a = parse_model_spec(base + "\n".join(branches + heads) + "\n" + tail)
    b = parse_model_spec(base + "\n".join([branches[i] for i in order] + [heads[i] for i in order]) + "\n" + tail)
    assert infer_shapes_and_count(a).total == infer_shapes_and_count(b).total
    assert infer_shapes_and_count(a).total == sum((5 + 1) * u + (u + 1) * 3 for u in units)
