"""Model loader: YAML network descriptions to validated layer DAGs.

A description has two top-level keys. ``blocks`` maps block names to
ordered lists of layer templates, and ``layers`` lists the network itself.
Each layer entry has ``name``, ``type``, ``params`` and ``inputs``.

A layer entry that carries ``layers`` (usually a YAML alias such as
``layers: *conv_block``) or ``block: <name>`` is a block instance. It is
expanded in place into fresh copies named ``<block>__<instance>__<layer>``,
and other layers referencing the instance name are wired to the copy's
last layer. Blocks may nest to any depth; recursive blocks are rejected.

``inputs: auto`` wires a layer to its context. The first layer of a block
takes the block instance's inputs; any later layer takes the layer declared
just before it. The first top-level layer has no context, so ``auto``
there is an error.
"""

from __future__ import annotations

import functools
import hashlib
import heapq
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Mapping

import yaml

AUTO = "auto"


class ModelSpecError(ValueError):
    """Base class for model-description errors."""


class ModelSyntaxError(ModelSpecError):
    pass


class DuplicateName(ModelSpecError):
    pass


class UnresolvedReference(ModelSpecError):
    pass


class CycleDetected(ModelSpecError):
    pass


class UnresolvableAuto(ModelSpecError):
    pass


class InvalidParams(ModelSpecError):
    pass


class InvalidGraph(ModelSpecError):
    pass


class ShapeMismatch(ModelSpecError):
    pass


# kind -> (required params, optional params with defaults)
LAYER_KINDS: dict[str, tuple[tuple[str, ...], dict[str, Any]]] = {
    "input": (("shape",), {}),
    "dense": (("units",), {}),
    "conv2d": (("filters", "kernel_size"), {"stride": 1, "padding": "same"}),
    "maxpool2d": (("pool_size",), {"stride": None, "padding": "valid"}),
    "flatten": ((), {}),
    "relu": ((), {}),
    "dropout": (("rate",), {}),
    "batchnorm": ((), {"momentum": 0.9, "epsilon": 1e-5}),
    "softmax": ((), {}),
}

_BLOCK_KEYS = ("layers", "block")


def _freeze(value: Any) -> Any:
    if isinstance(value, list | tuple):
        return tuple(_freeze(v) for v in value)
    return value


@dataclass(frozen=True)
class LayerNode:
    name: str
    kind: str
    params: Mapping[str, Any] = field(default_factory=lambda: MappingProxyType({}))
    inputs: tuple[str, ...] = ()

    def __post_init__(self):
        if not isinstance(self.params, MappingProxyType):
            object.__setattr__(
                self, "params", MappingProxyType({k: _freeze(v) for k, v in dict(self.params).items()})
            )
        object.__setattr__(self, "inputs", tuple(self.inputs))

    def __eq__(self, other):
        if not isinstance(other, LayerNode):
            return NotImplemented
        return (
            self.name == other.name
            and self.kind == other.kind
            and dict(self.params) == dict(other.params)
            and self.inputs == other.inputs
        )

    def __hash__(self):
        return hash((self.name, self.kind, tuple(sorted(self.params.items())), self.inputs))


@dataclass(frozen=True)
class LayerGraph:
    nodes: tuple[LayerNode, ...]
    input_shape: tuple[int, ...] | None = None
    output_dim: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))

    @property
    def edges(self) -> tuple[tuple[str, str], ...]:
        return tuple((src, node.name) for node in self.nodes for src in node.inputs)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n.name for n in self.nodes)

    def node(self, name: str) -> LayerNode:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    @property
    def input_node(self) -> str:
        return next(n.name for n in self.nodes if n.kind == "input")

    @property
    def output_node(self) -> str:
        consumed = {src for src, _ in self.edges}
        sinks = [n.name for n in self.nodes if n.name not in consumed]
        if len(sinks) != 1:
            raise InvalidGraph(f"expected exactly one output node, found {sinks}")
        return sinks[0]

    @functools.cached_property
    def canonical_text(self) -> str:
        # the graph is frozen, so the serialization never goes stale
        return to_canonical_yaml(self)

    def fingerprint(self) -> str:
        """SHA-256 of the canonical serialization; used as the architecture id."""
        return hashlib.sha256(self.canonical_text.encode()).hexdigest()


# ---------------------------------------------------------------------------
# parameter validation


def _positive_int(kind: str, key: str, value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise InvalidParams(f"{kind}.{key} must be a positive integer, got {value!r}")
    return value


def normalize_params(kind: str, params: Mapping[str, Any] | None, where: str = "") -> dict[str, Any]:
    """Validate ``params`` for ``kind`` and fill in defaults."""
    if kind not in LAYER_KINDS:
        raise InvalidParams(f"{where}: unsupported layer type {kind!r}")
    params = dict(params or {})
    required, optional = LAYER_KINDS[kind]
    unknown = set(params) - set(required) - set(optional)
    if unknown:
        raise InvalidParams(f"{where}: unknown params for {kind}: {sorted(unknown)}")
    missing = [k for k in required if k not in params]
    if missing:
        raise InvalidParams(f"{where}: missing params for {kind}: {missing}")
    out = dict(optional)
    out.update(params)

    if kind == "input":
        shape = out["shape"]
        if isinstance(shape, int):
            shape = [shape]
        if not isinstance(shape, list | tuple) or len(shape) not in (1, 3):
            raise InvalidParams(f"{where}: input shape must be (F,) or (H, W, C), got {shape!r}")
        out["shape"] = tuple(_positive_int(kind, "shape", s) for s in shape)
    elif kind == "dense":
        _positive_int(kind, "units", out["units"])
    elif kind in ("conv2d", "maxpool2d"):
        size_key = "kernel_size" if kind == "conv2d" else "pool_size"
        _positive_int(kind, size_key, out[size_key])
        if kind == "conv2d":
            _positive_int(kind, "filters", out["filters"])
        if out["stride"] is None:
            out["stride"] = out[size_key]
        _positive_int(kind, "stride", out["stride"])
        if out["padding"] not in ("same", "valid"):
            raise InvalidParams(f"{where}: padding must be 'same' or 'valid'")
    elif kind == "dropout":
        rate = out["rate"]
        if isinstance(rate, bool) or not isinstance(rate, int | float) or not 0 <= rate < 1:
            raise InvalidParams(f"{where}: dropout rate must be in [0, 1), got {rate!r}")
        out["rate"] = float(rate)
    elif kind == "batchnorm":
        out["momentum"] = float(out["momentum"])
        out["epsilon"] = float(out["epsilon"])
        if not 0 <= out["momentum"] < 1 or out["epsilon"] <= 0:
            raise InvalidParams(f"{where}: batchnorm needs 0 <= momentum < 1 and epsilon > 0")
    return out


# ---------------------------------------------------------------------------
# parsing


class _Scope:
    def __init__(self, parent: _Scope | None):
        self.parent = parent
        self.local: dict[str, str] = {}

    def lookup(self, name: str) -> str | None:
        scope: _Scope | None = self
        while scope is not None:
            if name in scope.local:
                return scope.local[name]
            scope = scope.parent
        return None


@dataclass
class _PendingNode:
    name: str
    kind: str
    params: dict[str, Any]
    inputs: list[tuple[str, Any]]  # ("full", name) or ("ref", (name, scope))


class _Expander:
    def __init__(self, blocks: dict[str, list]):
        self.blocks = blocks
        self.block_names_by_id = {id(v): k for k, v in blocks.items()}
        self.nodes: list[_PendingNode] = []
        self.seen: set[str] = set()
        self.stack: list[int] = []

    def expand(self, entries: list, prefix: str, scope: _Scope, parent_inputs: list | None) -> str | None:
        if not isinstance(entries, list) or not entries:
            raise ModelSyntaxError(f"expected a nonempty list of layers under {prefix or 'layers'!r}")
        local_names = []
        for entry in entries:
            if not isinstance(entry, dict):
                raise ModelSyntaxError(f"layer entries must be mappings, got {entry!r}")
            name = entry.get("name")
            if not isinstance(name, str) or not name:
                raise ModelSyntaxError(f"layer without a nonempty string name: {entry!r}")
            if name in local_names:
                raise DuplicateName(f"layer name {name!r} declared twice in {prefix or 'layers'!r}")
            local_names.append(name)

        prev: list | None = None
        for entry in entries:
            name = entry["name"]
            raw_inputs = entry.get("inputs")
            if raw_inputs == AUTO or raw_inputs == [AUTO]:
                context = prev if prev is not None else parent_inputs
                if context is None:
                    raise UnresolvableAuto(f"layer {prefix + name!r} uses 'auto' but has no parent input")
                inputs = list(context)
            elif raw_inputs is None:
                inputs = []
            else:
                if isinstance(raw_inputs, str):
                    raw_inputs = [raw_inputs]
                if not isinstance(raw_inputs, list) or not all(isinstance(x, str) for x in raw_inputs):
                    raise ModelSyntaxError(f"inputs of {name!r} must be 'auto' or a list of names")
                if AUTO in raw_inputs:
                    raise ModelSyntaxError(f"'auto' cannot be mixed with explicit inputs in {name!r}")
                inputs = [("ref", (x, scope)) for x in raw_inputs]

            if any(k in entry for k in _BLOCK_KEYS) or entry.get("type") == "block":
                out = self._expand_block(entry, prefix, scope, inputs)
            else:
                out = self._add_layer(entry, prefix, inputs)
            scope.local[name] = out
            prev = [("full", out)]
        return scope.local[entries[-1]["name"]]

    def _expand_block(self, entry: dict, prefix: str, scope: _Scope, inputs: list) -> str:
        name = entry["name"]
        ref = entry.get("block")
        if isinstance(ref, str):
            if ref not in self.blocks:
                raise UnresolvedReference(f"unknown block {ref!r} referenced by {name!r}")
            content, block_name = self.blocks[ref], ref
        else:
            content = entry.get("layers", ref)
            block_name = self.block_names_by_id.get(id(content), "block")
        if not isinstance(content, list):
            raise ModelSyntaxError(f"block instance {name!r} has no layer list")
        if id(content) in self.stack:
            raise CycleDetected(f"block {block_name!r} references itself (via {name!r})")
        if not inputs:
            raise UnresolvableAuto(f"block instance {prefix + name!r} has no inputs to hand its layers")
        self.stack.append(id(content))
        try:
            instance = prefix + name
            return self.expand(content, f"{block_name}__{instance}__", _Scope(scope), inputs)
        finally:
            self.stack.pop()

    def _add_layer(self, entry: dict, prefix: str, inputs: list) -> str:
        full = prefix + entry["name"]
        kind = entry.get("type")
        if not isinstance(kind, str):
            raise ModelSyntaxError(f"layer {full!r} has no type")
        extra = set(entry) - {"name", "type", "params", "inputs"}
        if extra:
            raise ModelSyntaxError(f"layer {full!r} has unknown keys {sorted(extra)}")
        params = entry.get("params")
        if params is not None and not isinstance(params, dict):
            raise ModelSyntaxError(f"params of {full!r} must be a mapping")
        params = normalize_params(kind, params, where=full)
        if kind == "input" and inputs:
            raise InvalidGraph(f"input layer {full!r} cannot have inputs")
        if kind != "input" and not inputs:
            raise InvalidGraph(f"layer {full!r} has no inputs")
        if full in self.seen:
            raise DuplicateName(f"layer name {full!r} is not unique")
        self.seen.add(full)
        self.nodes.append(_PendingNode(full, kind, params, inputs))
        return full


def _resolve(pending: _PendingNode, full_names: set[str]) -> tuple[str, ...]:
    out = []
    for tag, value in pending.inputs:
        if tag == "full":
            out.append(value)
            continue
        name, scope = value
        target = scope.lookup(name)
        if target is None and name in full_names:
            target = name
        if target is None:
            raise UnresolvedReference(f"layer {pending.name!r} references unknown input {name!r}")
        out.append(target)
    return tuple(out)


def parse_model_spec(document_text: str) -> LayerGraph:
    """Parse a model-description document into a validated :class:`LayerGraph`.

    Raises one of the :class:`ModelSpecError` subclasses on malformed input.
    """
    try:
        doc = yaml.safe_load(document_text)
    except yaml.composer.ComposerError as exc:
        if "undefined alias" in str(exc.problem):
            raise UnresolvedReference(f"undefined alias: {exc}") from exc
        raise ModelSyntaxError(f"malformed document: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ModelSyntaxError(f"malformed document: {exc}") from exc
    if not isinstance(doc, dict) or "layers" not in doc:
        raise ModelSyntaxError("document must be a mapping with a 'layers' key")
    unknown = set(doc) - {"blocks", "layers", "name"}
    if unknown:
        raise ModelSyntaxError(f"unknown top-level keys: {sorted(unknown)}")
    blocks = doc.get("blocks") or {}
    if not isinstance(blocks, dict):
        raise ModelSyntaxError("'blocks' must map block names to layer lists")

    expander = _Expander(blocks)
    expander.expand(doc["layers"], "", _Scope(None), None)
    full_names = {p.name for p in expander.nodes}
    nodes = tuple(LayerNode(p.name, p.kind, p.params, _resolve(p, full_names)) for p in expander.nodes)
    return validate_graph(LayerGraph(nodes))


def validate_graph(graph: LayerGraph) -> LayerGraph:
    """Check structure, infer shapes and return the graph with shape fields set."""
    names = [n.name for n in graph.nodes]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise DuplicateName(f"duplicate layer names: {dup}")
    known = set(names)
    for node in graph.nodes:
        for src in node.inputs:
            if src not in known:
                raise UnresolvedReference(f"layer {node.name!r} references unknown input {src!r}")
    inputs = [n for n in graph.nodes if n.kind == "input"]
    if len(inputs) != 1:
        raise InvalidGraph(f"expected exactly one input layer, found {len(inputs)}")
    topological_order(graph)
    graph.output_node  # noqa: B018 - raises when the sink is ambiguous
    info = infer_shapes_and_count(graph)
    out_shape = info.shapes[_logit_node(graph)]
    if len(out_shape) != 1:
        raise ShapeMismatch(f"output must be a feature vector, got shape {out_shape}")
    return LayerGraph(graph.nodes, inputs[0].params["shape"], out_shape[0])


def _logit_node(graph: LayerGraph) -> str:
    out = graph.output_node
    node = graph.node(out)
    if node.kind == "softmax":
        return node.inputs[0] if len(node.inputs) == 1 else out
    return out


def topological_order(graph: LayerGraph) -> list[str]:
    """Kahn's algorithm; ties go to the node declared first."""
    index = {n.name: i for i, n in enumerate(graph.nodes)}
    indegree = {n.name: 0 for n in graph.nodes}
    consumers: dict[str, list[str]] = {n.name: [] for n in graph.nodes}
    for node in graph.nodes:
        for src in node.inputs:
            if src not in index:
                raise UnresolvedReference(f"layer {node.name!r} references unknown input {src!r}")
            indegree[node.name] += 1
            consumers[src].append(node.name)
    ready = [(index[n], n) for n, d in indegree.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        _, name = heapq.heappop(ready)
        order.append(name)
        for dst in consumers[name]:
            indegree[dst] -= 1
            if indegree[dst] == 0:
                heapq.heappush(ready, (index[dst], dst))
    if len(order) != len(graph.nodes):
        stuck = sorted(n for n, d in indegree.items() if d > 0)
        raise CycleDetected(f"cycle among layers {stuck}")
    return order


# ---------------------------------------------------------------------------
# shapes and parameter counts


@dataclass(frozen=True)
class ShapeInfo:
    shapes: dict[str, tuple[int, ...]]
    params: dict[str, int]
    total: int


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return math.ceil(size / stride)
    out = (size - kernel) // stride + 1
    if out < 1:
        raise ShapeMismatch(f"window {kernel} larger than input extent {size}")
    return out


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def infer_shapes_and_count(graph: LayerGraph) -> ShapeInfo:
    """Per-node output shapes and trainable-parameter counts.

    Nodes with several inputs receive the element-wise sum of their inputs,
    so all incoming shapes must agree.
    """
    shapes: dict[str, tuple[int, ...]] = {}
    params: dict[str, int] = {}
    for name in topological_order(graph):
        node = graph.node(name)
        p = node.params
        if node.kind == "input":
            shapes[name] = tuple(p["shape"])
            params[name] = 0
            continue
        in_shapes = {shapes[src] for src in node.inputs}
        if len(in_shapes) != 1:
            raise ShapeMismatch(f"layer {name!r} merges inputs of different shapes {sorted(in_shapes)}")
        (shape,) = in_shapes
        count = 0
        if node.kind == "dense":
            if len(shape) != 1:
                raise ShapeMismatch(f"dense layer {name!r} needs a flat input, got {shape}")
            count = (shape[0] + 1) * p["units"]
            shape = (p["units"],)
        elif node.kind in ("conv2d", "maxpool2d"):
            if len(shape) != 3:
                raise ShapeMismatch(f"{node.kind} layer {name!r} needs (H, W, C) input, got {shape}")
            h, w, c = shape
            k = p["kernel_size"] if node.kind == "conv2d" else p["pool_size"]
            ho = conv_output_size(h, k, p["stride"], p["padding"])
            wo = conv_output_size(w, k, p["stride"], p["padding"])
            if node.kind == "conv2d":
                count = (k * k * c + 1) * p["filters"]
                shape = (ho, wo, p["filters"])
            else:
                shape = (ho, wo, c)
        elif node.kind == "flatten":
            shape = (math.prod(shape),)
        elif node.kind == "batchnorm":
            count = 2 * shape[-1]
        elif node.kind == "softmax" and len(shape) != 1:
            raise ShapeMismatch(f"softmax layer {name!r} needs a flat input, got {shape}")
        shapes[name] = shape
        params[name] = count
    return ShapeInfo(shapes, params, sum(params.values()))


# ---------------------------------------------------------------------------
# canonical serialization


def _plain(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def to_canonical_yaml(graph: LayerGraph) -> str:
    """Serialize to the canonical form: no blocks, explicit inputs, sorted params."""
    layers = []
    for node in graph.nodes:
        entry: dict[str, Any] = {"name": node.name, "type": node.kind}
        if node.params:
            entry["params"] = {k: _plain(node.params[k]) for k in sorted(node.params)}
        entry["inputs"] = list(node.inputs)
        layers.append(entry)
    return yaml.safe_dump({"layers": layers}, sort_keys=False, default_flow_style=None, width=120)


def load_model_file(path) -> LayerGraph:
    with open(path, encoding="utf-8") as fh:
        return parse_model_spec(fh.read())
