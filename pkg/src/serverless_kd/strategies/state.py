"""Experiment state shared by the FedMD and FedDF orchestrators."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from ..config import ConfigError, ExperimentConfig
from ..data import DataError, LabeledDataset, PartitionPlan, dirichlet_partition, load_dataset
from ..faas import Dispatcher, FunctionSpec
from ..nn import build_network, network_to_blob
from ..store import MemoryStore, ParameterStore, StoreKey
from .functions import ref
from .selection import ClientProfile


class StrategyError(RuntimeError):
    """A failure that aborts the experiment (e.g. a transfer-learning task)."""


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from ints and strings."""
    words = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def arch_owner(arch_id: str) -> str:
    return f"arch-{arch_id}"


@dataclass
class ExperimentState:
    config: ExperimentConfig
    store: ParameterStore
    dispatcher: Dispatcher
    catalog: dict[str, LabeledDataset]
    partition: PartitionPlan
    profiles: dict[str, ClientProfile]
    pointers: dict[str, list] = field(default_factory=dict)
    history: list[dict[str, Any]] = field(default_factory=list)
    baseline: dict[str, float] = field(default_factory=dict)
    info: dict[str, Any] = field(default_factory=dict)

    @property
    def strategy(self):
        return self.config.strategy

    @property
    def architectures(self) -> list[str]:
        return [a.id for a in self.config.architectures]

    def clients_of(self, arch_id: str) -> list[str]:
        return [c for c, p in self.profiles.items() if p.architecture_id == arch_id]

    def client_spec(self, cid: str, handler: Callable) -> FunctionSpec:
        r = self.config.faas.client
        return FunctionSpec(f"client-{cid}", handler, r.memory_gib, r.vcpus, r.timeout_s)

    def aggregator_spec(self, name: str, handler: Callable) -> FunctionSpec:
        r = self.config.faas.aggregator
        return FunctionSpec(name, handler, r.memory_gib, r.vcpus, r.timeout_s)

    def pool_spec(self, name: str, handler: Callable) -> FunctionSpec:
        p = self.config.faas.pool
        return FunctionSpec(name, handler, p.memory_gib, p.vcpus)

    def seed(self, *tags) -> int:
        return derive_seed(self.config.seed, *tags)

    @property
    def clock_ms(self) -> float:
        return self.dispatcher.clock_ms


def load_data_spec(spec, field_path: str, name: str) -> LabeledDataset:
    spec = dict(spec)
    fmt = spec.pop("format")
    try:
        if fmt == "synthetic":
            return load_dataset(spec, "synthetic", name=name)
        return load_dataset(spec["path"], fmt, labels_path=spec.get("labels_path"),
                            num_classes=spec.get("num_classes"), name=name)
    except DataError as exc:
        raise ConfigError(field_path, f"{type(exc).__name__}: {exc}") from exc


def build_catalog(config: ExperimentConfig) -> dict[str, LabeledDataset]:
    private = load_data_spec(config.data.private, "data.private", "private")
    public = load_data_spec(config.data.public, "data.public", "public")
    if config.data.test is not None:
        test = load_data_spec(config.data.test, "data.test", "private_test")
    else:
        private, test = private.split(config.data.test_fraction, derive_seed(config.seed, "test-split"))
    catalog = {"private": private, "public": public, "private_test": test}
    if config.strategy.eval_dataset == "public_test":
        catalog["public"], catalog["public_test"] = public.split(
            config.data.test_fraction, derive_seed(config.seed, "public-split"))
    return catalog


def _check_shapes(config: ExperimentConfig, catalog) -> int:
    private, public = catalog["private"], catalog["public"]
    offset = public.num_classes if config.strategy.name == "fedmd" else 0
    want = offset + private.num_classes
    for i, arch in enumerate(config.architectures):
        g = arch.graph
        for ds in (private, public):
            if tuple(g.input_shape) != ds.shape:
                raise ConfigError(f"architectures[{i}].model",
                                  f"input shape {tuple(g.input_shape)} does not match {ds.name} data {ds.shape}")
        if g.output_dim != want:
            detail = "public + private classes" if offset else "private classes"
            raise ConfigError(f"architectures[{i}].model", f"output size {g.output_dim} != {want} ({detail})")
    if config.strategy.eval_dataset == "public_test" and config.strategy.name == "feddf":
        raise ConfigError("strategy.eval_dataset", "FedDF students predict private classes; use private_test")
    return offset


def make_partition(config: ExperimentConfig, labels) -> PartitionPlan:
    return dirichlet_partition(labels, config.n_clients, config.alpha, derive_seed(config.seed, "partition"))


def client_ids(config: ExperimentConfig) -> list[tuple[str, str]]:
    out = []
    for arch in config.architectures:
        for _ in range(arch.clients):
            out.append((f"c{len(out):03d}", arch.id))
    return out


def setup_experiment(config: ExperimentConfig, store: ParameterStore | None = None,
                     dispatcher: Dispatcher | None = None) -> ExperimentState:
    catalog = build_catalog(config)
    offset = _check_shapes(config, catalog)
    partition = make_partition(config, catalog["private"].labels)
    store = store if store is not None else MemoryStore()
    if dispatcher is None:
        dispatcher = Dispatcher(store, catalog, max_in_flight=config.faas.max_in_flight,
                                time_model=config.faas.time_model)
    s = config.strategy
    arch_by_id = {a.id: a for a in config.architectures}
    common = {"optimizer": s.optimizer, "batch_size": s.batch_size, "lr": s.lr, "label_offset": offset}
    profiles = {}
    for i, (cid, arch_id) in enumerate(client_ids(config)):
        arch = arch_by_id[arch_id]
        indices = partition.client_indices[i]
        doc = {"client_id": cid, "architecture_id": arch_id, "graph_hash": arch.graph.fingerprint(),
               "model": arch.model_text, "init_seed": derive_seed(config.seed, "init", cid),
               "indices": indices.tolist(), **common}
        store.put_bytes(StoreKey("client_config", cid, 0), json.dumps(doc, sort_keys=True).encode())
        profiles[cid] = ClientProfile(cid, arch_id, doc["graph_hash"], str(StoreKey("client_config", cid, 0)),
                                      f"private[{len(indices)}]",
                                      {"local_epochs": s.local_epochs, "batch_size": s.batch_size, "lr": s.lr})
    for arch in config.architectures:
        doc = {"client_id": arch_owner(arch.id), "architecture_id": arch.id, "graph_hash": arch.graph.fingerprint(),
               "model": arch.model_text, "init_seed": derive_seed(config.seed, "init", arch_owner(arch.id)),
               "indices": [], **common}
        store.put_bytes(StoreKey("client_config", arch_owner(arch.id), 0), json.dumps(doc, sort_keys=True).encode())
    return ExperimentState(config, store, dispatcher, catalog, partition, profiles)


def initial_server_weights(state: ExperimentState) -> None:
    """Seed every architecture (and its clients) with one shared initialization."""
    for arch in state.config.architectures:
        owner = arch_owner(arch.id)
        net = build_network(arch.graph, derive_seed(state.config.seed, "init", owner), state.strategy.optimizer)
        blob = network_to_blob(net)
        state.store.put_bytes(StoreKey("weights", owner, 0), blob)
        state.pointers[owner] = ref("weights", owner, 0)
        for cid in state.clients_of(arch.id):
            state.store.put_bytes(StoreKey("weights", cid, 0), blob)
            state.pointers[cid] = ref("weights", cid, 0)


def mean_accuracy(per_client: dict[str, float]) -> float:
    return float(np.mean(list(per_client.values()))) if per_client else float("nan")
