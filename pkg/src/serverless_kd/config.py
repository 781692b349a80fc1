"""Experiment configuration: loading, validation and the resolved (defaults-filled) form."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .costs import PricingConfig
from .model_dsl import LayerGraph, ModelSpecError, parse_model_spec

STRATEGIES = ("fedmd", "feddf")
EVAL_DATASETS = ("private_test", "public_test")
DATA_FORMATS = ("synthetic", "idx", "csv")


class ConfigError(ValueError):
    """Invalid experiment config; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class FunctionResources:
    memory_gib: float
    vcpus: float
    timeout_s: float = 900.0


@dataclass(frozen=True)
class PoolResources:
    max_instances: int = 8
    scale_to_zero: bool = True
    per_instance_slots: int = 1
    memory_gib: float = 16.0
    vcpus: float = 4.0


@dataclass(frozen=True)
class FaasConfig:
    time_model: str = "cpu"
    max_in_flight: int = 8
    store: str = "memory"
    parallel_aggregators: bool = True
    client: FunctionResources = FunctionResources(4.0, 2.0)
    aggregator: FunctionResources = FunctionResources(8.0, 4.0)
    pool: PoolResources = PoolResources()


@dataclass(frozen=True)
class StrategyConfig:
    name: str = "fedmd"
    rounds: int = 5
    clients_per_round: int = 0
    batch_size: int = 32
    lr: float = 0.01
    optimizer: str = "sgd"
    eval_dataset: str = "private_test"
    # FedMD
    transfer_max_epochs: int = 50
    transfer_patience: int = 3
    transfer_val_fraction: float = 0.1
    private_finetune_epochs: int = 2
    subset_size: int = 1024
    digest_epochs: int = 1
    digest_loss: str = "logit_l1"
    revisit_epochs: int = 2
    # FedDF
    local_epochs: int = 2
    ema_beta: float = 0.5
    rotate_selection: bool = True
    distill_temperature: float = 1.0
    distill_lr: float = 0.0
    distill_batch_size: int = 0
    distill_eval_every: int = 20
    distill_patience: int = 5
    distill_min_delta: float = 1e-4
    distill_max_steps: int = 1000
    distill_val_fraction: float = 0.1


@dataclass(frozen=True)
class ArchitectureEntry:
    id: str
    model: Any
    clients: int
    graph: LayerGraph = field(compare=False, repr=False, default=None)

    @property
    def model_text(self) -> str:
        return self.graph.canonical_text


@dataclass(frozen=True)
class DataConfig:
    private: Mapping[str, Any]
    public: Mapping[str, Any]
    test: Mapping[str, Any] | None = None
    test_fraction: float = 0.2


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    alpha: float
    n_clients: int
    data: DataConfig
    architectures: tuple[ArchitectureEntry, ...]
    strategy: StrategyConfig = StrategyConfig()
    faas: FaasConfig = FaasConfig()
    pricing: PricingConfig = PricingConfig()
    output_dir: str = "runs/experiment"
    name: str = "experiment"
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def with_overrides(self, seed: int | None = None, output_dir: str | None = None) -> ExperimentConfig:
        out = self
        if seed is not None:
            out = replace(out, seed=int(seed))
        if output_dir is not None:
            out = replace(out, output_dir=str(output_dir))
        return out

    def resolved(self) -> dict[str, Any]:
        """Plain mapping with every default written out."""
        return {
            "name": self.name,
            "seed": self.seed,
            "alpha": self.alpha,
            "n_clients": self.n_clients,
            "data": {
                "private": dict(self.data.private),
                "public": dict(self.data.public),
                "test": None if self.data.test is None else dict(self.data.test),
                "test_fraction": self.data.test_fraction,
            },
            "architectures": [
                {"id": a.id, "model": a.model if isinstance(a.model, str) else yaml.safe_load(a.model_text),
                 "clients": a.clients, "fingerprint": a.graph.fingerprint()}
                for a in self.architectures
            ],
            "strategy": asdict(self.strategy),
            "faas": asdict(self.faas),
            "pricing": asdict(self.pricing),
            "output_dir": self.output_dir,
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.resolved(), sort_keys=True, default_flow_style=False)


# ---------------------------------------------------------------------------
# parsing helpers


def _check_keys(raw: Mapping, allowed, path: str) -> None:
    if not isinstance(raw, Mapping):
        raise ConfigError(path, "expected a mapping")
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}" if path else str(key), "unknown field")


def _typed(value, kind, path: str):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _section(cls, raw: Mapping | None, path: str, base):
    """Build a flat dataclass from ``raw`` over the defaults in ``base``."""
    raw = raw or {}
    values = asdict(base)
    _check_keys(raw, values, path)
    for key, value in raw.items():
        kind = type(values[key])
        values[key] = _typed(value, kind, f"{path}.{key}") if kind in (int, float, str, bool) else value
    try:
        return cls(**values)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from exc


def _positive(value, path: str, allow_zero: bool = False):
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(path, f"must be {'nonnegative' if allow_zero else 'positive'}, got {value}")


def _fraction(value, path: str):
    if not 0.0 < value < 1.0:
        raise ConfigError(path, f"must lie in (0, 1), got {value}")


def _dataset_spec(raw, path: str, base_dir: Path) -> dict[str, Any]:
    if not isinstance(raw, Mapping):
        raise ConfigError(path, "expected a dataset mapping")
    spec = dict(raw)
    fmt = spec.get("format")
    if fmt not in DATA_FORMATS:
        raise ConfigError(f"{path}.format", f"must be one of {DATA_FORMATS}")
    if fmt == "synthetic":
        for key in ("classes", "dim", "samples_per_class", "spread", "seed"):
            if key not in spec:
                raise ConfigError(f"{path}.{key}", "required for synthetic datasets")
        spec.setdefault("center_scale", 1.0)
    else:
        if "path" not in spec:
            raise ConfigError(f"{path}.path", "required")
        for key in ("path", "labels_path"):
            if spec.get(key) is not None:
                p = Path(spec[key])
                p = p if p.is_absolute() else base_dir / p
                if not p.exists():
                    raise ConfigError(f"{path}.{key}", f"file not found: {p}")
                spec[key] = str(p)
    return spec


def _architectures(raw, base_dir: Path) -> tuple[ArchitectureEntry, ...]:
    if not isinstance(raw, list) or not raw:
        raise ConfigError("architectures", "expected a nonempty list")
    out = []
    seen = set()
    for i, entry in enumerate(raw):
        path = f"architectures[{i}]"
        _check_keys(entry, {"id", "model", "clients", "fingerprint"}, path)
        arch_id = str(entry.get("id", f"model{i}"))
        if arch_id in seen or "/" in arch_id or not arch_id:
            raise ConfigError(f"{path}.id", f"invalid or duplicate architecture id {arch_id!r}")
        seen.add(arch_id)
        clients = _typed(entry.get("clients"), int, f"{path}.clients")
        _positive(clients, f"{path}.clients")
        model = entry.get("model")
        if isinstance(model, str):
            file = Path(model)
            file = file if file.is_absolute() else base_dir / file
            if not file.exists():
                raise ConfigError(f"{path}.model", f"file not found: {file}")
            text = file.read_text()
            model = str(file)
        elif isinstance(model, Mapping):
            text = yaml.safe_dump(dict(model), sort_keys=False)
        else:
            raise ConfigError(f"{path}.model", "expected a file path or an inline model mapping")
        try:
            graph = parse_model_spec(text)
        except ModelSpecError as exc:
            raise ConfigError(f"{path}.model", f"{type(exc).__name__}: {exc}") from exc
        # resolved configs record the digest; reject a model that changed since
        if "fingerprint" in entry and entry["fingerprint"] != graph.fingerprint():
            raise ConfigError(f"{path}.fingerprint", "does not match the model")
        out.append(ArchitectureEntry(arch_id, model if isinstance(model, str) else dict(entry["model"]), clients, graph))
    return tuple(out)


def _faas(raw, strategy: str) -> FaasConfig:
    raw = dict(raw or {})
    _check_keys(raw, {f.name for f in fields(FaasConfig)}, "faas")
    agg_default = FunctionResources(8.0, 4.0) if strategy == "fedmd" else FunctionResources(16.0, 6.0)
    parts = {}
    for key, base in (("client", FunctionResources(4.0, 2.0)), ("aggregator", agg_default), ("pool", PoolResources())):
        parts[key] = _section(type(base), raw.pop(key, None), f"faas.{key}", base)
    top = _section(FaasConfig, raw, "faas", FaasConfig())
    faas = replace(top, **parts)
    if faas.time_model not in ("cpu", "wall", "modeled"):
        raise ConfigError("faas.time_model", "must be one of cpu, wall, modeled")
    if faas.store not in ("memory", "file"):
        raise ConfigError("faas.store", "must be memory or file")
    _positive(faas.max_in_flight, "faas.max_in_flight")
    for key in ("client", "aggregator"):
        res = getattr(faas, key)
        for attr in ("memory_gib", "vcpus", "timeout_s"):
            _positive(getattr(res, attr), f"faas.{key}.{attr}")
    _positive(faas.pool.max_instances, "faas.pool.max_instances")
    _positive(faas.pool.per_instance_slots, "faas.pool.per_instance_slots")
    return faas


def _strategy(raw, n_clients: int) -> StrategyConfig:
    s = _section(StrategyConfig, raw, "strategy", StrategyConfig())

    if s.name not in STRATEGIES:
        raise ConfigError("strategy.name", f"must be one of {STRATEGIES}")
    if s.eval_dataset not in EVAL_DATASETS:
        raise ConfigError("strategy.eval_dataset", f"must be one of {EVAL_DATASETS}")
    if s.digest_loss not in ("logit_l1", "mse", "cross_entropy"):
        raise ConfigError("strategy.digest_loss", "must be logit_l1, mse or cross_entropy")
    if s.optimizer not in ("sgd", "adam"):
        raise ConfigError("strategy.optimizer", "must be sgd or adam")
    if s.clients_per_round == 0:
        s = replace(s, clients_per_round=n_clients if s.name == "fedmd" else min(10, n_clients))
    if s.distill_lr == 0.0:
        s = replace(s, distill_lr=s.lr)
    if s.distill_batch_size == 0:
        s = replace(s, distill_batch_size=s.batch_size)
    if not 1 <= s.clients_per_round <= n_clients:
        raise ConfigError("strategy.clients_per_round", f"must lie in [1, {n_clients}]")
    if s.name == "fedmd" and s.clients_per_round != n_clients:
        raise ConfigError("strategy.clients_per_round", "FedMD runs every client each round")
    for key in ("rounds", "batch_size", "distill_batch_size", "subset_size", "distill_eval_every",
                "transfer_patience", "distill_patience"):
        _positive(getattr(s, key), f"strategy.{key}")
    for key in ("transfer_max_epochs", "private_finetune_epochs", "digest_epochs", "revisit_epochs",
                "local_epochs", "distill_max_steps", "lr", "distill_lr", "distill_min_delta"):
        _positive(getattr(s, key), f"strategy.{key}", allow_zero=True)
    _positive(s.distill_temperature, "strategy.distill_temperature")
    if not 0.0 < s.ema_beta <= 1.0:
        raise ConfigError("strategy.ema_beta", "must lie in (0, 1]")
    _fraction(s.transfer_val_fraction, "strategy.transfer_val_fraction")
    _fraction(s.distill_val_fraction, "strategy.distill_val_fraction")
    return s


TOP_LEVEL = {"name", "seed", "alpha", "n_clients", "data", "architectures", "strategy", "faas", "pricing", "output_dir"}


def parse_config(raw: Mapping[str, Any], base_dir=".", name: str = "experiment") -> ExperimentConfig:
    base_dir = Path(base_dir)
    _check_keys(raw, TOP_LEVEL, "")
    for key in ("seed", "alpha", "n_clients", "data", "architectures"):
        if key not in raw:
            raise ConfigError(key, "required")
    seed = _typed(raw["seed"], int, "seed")
    _positive(seed, "seed", allow_zero=True)
    alpha = _typed(raw["alpha"], float, "alpha")
    _positive(alpha, "alpha")
    n_clients = _typed(raw["n_clients"], int, "n_clients")
    _positive(n_clients, "n_clients")

    data_raw = raw["data"]
    _check_keys(data_raw, {"private", "public", "test", "test_fraction"}, "data")
    for key in ("private", "public"):
        if key not in data_raw:
            raise ConfigError(f"data.{key}", "required")
    test_fraction = _typed(data_raw.get("test_fraction", 0.2), float, "data.test_fraction")
    _fraction(test_fraction, "data.test_fraction")
    data = DataConfig(
        _dataset_spec(data_raw["private"], "data.private", base_dir),
        _dataset_spec(data_raw["public"], "data.public", base_dir),
        None if data_raw.get("test") is None else _dataset_spec(data_raw["test"], "data.test", base_dir),
        test_fraction,
    )

    archs = _architectures(raw["architectures"], base_dir)
    total = sum(a.clients for a in archs)
    if total != n_clients:
        raise ConfigError("architectures", f"client counts sum to {total}, but n_clients is {n_clients}")

    strategy = _strategy(raw.get("strategy"), n_clients)
    faas = _faas(raw.get("faas"), strategy.name)
    pricing_raw = raw.get("pricing") or {}
    pricing = _section(PricingConfig, pricing_raw, "pricing", PricingConfig())
    name = str(raw.get("name", name))
    output_dir = _typed(raw.get("output_dir", f"runs/{name}"), str, "output_dir")
    return ExperimentConfig(seed, alpha, n_clients, data, archs, strategy, faas, pricing, output_dir, name, base_dir)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from exc
    if not isinstance(raw, Mapping):
        raise ConfigError("<file>", "top level must be a mapping")
    return parse_config(copy.deepcopy(raw), path.parent, path.stem)
