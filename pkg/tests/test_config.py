import dataclasses

import pytest
import yaml

from conftest import CONFIGS, toy_raw
from serverless_kd.config import (
    ConfigError,
    FaasConfig,
    StrategyConfig,
    load_config,
    parse_config,
)
from serverless_kd.costs import PricingConfig


def parse(raw):
    return parse_config(raw, base_dir=CONFIGS)


@pytest.mark.parametrize("name", ["fedmd_toy.cfg", "feddf_toy.cfg"])
def test_bundled_configs_load(name):
    cfg = load_config(CONFIGS / name)
    assert sum(a.clients for a in cfg.architectures) == cfg.n_clients
    assert cfg.name == name.split(".")[0]


def test_defaults_resolved():
    cfg = parse(toy_raw("fedmd"))
    assert cfg.strategy.clients_per_round == 10
    assert cfg.strategy.distill_lr == cfg.strategy.lr
    assert cfg.strategy.distill_batch_size == cfg.strategy.batch_size
    assert (cfg.faas.aggregator.memory_gib, cfg.faas.aggregator.vcpus) == (8.0, 4.0)
    df = parse(toy_raw("feddf", {"clients_per_round": 0}))
    assert df.strategy.clients_per_round == 10
    assert (df.faas.aggregator.memory_gib, df.faas.aggregator.vcpus) == (16.0, 6.0)


def test_resolved_config_lists_every_default():
    resolved = yaml.safe_load(parse(toy_raw("fedmd")).dump())
    assert set(resolved["strategy"]) == {f.name for f in dataclasses.fields(StrategyConfig)}
    assert set(resolved["faas"]) == {f.name for f in dataclasses.fields(FaasConfig)}
    assert set(resolved["faas"]["pool"]) == {"max_instances", "scale_to_zero", "per_instance_slots",
                                             "memory_gib", "vcpus"}
    assert set(resolved["pricing"]) == {f.name for f in dataclasses.fields(PricingConfig)}
    assert resolved["strategy"]["ema_beta"] == 0.5
    assert resolved["strategy"]["distill_patience"] == 5
    assert resolved["strategy"]["transfer_patience"] == 3
    assert resolved["faas"]["client"]["timeout_s"] == 900.0
    assert resolved["pricing"]["ghz_per_vcpu"] == 2.4


def test_resolved_config_reparses_to_same_config():
    cfg = parse(toy_raw("feddf"))
    again = parse(yaml.safe_load(cfg.dump()))
    assert again == cfg
    assert again.dump() == cfg.dump()


@pytest.mark.parametrize(
    "mutate, path",
    [
        (lambda r: r.update(n_clients=11), "architectures"),
        (lambda r: r.update(bogus=1), "bogus"),
        (lambda r: r["strategy"].update(ema_beta=0.0), "strategy.ema_beta"),
        (lambda r: r["strategy"].update(name="fedprox"), "strategy.name"),
        (lambda r: r["strategy"].update(rounds="five"), "strategy.rounds"),
        (lambda r: r["strategy"].update(lr=-1), "strategy.lr"),
        (lambda r: r["strategy"].update(typo_knob=3), "strategy.typo_knob"),
        (lambda r: r["faas"].update(time_model="sundial"), "faas.time_model"),
        (lambda r: r["faas"].update(client={"memory_gib": 0, "vcpus": 1}), "faas.client.memory_gib"),
        (lambda r: r["data"].pop("public"), "data.public"),
        (lambda r: r.update(alpha=0), "alpha"),
        (lambda r: r["architectures"][0].update(model="models/missing.yaml"), "architectures[0].model"),
        (lambda r: r["pricing"].update(billing_granularity_ms=0) if "pricing" in r
         else r.update(pricing={"billing_granularity_ms": 0}), "pricing"),
    ],
)
def test_config_errors_name_the_field(mutate, path):
    raw = toy_raw("fedmd")
    mutate(raw)
    with pytest.raises(ConfigError) as info:
        parse(raw)
    assert info.value.path.startswith(path)
    assert str(info.value).startswith(path)


def test_output_size_checked_against_strategy():
    # FedMD heads need public + private outputs, FedDF heads private only
    raw = toy_raw("fedmd")
    raw["architectures"][0]["model"] = "models/mlp_feddf.yaml"
    from serverless_kd.strategies.state import setup_experiment

    with pytest.raises(ConfigError) as info:
        setup_experiment(parse(raw))
    assert info.value.path == "architectures[0].model"


def test_inline_model_and_bad_model():
    raw = toy_raw("feddf")
    raw["architectures"][0]["model"] = yaml.safe_load((CONFIGS / "models" / "mlp_feddf.yaml").read_text())
    cfg = parse(raw)
    assert cfg.architectures[0].graph == load_config(CONFIGS / "feddf_toy.cfg").architectures[0].graph
    raw["architectures"][0]["model"] = {"layers": [{"name": "x", "type": "dense", "inputs": "auto"}]}
    with pytest.raises(ConfigError) as info:
        parse(raw)
    assert info.value.path == "architectures[0].model"


def test_overrides():
    cfg = parse(toy_raw("fedmd")).with_overrides(seed=2**64 - 1, output_dir="elsewhere")
    assert cfg.seed == 2**64 - 1 and cfg.output_dir == "elsewhere"


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")
    bad = tmp_path / "bad.cfg"
    bad.write_text("seed: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_stale_fingerprint_rejected():
    raw = yaml.safe_load(parse(toy_raw("feddf")).dump())
    raw["architectures"][0]["fingerprint"] = "0" * 64
    with pytest.raises(ConfigError) as info:
        parse(raw)
    assert info.value.path == "architectures[0].fingerprint"
