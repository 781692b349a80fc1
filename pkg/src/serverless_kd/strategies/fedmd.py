"""FedMD: public transfer learning, then communicate / aggregate / digest / revisit rounds."""

from __future__ import annotations

from typing import Any

from ..faas import Call, PoolConfig
from . import functions as fn
from .functions import ref
from .state import ExperimentState, StrategyError, mean_accuracy

ROUND_STEPS = ("communicate", "aggregate", "digest", "revisit", "evaluate")


def _evaluate_all(state: ExperimentState, rnd: int) -> dict[str, float]:
    s = state.strategy
    offset = 0 if s.eval_dataset == "public_test" else state.catalog["public"].num_classes
    calls = [
        Call(state.client_spec(cid, fn.evaluate),
             {"config": cid, "src": state.pointers[cid], "dataset": s.eval_dataset, "label_offset": offset},
             "evaluate", rnd)
        for cid in state.profiles
    ]
    out = {}
    for cid, (res, rec) in zip(state.profiles, state.dispatcher.invoke_all(calls)):
        if rec.outcome == "ok":
            out[cid] = res["top1_accuracy"]
    return out


def _by_arch(state: ExperimentState, per_client: dict[str, float]) -> dict[str, float]:
    acc = {}
    for arch in state.architectures:
        vals = {c: v for c, v in per_client.items() if state.profiles[c].architecture_id == arch}
        if vals:
            acc[arch] = mean_accuracy(vals)
    acc["mean"] = mean_accuracy(per_client)
    return acc


def fedmd_transfer_learning(state: ExperimentState) -> dict[str, Any]:
    """Public-set training on the task pool, then a short private fine-tune per client."""
    s, cfg = state.strategy, state.config
    clients = list(state.profiles)
    tasks = [
        Call(state.pool_spec(f"transfer-{cid}", fn.transfer_public),
             {"client": cid, "dst": ref("weights", f"{cid}.public", 0), "max_epochs": s.transfer_max_epochs,
              "patience": s.transfer_patience, "val_fraction": s.transfer_val_fraction,
              "seed": state.seed("transfer", cid)},
             "transfer", 0)
        for cid in clients
    ]
    p = cfg.faas.pool
    pool = state.dispatcher.pool_run(tasks, PoolConfig(p.max_instances, p.scale_to_zero, p.per_instance_slots))
    failed = [cid for cid, rec in zip(clients, pool.records) if rec.outcome != "ok"]
    if failed:
        errors = "; ".join(f"{cid}: {rec.error}" for cid, rec in zip(clients, pool.records) if rec.outcome != "ok")
        raise StrategyError(f"transfer learning failed for {failed}: {errors}")

    calls = [
        Call(state.client_spec(cid, fn.local_train),
             {"client": cid, "src": ref("weights", f"{cid}.public", 0), "dst": ref("weights", cid, 0),
              "epochs": s.private_finetune_epochs, "seed": state.seed("finetune", cid)},
             "transfer", 0)
        for cid in clients
    ]
    for cid, (_, rec) in zip(clients, state.dispatcher.invoke_all(calls)):
        state.pointers[cid] = ref("weights", cid, 0) if rec.outcome == "ok" else ref("weights", f"{cid}.public", 0)

    state.baseline = _by_arch(state, _evaluate_all(state, 0))
    info = {
        "pool_makespan_ms": pool.makespan_ms,
        "pool_peak_instances": pool.peak_instances,
        "pool_trace": pool.trace,
        "public_results": dict(zip(clients, pool.results)),
    }
    state.info["transfer"] = info
    return info


def fedmd_round(state: ExperimentState, rnd: int) -> dict[str, Any]:
    """One synchronous round over every client; returns the history entry."""
    s, cfg = state.strategy, state.config
    d = state.dispatcher
    clients = list(state.profiles)
    subset = [min(s.subset_size, len(state.catalog["public"])), cfg.seed + rnd]
    consensus = ref("consensus", "global", rnd)
    durations: dict[str, float] = {}
    failures: list[str] = []
    flagged = False

    def step(name, calls, limit=None):
        t0 = d.clock_ms
        out = d.invoke_all(calls, limit) if calls else []
        durations[name] = d.clock_ms - t0
        for call, (_, rec) in zip(calls, out):
            if rec.outcome != "ok":
                failures.append(f"{name}:{call.payload.get('client', call.spec.name)}:{rec.outcome}")
        return out

    start = d.clock_ms
    out = step("communicate", [
        Call(state.client_spec(cid, fn.communicate),
             {"client": cid, "src": state.pointers[cid], "dst": ref("logits", cid, rnd), "subset": subset},
             "communicate", rnd)
        for cid in clients
    ])
    sent = [cid for cid, (_, rec) in zip(clients, out) if rec.outcome == "ok"]

    agg_ok = False
    if sent:
        out = step("aggregate", [
            Call(state.aggregator_spec("aggregator", fn.aggregate),
                 {"round": rnd, "subset": subset, "dst": consensus,
                  "logits": [ref("logits", cid, rnd) for cid in sent]},
                 "aggregate", rnd)
        ])
        agg_ok = out[0][1].outcome == "ok"
    else:
        durations["aggregate"] = 0.0
    if not agg_ok:
        flagged = True

    digested = []
    if agg_ok:
        out = step("digest", [
            Call(state.client_spec(cid, fn.digest),
                 {"client": cid, "src": state.pointers[cid], "dst": ref("weights", f"{cid}.digest", rnd),
                  "consensus": consensus, "subset": subset, "loss": s.digest_loss, "epochs": s.digest_epochs,
                  "seed": state.seed("digest", cid, rnd)},
                 "digest", rnd)
            for cid in sent
        ])
        digested = [cid for cid, (_, rec) in zip(sent, out) if rec.outcome == "ok"]
        digest_loss = {cid: res["initial_loss"] for cid, (res, rec) in zip(sent, out) if rec.outcome == "ok"}
    else:
        durations["digest"] = 0.0
        digest_loss = {}

    out = step("revisit", [
        Call(state.client_spec(cid, fn.local_train),
             {"client": cid, "src": ref("weights", f"{cid}.digest", rnd), "dst": ref("weights", cid, rnd),
              "epochs": s.revisit_epochs, "seed": state.seed("revisit", cid, rnd)},
             "revisit", rnd)
        for cid in digested
    ])
    for cid, (_, rec) in zip(digested, out):
        if rec.outcome == "ok":
            state.pointers[cid] = ref("weights", cid, rnd)

    t0 = d.clock_ms
    per_client = _evaluate_all(state, rnd)
    durations["evaluate"] = d.clock_ms - t0
    failures += [f"evaluate:{cid}:failed" for cid in clients if cid not in per_client]

    entry = {
        "round": rnd,
        "accuracy": _by_arch(state, per_client),
        "client_accuracy": per_client,
        "step_durations_ms": {k: durations.get(k, 0.0) for k in ROUND_STEPS},
        "round_duration_ms": d.clock_ms - start,
        "selected": clients,
        "digest_initial_loss": digest_loss,
        "failures": failures,
        "flagged": flagged,
    }
    state.history.append(entry)
    return entry
