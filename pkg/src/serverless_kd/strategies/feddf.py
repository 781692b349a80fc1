"""FedDF: selected clients train locally, then one aggregator per architecture distills the ensemble."""

from __future__ import annotations

from typing import Any

from ..faas import Call
from . import functions as fn
from .functions import ref
from .selection import select_clients
from .state import ExperimentState, arch_owner, initial_server_weights

ROUND_STEPS = ("train", "distill")


def feddf_setup(state: ExperimentState) -> dict[str, float]:
    """Shared per-architecture initialization plus a round-0 evaluation of it."""
    initial_server_weights(state)
    calls = [
        Call(state.aggregator_spec(f"aggregator-{arch}", fn.evaluate),
             {"config": arch_owner(arch), "src": state.pointers[arch_owner(arch)],
              "dataset": state.strategy.eval_dataset},
             "evaluate", 0)
        for arch in state.architectures
    ]
    acc = {}
    for arch, (res, rec) in zip(state.architectures, state.dispatcher.invoke_all(calls)):
        if rec.outcome == "ok":
            acc[arch] = res["top1_accuracy"]
    state.baseline = _with_mean(state, acc)
    state.info["server_accuracy"] = dict(acc)
    return state.baseline


def _with_mean(state: ExperimentState, acc: dict[str, float]) -> dict[str, float]:
    out = dict(acc)
    weights = {a: len(state.clients_of(a)) for a in acc}
    total = sum(weights.values())
    out["mean"] = sum(acc[a] * weights[a] for a in acc) / total if total else float("nan")
    return out


def distill_config(state: ExperimentState) -> dict[str, Any]:
    s = state.strategy
    return {"temperature": s.distill_temperature, "lr": s.distill_lr, "batch_size": s.distill_batch_size,
            "eval_every": s.distill_eval_every, "patience": s.distill_patience, "min_delta": s.distill_min_delta,
            "max_steps": s.distill_max_steps, "val_fraction": s.distill_val_fraction, "optimizer": s.optimizer}


def distill_calls(state: ExperimentState, rnd: int, teachers: list[str]) -> list[Call]:
    """One aggregator invocation per architecture, in architecture order."""
    teacher_refs = [{"client": cid, "weights": ref("weights", f"{cid}.local", rnd)} for cid in sorted(teachers)]
    calls = []
    for arch in state.architectures:
        owner = arch_owner(arch)
        dst = [ref("weights", owner, rnd)] + [ref("weights", cid, rnd) for cid in state.clients_of(arch)]
        calls.append(Call(
            state.aggregator_spec(f"aggregator-{arch}", fn.distill),
            {"architecture": owner, "round": rnd, "teachers": teacher_refs, "init": state.pointers[owner],
             "dst": dst, "config": distill_config(state), "seed": state.seed("distill", arch, rnd),
             "dataset": state.strategy.eval_dataset},
            "distill", rnd))
    return calls


def feddf_round(state: ExperimentState, rnd: int) -> dict[str, Any]:
    s = state.strategy
    d = state.dispatcher
    start = d.clock_ms
    selected = select_clients(list(state.profiles.values()), s.clients_per_round, rnd, s.rotate_selection)
    calls = [
        Call(state.client_spec(cid, fn.local_train),
             {"client": cid, "src": state.pointers[cid], "dst": ref("weights", f"{cid}.local", rnd),
              "epochs": s.local_epochs, "seed": state.seed("train", cid, rnd)},
             "train", rnd)
        for cid in selected
    ]
    out = d.invoke_all(calls)
    train_ms = d.clock_ms - start
    failures = []
    trained = []
    for cid, (_, rec) in zip(selected, out):
        state.profiles[cid] = state.profiles[cid].observe(rec.outcome, rec.duration_ms, s.ema_beta)
        if rec.outcome == "ok":
            trained.append(cid)
        else:
            failures.append(f"train:{cid}:{rec.outcome}")

    prev = state.info.get("server_accuracy", {})
    accuracy = dict(prev)
    steps: dict[str, int] = {}
    flagged = False
    t0 = d.clock_ms
    if trained:
        calls = distill_calls(state, rnd, trained)
        out = d.invoke_all(calls, None if state.config.faas.parallel_aggregators else 1)
        for arch, call, (res, rec) in zip(state.architectures, calls, out):
            if rec.outcome != "ok":
                flagged = True
                failures.append(f"distill:{arch}:{rec.outcome}")
                continue
            for dst in call.payload["dst"]:
                state.pointers[dst[1]] = dst
            accuracy[arch] = res["accuracy"]
            steps[arch] = res["steps"]
    else:
        flagged = True
    distill_ms = d.clock_ms - t0
    state.info["server_accuracy"] = {a: accuracy[a] for a in state.architectures if a in accuracy}

    entry = {
        "round": rnd,
        "accuracy": _with_mean(state, state.info["server_accuracy"]),
        "step_durations_ms": {"train": train_ms, "distill": distill_ms},
        "round_duration_ms": d.clock_ms - start,
        "selected": selected,
        "distill_steps": steps,
        "ema_ms": {c: p.ema_duration_ms for c, p in state.profiles.items()},
        "failures": failures,
        "flagged": flagged,
    }
    state.history.append(entry)
    return entry
