"""End-to-end experiment runs and partition previews."""

from __future__ import annotations

import io
import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .config import ExperimentConfig
from .costs import CostLedger, build_report, write_report
from .faas import write_ledger_csv
from .store import FileStore, MemoryStore
from .strategies.feddf import feddf_round, feddf_setup
from .strategies.fedmd import fedmd_round, fedmd_transfer_learning
from .strategies.state import (
    ExperimentState,
    StrategyError,
    build_catalog,
    client_ids,
    make_partition,
    setup_experiment,
)

log = logging.getLogger(__name__)

ARTIFACTS = ("ledger.csv", "pool_ledger.csv", "history.json", "resolved_config.yaml", "partition.csv")


@dataclass
class ExperimentResult:
    status: int
    out_dir: Path
    state: ExperimentState | None
    report: dict[str, Any] = field(default_factory=dict)
    error: str = ""

    @property
    def history(self) -> list[dict[str, Any]]:
        return [] if self.state is None else self.state.history


def run_strategy(state: ExperimentState) -> None:
    """Run every configured round in place on ``state``."""
    s = state.strategy
    if s.name == "fedmd":
        fedmd_transfer_learning(state)
        step = fedmd_round
    else:
        feddf_setup(state)
        step = feddf_round
    for rnd in range(1, s.rounds + 1):
        entry = step(state, rnd)
        log.info("round %d: mean accuracy %.4f", rnd, entry["accuracy"].get("mean", float("nan")))


def make_report(state: ExperimentState) -> dict[str, Any]:
    ledger = CostLedger.from_records(state.dispatcher.records, state.config.pricing)
    flagged = [h["round"] for h in state.history if h["flagged"]]
    extra = {
        "flagged_rounds": flagged,
        "pool": {
            "tasks": len(state.dispatcher.pool_records),
            "makespan_ms": state.info.get("transfer", {}).get("pool_makespan_ms", 0.0),
            "peak_instances": state.info.get("transfer", {}).get("pool_peak_instances", 0),
        },
        "time_model": state.dispatcher.time_model,
    }
    return build_report(ledger, state.history, state.strategy.name, extra, state.baseline)


def run_experiment(config: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Run ``config`` and write all artifacts; status 1 if any round was aborted."""
    out = Path(out_dir if out_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(config.dump())
    store = FileStore(out / "store") if config.faas.store == "file" else MemoryStore()
    state = setup_experiment(config, store)
    (out / "partition.csv").write_text(partition_csv(state))
    try:
        run_strategy(state)
    except StrategyError as exc:
        write_ledger_csv(state.dispatcher.records, out / "ledger.csv")
        write_ledger_csv(state.dispatcher.pool_records, out / "pool_ledger.csv")
        (out / "error.txt").write_text(f"{exc}\n")
        return ExperimentResult(1, out, state, error=str(exc))
    write_ledger_csv(state.dispatcher.records, out / "ledger.csv")
    write_ledger_csv(state.dispatcher.pool_records, out / "pool_ledger.csv")
    (out / "history.json").write_text(json.dumps(
        {"baseline": state.baseline, "rounds": state.history}, indent=2, sort_keys=True) + "\n")
    report = make_report(state)
    write_report(report, out)
    status = 1 if report["flagged_rounds"] else 0
    return ExperimentResult(status, out, state, report)


def partition_matrix(config: ExperimentConfig):
    catalog = build_catalog(config)
    labels = catalog["private"].labels
    plan = make_partition(config, labels)
    return plan.class_counts(labels, catalog["private"].num_classes), plan


def _matrix_csv(config: ExperimentConfig, counts) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["client", "architecture"] + [f"class_{k}" for k in range(counts.shape[1])] + ["total"])
    for (cid, arch), row in zip(client_ids(config), counts):
        writer.writerow([cid, arch, *row.tolist(), int(row.sum())])
    return buf.getvalue()


def partition_csv(state: ExperimentState) -> str:
    labels = state.catalog["private"].labels
    counts = state.partition.class_counts(labels, state.catalog["private"].num_classes)
    return _matrix_csv(state.config, counts)


def partition_preview(config: ExperimentConfig) -> str:
    """Client-by-class sample counts of the private partition, as CSV."""
    counts, _ = partition_matrix(config)
    return _matrix_csv(config, counts)
