"""Pay-per-use cost accounting over invocation records and report emission.

Cost of one invocation::

    price_per_invocation
    + memory_gib * billed_s * price_per_gb_second
    + vcpus * ghz_per_vcpu * billed_s * price_per_ghz_second

where ``billed_s`` is the raw duration rounded up to the billing
granularity, with a minimum charge.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .faas import InvocationRecord

STEP_ORDER = ("transfer", "communicate", "aggregate", "digest", "revisit", "evaluate", "train", "distill")
# FedDF evaluations run inside the aggregator functions
FEDDF_COLUMNS = {"train": "clients", "distill": "aggregators", "evaluate": "aggregators"}


class IncompleteHistory(ValueError):
    pass


@dataclass(frozen=True)
class PricingConfig:
    price_per_invocation: float = 4.0e-7
    price_per_gb_second: float = 2.5e-6
    price_per_ghz_second: float = 1.0e-5
    ghz_per_vcpu: float = 2.4
    billing_granularity_ms: int = 100
    minimum_billed_ms: int = 100

    def __post_init__(self):
        values = asdict(self).values()
        if any(v < 0 for v in values) or self.billing_granularity_ms < 1:
            raise ValueError("pricing values must be nonnegative and granularity >= 1")


def billed_duration(raw_ms: float, pricing: PricingConfig) -> int:
    if raw_ms < 0:
        raise ValueError("duration must be nonnegative")
    g = pricing.billing_granularity_ms
    return max(pricing.minimum_billed_ms, math.ceil(raw_ms / g) * g)


def invocation_cost(record: InvocationRecord, memory_gib: float, vcpus: float, pricing: PricingConfig) -> float:
    seconds = billed_duration(record.duration_ms, pricing) / 1000.0
    return (
        pricing.price_per_invocation
        + memory_gib * seconds * pricing.price_per_gb_second
        + vcpus * pricing.ghz_per_vcpu * seconds * pricing.price_per_ghz_second
    )


@dataclass(frozen=True)
class CostEntry:
    record: InvocationRecord
    billed_ms: int
    cost_usd: float


@dataclass
class CostLedger:
    pricing: PricingConfig = field(default_factory=PricingConfig)
    entries: list[CostEntry] = field(default_factory=list)

    def add(self, record: InvocationRecord, vcpus: float | None = None) -> CostEntry:
        vcpus = record.vcpus if vcpus is None else vcpus
        entry = CostEntry(
            record,
            billed_duration(record.duration_ms, self.pricing),
            invocation_cost(record, record.memory_gib, vcpus, self.pricing),
        )
        self.entries.append(entry)
        return entry

    @classmethod
    def from_records(cls, records: Sequence[InvocationRecord], pricing: PricingConfig | None = None,
                     vcpus_by_function: Mapping[str, float] | None = None) -> CostLedger:
        ledger = cls(pricing or PricingConfig())
        for rec in records:
            vcpus = None if vcpus_by_function is None else vcpus_by_function.get(rec.function, rec.vcpus)
            ledger.add(rec, vcpus)
        return ledger

    @property
    def total(self) -> float:
        return math.fsum(e.cost_usd for e in self.entries)

    def totals_by(self, attr: str) -> dict[str, float]:
        groups: dict[str, list[float]] = {}
        for e in self.entries:
            groups.setdefault(getattr(e.record, attr), []).append(e.cost_usd)
        return {k: math.fsum(v) for k, v in sorted(groups.items())}

    def cost_in_round(self, round: int, step: str | None = None) -> float:
        return math.fsum(
            e.cost_usd for e in self.entries if e.record.round == round and (step is None or e.record.step == step)
        )


# ---------------------------------------------------------------------------
# reports


def _step_columns(entries: Sequence[CostEntry]) -> list[str]:
    present = {e.record.step for e in entries}
    return [s for s in STEP_ORDER if s in present]


def step_table(ledger: CostLedger, strategy: str | None = None) -> dict[str, Any]:
    """Per-step duration and cost columns plus an ``overall`` column summing them."""
    cols = _step_columns(ledger.entries)
    if strategy == "feddf":
        labels = {s: FEDDF_COLUMNS.get(s, s) for s in cols}
        order = [c for c in ("clients", "aggregators") if c in labels.values()]
        order += [s for s in cols if labels[s] not in order]
    else:
        labels = {s: s for s in cols}
        order = cols
    duration: dict[str, float] = {}
    cost: dict[str, float] = {}
    for label in order:
        rows = [e for e in ledger.entries if labels[e.record.step] == label]
        duration[label] = math.fsum(e.record.duration_ms for e in rows) / 60000.0
        cost[label] = math.fsum(e.cost_usd for e in rows)
    duration["overall"] = math.fsum(duration.values())
    cost["overall"] = math.fsum(cost.values())
    return {"duration_min": duration, "cost_usd": cost}


def _check_history(records: Sequence[InvocationRecord], history: Sequence[Mapping[str, Any]]) -> None:
    rounds = [h["round"] for h in history]
    if rounds != list(range(1, len(rounds) + 1)):
        raise IncompleteHistory(f"history rounds must run 1..n without gaps, got {rounds}")
    last = rounds[-1] if rounds else 0
    late = sorted({r.round for r in records if r.round > last})
    if late:
        raise IncompleteHistory(f"ledger has invocations for rounds {late} missing from the history")
    for h in history:
        if any(v < 0 for v in h.get("step_durations_ms", {}).values()):
            raise IncompleteHistory(f"negative step duration in round {h['round']}")


def build_report(ledger: CostLedger, history: Sequence[Mapping[str, Any]], strategy: str | None = None,
                 extra: Mapping[str, Any] | None = None,
                 baseline: Mapping[str, float] | None = None) -> dict[str, Any]:
    """Report mapping; ``baseline`` adds round-0 accuracy rows (state before round 1)."""
    records = [e.record for e in ledger.entries]
    _check_history(records, history)
    timings = []
    accuracy = [
        {"round": 0, "architecture": arch, "top1_accuracy": acc} for arch, acc in sorted((baseline or {}).items())
    ]
    for h in history:
        for step, ms in h.get("step_durations_ms", {}).items():
            timings.append({"round": h["round"], "step": step, "duration_ms": ms})
        timings.append({"round": h["round"], "step": "round_total", "duration_ms": h.get("round_duration_ms", 0.0)})
        for arch, acc in sorted(h.get("accuracy", {}).items()):
            accuracy.append({"round": h["round"], "architecture": arch, "top1_accuracy": acc})
    per_round = []
    for h in history:
        rnd = h["round"]
        per_round.append({"round": rnd, "cost_usd": ledger.cost_in_round(rnd)})
    report = {
        "strategy": strategy,
        "invocations": len(records),
        "total_cost_usd": ledger.total,
        "steps": step_table(ledger, strategy),
        "cost_by_function": ledger.totals_by("function"),
        "cost_by_round": per_round,
        "timings": timings,
        "accuracy": accuracy,
        "failures": [
            {"invocation_id": r.invocation_id, "function": r.function, "step": r.step, "round": r.round,
             "outcome": r.outcome}
            for r in records
            if r.outcome != "ok"
        ],
        "pricing": asdict(ledger.pricing),
    }
    if extra:
        report.update(extra)
    return report


def _csv(rows: Sequence[Mapping[str, Any]], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.12g}" if isinstance(v, float) else v) for k, v in row.items() if k in columns})
    return buf.getvalue()


def costs_csv(report: Mapping[str, Any]) -> str:
    steps = report["steps"]
    rows = [
        {"step": col, "duration_min": steps["duration_min"][col], "cost_usd": steps["cost_usd"][col]}
        for col in steps["cost_usd"]
    ]
    return _csv(rows, ("step", "duration_min", "cost_usd"))


def timings_csv(report: Mapping[str, Any]) -> str:
    return _csv(report["timings"], ("round", "step", "duration_ms"))


def accuracy_csv(report: Mapping[str, Any]) -> str:
    return _csv(report["accuracy"], ("round", "architecture", "top1_accuracy"))


REPORT_FILES = ("report.json", "costs.csv", "timings.csv", "accuracy.csv")


def write_report(report: Mapping[str, Any], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    contents = {
        "report.json": json.dumps(report, indent=2, sort_keys=True) + "\n",
        "costs.csv": costs_csv(report),
        "timings.csv": timings_csv(report),
        "accuracy.csv": accuracy_csv(report),
    }
    paths = []
    for name in REPORT_FILES:
        path = out / name
        path.write_text(contents[name])
        paths.append(path)
    return paths


def write_plots(report: Mapping[str, Any], out_dir) -> list[Path]:
    """Accuracy-vs-round and step-duration-vs-round PNGs. Needs matplotlib."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    paths = []
    fig, ax = plt.subplots(figsize=(5, 3.5))
    archs = sorted({row["architecture"] for row in report["accuracy"]})
    for arch in archs:
        rows = [r for r in report["accuracy"] if r["architecture"] == arch]
        ax.plot([r["round"] for r in rows], [r["top1_accuracy"] for r in rows], marker="o", label=arch)
    ax.set_xlabel("round")
    ax.set_ylabel("top-1 accuracy")
    if archs:
        ax.legend(fontsize="small")
    fig.tight_layout()
    paths.append(out / "accuracy.png")
    fig.savefig(paths[-1])
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    steps = sorted({row["step"] for row in report["timings"]})
    for step in steps:
        rows = [r for r in report["timings"] if r["step"] == step]
        ax.plot([r["round"] for r in rows], [r["duration_ms"] / 1000 for r in rows], marker=".", label=step)
    ax.set_xlabel("round")
    ax.set_ylabel("duration (s)")
    if steps:
        ax.legend(fontsize="small")
    fig.tight_layout()
    paths.append(out / "timings.png")
    fig.savefig(paths[-1])
    plt.close(fig)
    return paths


def aggregate_reports(reports: Mapping[str, Mapping[str, Any]]) -> dict[str, Any]:
    """Per-run step tables side by side plus their sum (e.g. across alpha levels)."""
    per_run = {name: r["steps"] for name, r in sorted(reports.items())}
    summed: dict[str, dict[str, float]] = {"duration_min": {}, "cost_usd": {}}
    for steps in per_run.values():
        for metric in summed:
            for col, v in steps[metric].items():
                summed[metric][col] = summed[metric].get(col, 0.0) + v
    return {"runs": per_run, "sum": summed}

