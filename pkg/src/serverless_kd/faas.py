"""Stateless, time-limited function invocations on a simulated FaaS platform.

Handlers are called as ``handler(payload, ctx)``. ``ctx`` exposes the
parameter store, the read-only dataset catalog and the timing helpers; that
is all an invocation can see. A handler given as a class is instantiated
afresh for every invocation, and payloads/results are deep-copied, so no
state survives between invocations.

Every invocation runs on its own host thread, at most ``max_in_flight`` at
a time. The platform clock that stamps :class:`InvocationRecord` objects
depends on the time model:

``"cpu"`` (default)
    An invocation lasts as long as the CPU time its thread consumed, plus any
    simulated padding from ``ctx.sleep``. Invocations are placed on
    ``max_in_flight`` platform slots in submission order, so every function
    instance behaves as if it had its own vCPUs regardless of how many host
    cores exist.
``"wall"``
    Host wall-clock time; ``ctx.sleep`` really sleeps.
``"modeled"``
    Fully deterministic: duration is the padding plus whatever the handler
    declared through ``ctx.charge``.
"""

from __future__ import annotations

import copy
import csv
import heapq
import itertools
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass
from typing import Any, Callable, Mapping, Sequence

DEFAULT_TIMEOUT_S = 900.0
TIME_MODELS = ("cpu", "wall", "modeled")
STEPS = ("train", "communicate", "aggregate", "digest", "revisit", "evaluate", "distill", "transfer")
LEDGER_COLUMNS = (
    "invocation_id",
    "function",
    "step",
    "round",
    "start_ms",
    "end_ms",
    "duration_ms",
    "outcome",
    "memory_gib",
)


class HandlerError(RuntimeError):
    pass


class Timeout(RuntimeError):
    pass


class _Abort(BaseException):
    """Raised inside a handler to stop it at its deadline."""


@dataclass(frozen=True)
class FunctionSpec:
    name: str
    handler: Callable[..., Any]
    memory_gib: float = 2.0
    vcpus: float = 1.0
    timeout_s: float = DEFAULT_TIMEOUT_S

    def __post_init__(self):
        if not (self.memory_gib > 0 and self.vcpus > 0 and self.timeout_s > 0):
            raise ValueError("memory_gib, vcpus and timeout_s must be positive")


@dataclass(frozen=True)
class PoolConfig:
    max_instances: int = 8
    scale_to_zero: bool = True
    per_instance_slots: int = 1

    def __post_init__(self):
        if self.max_instances < 1 or self.per_instance_slots < 1:
            raise ValueError("max_instances and per_instance_slots must be >= 1")


@dataclass(frozen=True)
class InvocationRecord:
    invocation_id: str
    function: str
    step: str
    round: int
    start_ms: float
    end_ms: float
    duration_ms: float
    outcome: str
    memory_gib: float
    vcpus: float = 1.0
    host_start_ms: float = 0.0
    host_end_ms: float = 0.0
    error: str = ""

    def as_row(self) -> dict[str, Any]:
        row = asdict(self)
        return {k: row[k] for k in LEDGER_COLUMNS}


@dataclass(frozen=True)
class Call:
    spec: FunctionSpec
    payload: Any = None
    step: str = "train"
    round: int = 0

    def __post_init__(self):
        if self.step not in STEPS:
            raise ValueError(f"unknown step label {self.step!r}")


@dataclass
class PoolResult:
    results: list[Any]
    records: list[InvocationRecord]
    trace: list[tuple[float, int]]
    makespan_ms: float

    @property
    def peak_instances(self) -> int:
        return max((n for _, n in self.trace), default=0)


class InvocationContext:
    def __init__(self, store, data: Mapping[str, Any], time_model: str, timeout_ms: float | None,
                 function: str, invocation_id: str, vcpus: float = 1.0):
        self.store = store
        self.vcpus = vcpus
        self.data = data
        self.function = function
        self.invocation_id = invocation_id
        self._model = time_model
        self._timeout_ms = timeout_ms
        self._t0_wall = time.perf_counter()
        self._t0_cpu = time.thread_time()
        self.padding_ms = 0.0
        self.charged_ms = 0.0
        self.cancelled = threading.Event()

    def elapsed_ms(self) -> float:
        if self._model == "wall":
            return (time.perf_counter() - self._t0_wall) * 1e3
        if self._model == "cpu":
            return (time.thread_time() - self._t0_cpu) * 1e3 + self.padding_ms
        return self.padding_ms + self.charged_ms

    def check(self) -> None:
        """Abort the handler if it was cancelled or ran past its deadline."""
        if self.cancelled.is_set():
            raise _Abort()
        if self._timeout_ms is not None and self.elapsed_ms() > self._timeout_ms:
            raise _Abort()

    def sleep(self, ms: float) -> None:
        """Simulated work of ``ms`` milliseconds (real sleep under the wall model)."""
        ms = float(ms)
        if ms < 0:
            raise ValueError("sleep duration must be nonnegative")
        self.check()
        budget = math.inf if self._timeout_ms is None else self._timeout_ms - self.elapsed_ms()
        overrun = ms > budget
        ms = min(ms, max(budget, 0.0))
        if self._model == "wall":
            self.cancelled.wait(ms / 1e3)
        else:
            self.padding_ms += ms
        if overrun:
            raise _Abort()
        self.check()

    def charge(self, ms: float) -> None:
        """Declare modeled compute time; only the ``modeled`` time model counts it."""
        if ms < 0:
            raise ValueError("charge must be nonnegative")
        if self._model == "modeled":
            self.charged_ms += float(ms)
            self.check()


@dataclass
class _Slot:
    index: int
    call: Call
    ctx: InvocationContext
    host_start: float
    guard: float | None
    done: bool = False
    outcome: tuple | None = None


class Dispatcher:
    """Bounded-concurrency executor for stateless invocations and long-task pools."""

    def __init__(self, store=None, data: Mapping[str, Any] | None = None, *, max_in_flight: int = 8,
                 time_model: str = "cpu", ledger: list | None = None):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if time_model not in TIME_MODELS:
            raise ValueError(f"time_model must be one of {TIME_MODELS}")
        self.store = store
        self.data = data or {}
        self.max_in_flight = max_in_flight
        self.time_model = time_model
        self.clock_ms = 0.0
        self._epoch = time.perf_counter()
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self._ledger: list[InvocationRecord] = ledger if ledger is not None else []
        self.pool_records: list[InvocationRecord] = []

    # -- public API -----------------------------------------------------

    @property
    def records(self) -> list[InvocationRecord]:
        with self._lock:
            return list(self._ledger)

    def invoke(self, spec: FunctionSpec, payload: Any = None, *, step: str = "train", round: int = 0):
        return self.invoke_all([Call(spec, payload, step, round)], max_in_flight=1)[0]

    def invoke_all(self, calls: Sequence[Call], max_in_flight: int | None = None) -> list[tuple[Any, InvocationRecord]]:
        """Run all calls and wait for every one of them (a round barrier).

        Results come back in submission order as ``(result, record)``; failed
        or timed-out invocations yield ``None`` as the result.
        """
        limit = self.max_in_flight if max_in_flight is None else max_in_flight
        if limit < 1:
            raise ValueError("max_in_flight must be >= 1")
        out = self._run(list(calls), limit, enforce_timeout=True)
        with self._lock:
            self._ledger.extend(rec for _, rec in out)
        return out

    def pool_run(self, tasks: Sequence[Call], config: PoolConfig) -> PoolResult:
        """Run long tasks without time limits on an autoscaled instance pool."""
        start = self.clock_ms
        capacity = config.max_instances * config.per_instance_slots
        out = self._run(list(tasks), capacity, enforce_timeout=False, prefix="pool:")
        records = [rec for _, rec in out]
        with self._lock:
            self.pool_records.extend(records)
        trace = _instance_trace(records, start, config)
        return PoolResult([r for r, _ in out], records, trace, self.clock_ms - start)

    def export_ledger(self, path) -> None:
        write_ledger_csv(self.records, path)

    # -- internals ------------------------------------------------------

    def _next_id(self) -> str:
        with self._lock:
            return f"inv-{next(self._ids):06d}"

    def _worker(self, slot: _Slot, done: queue.Queue) -> None:
        spec, ctx = slot.call.spec, slot.ctx
        result, status, error = None, "ok", ""
        t0 = time.thread_time()
        try:
            payload = copy.deepcopy(slot.call.payload)
            handler = spec.handler
            if isinstance(handler, type):
                handler = handler()
            ctx._t0_cpu = time.thread_time()
            ctx._t0_wall = time.perf_counter()
            result = copy.deepcopy(handler(payload, ctx))
        except _Abort:
            status = "timeout"
        except Exception as exc:  # noqa: BLE001 - recorded, never propagated
            status, error = "error", f"{type(exc).__name__}: {exc}"
        cpu_ms = (time.thread_time() - t0) * 1e3
        done.put((slot.index, (result, status, error, cpu_ms, time.perf_counter())))

    def _run(self, calls: list[Call], limit: int, enforce_timeout: bool, prefix: str = ""):
        if not calls:
            return []
        done: queue.Queue = queue.Queue()
        slots: dict[int, _Slot] = {}
        finished: dict[int, tuple] = {}
        pending = iter(range(len(calls)))
        next_index = next(pending, None)
        while next_index is not None or slots:
            while next_index is not None and len(slots) < limit:
                call = calls[next_index]
                timeout_ms = call.spec.timeout_s * 1e3 if enforce_timeout else None
                ctx = InvocationContext(self.store, self.data, self.time_model, timeout_ms,
                                        call.spec.name, self._next_id(), call.spec.vcpus)
                guard = None
                if enforce_timeout:
                    # host-side backstop for handlers that never yield; under the cpu model
                    # a thread gets at least 1/limit of the host, so this bounds CPU time too
                    scale = 1.0 if self.time_model == "wall" else float(limit) * 2.0
                    guard = time.perf_counter() + call.spec.timeout_s * scale + 0.05
                slot = _Slot(next_index, call, ctx, time.perf_counter(), guard)
                slots[next_index] = slot
                threading.Thread(target=self._worker, args=(slot, done), daemon=True).start()
                next_index = next(pending, None)
            deadlines = [s.guard for s in slots.values() if s.guard is not None]
            wait = None if not deadlines else max(0.0, min(deadlines) - time.perf_counter())
            try:
                index, outcome = done.get(timeout=wait)
            except queue.Empty:
                now = time.perf_counter()
                for index, slot in list(slots.items()):
                    if slot.guard is not None and now >= slot.guard:
                        slot.ctx.cancelled.set()
                        finished[index] = (slot, (None, "timeout", "abandoned", math.inf, now))
                        del slots[index]
                continue
            slot = slots.pop(index, None)
            if slot is not None:  # None when already abandoned
                finished[index] = (slot, outcome)
        return self._stamp(calls, finished, limit, prefix)

    def _duration(self, slot: _Slot, outcome) -> float:
        _, _, _, cpu_ms, host_end = outcome
        if self.time_model == "wall":
            return (host_end - slot.host_start) * 1e3
        if self.time_model == "cpu":
            return cpu_ms + slot.ctx.padding_ms
        return slot.ctx.padding_ms + slot.ctx.charged_ms

    def _stamp(self, calls, finished, limit, prefix):
        free = [self.clock_ms] * limit
        heapq.heapify(free)
        out = []
        batch_end = self.clock_ms
        for index, call in enumerate(calls):
            slot, outcome = finished[index]
            result, status, error, _, host_end = outcome
            duration = self._duration(slot, outcome)
            timeout_ms = call.spec.timeout_s * 1e3
            if not prefix and (status == "timeout" or duration > timeout_ms):
                status, result, duration = "timeout", None, timeout_ms
            if status != "ok":
                result = None
            if self.time_model == "wall":
                start = (slot.host_start - self._epoch) * 1e3
            else:
                start = heapq.heappop(free)
                heapq.heappush(free, start + duration)
            end = start + duration
            batch_end = max(batch_end, end)
            record = InvocationRecord(
                invocation_id=slot.ctx.invocation_id,
                function=prefix + call.spec.name,
                step=call.step,
                round=call.round,
                start_ms=start,
                end_ms=end,
                duration_ms=duration,
                outcome=status,
                memory_gib=call.spec.memory_gib,
                vcpus=call.spec.vcpus,
                host_start_ms=(slot.host_start - self._epoch) * 1e3,
                host_end_ms=(host_end - self._epoch) * 1e3,
                error=error,
            )
            out.append((result, record))
        if self.time_model == "wall":
            batch_end = max(batch_end, (time.perf_counter() - self._epoch) * 1e3)
        self.clock_ms = batch_end
        return out


def _instance_trace(records: list[InvocationRecord], start: float, config: PoolConfig) -> list[tuple[float, int]]:
    events = sorted([(r.end_ms, 0) for r in records] + [(r.start_ms, 1) for r in records])
    running = 0
    instances = 0
    trace = [(start, 0)]
    for t, kind in events:
        running += 1 if kind else -1
        needed = math.ceil(running / config.per_instance_slots)
        target = needed if config.scale_to_zero else max(instances, needed)
        if target != instances:
            instances = target
            if trace and trace[-1][0] == t:
                trace[-1] = (t, instances)
            else:
                trace.append((t, instances))
    return trace


def peak_concurrency(records: Sequence[InvocationRecord], host: bool = False) -> int:
    """Largest number of simultaneously running invocations in the records."""
    a, b = ("host_start_ms", "host_end_ms") if host else ("start_ms", "end_ms")
    events = sorted([(getattr(r, b), 0) for r in records] + [(getattr(r, a), 1) for r in records])
    running = peak = 0
    for _, kind in events:
        running += 1 if kind else -1
        peak = max(peak, running)
    return peak


def write_ledger_csv(records: Sequence[InvocationRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LEDGER_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for rec in records:
            row = rec.as_row()
            for k in ("start_ms", "end_ms", "duration_ms"):
                row[k] = f"{row[k]:.3f}"
            writer.writerow(row)


def read_ledger_csv(path) -> list[InvocationRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        out.append(
            InvocationRecord(
                invocation_id=row["invocation_id"],
                function=row["function"],
                step=row["step"],
                round=int(row["round"]),
                start_ms=float(row["start_ms"]),
                end_ms=float(row["end_ms"]),
                duration_ms=float(row["duration_ms"]),
                outcome=row["outcome"],
                memory_gib=float(row["memory_gib"]),
            )
        )
    return out
