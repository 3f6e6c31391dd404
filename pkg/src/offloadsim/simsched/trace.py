"""Trace records, metrics over them, and their text formats."""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field
from statistics import fmean
from typing import Iterable, Mapping, NamedTuple, Optional

TRACE_SCHEMA_VERSION = 1


class Resource(str, enum.Enum):
    GPU = "GpuCompute"
    CPU = "CpuCompute"
    D2H = "LinkD2H"
    H2D = "LinkH2D"
    NET = "Interconnect"


class Label(str, enum.Enum):
    FWD = "Fwd"
    BWD = "Bwd"
    MOVE_GRAD = "MoveGrad"
    STEP_CPU = "StepCpu"
    STEP_GPU = "StepGpu"
    MOVE_PARAM = "MoveParam"
    VALIDATE = "Validate"
    ROLLBACK = "Rollback"
    FETCH = "FetchWeight"
    GATHER = "AllGather"
    SCATTER = "ReduceScatter"
    A2A = "AllToAll"


@dataclass(frozen=True)
class Event:
    eid: int
    resource: Resource
    label: Label
    iteration: int
    bucket: Optional[int]
    start: float
    end: float
    deps: tuple[int, ...] = ()

    @property
    def duration(self) -> float:
        return self.end - self.start

    def record(self) -> dict:
        return {
            "record": "event",
            "eid": self.eid,
            "resource": self.resource.value,
            "label": self.label.value,
            "iteration": self.iteration,
            "bucket": self.bucket,
            "start": self.start,
            "end": self.end,
            "deps": list(self.deps),
        }


class Throughput(NamedTuple):
    iteration_time: float
    flops_per_s: float
    mfu: float


@dataclass(frozen=True)
class ScheduleTrace:
    events: tuple[Event, ...]
    iteration_boundaries: tuple[float, ...]
    meta: Mapping = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.iteration_boundaries) - 1

    @property
    def iteration_spans(self) -> list[float]:
        b = self.iteration_boundaries
        return [b[i + 1] - b[i] for i in range(len(b) - 1)]

    def steady_windows(self) -> list[tuple[float, float]]:
        b = self.iteration_boundaries
        windows = [(b[i], b[i + 1]) for i in range(len(b) - 1)]
        # the first iteration is warm-up whenever there is anything after it
        return windows[1:] if len(windows) > 1 else windows

    @property
    def mean_iteration_time(self) -> float:
        return fmean(hi - lo for lo, hi in self.steady_windows())

    def on(self, resource: Resource | str) -> list[Event]:
        res = Resource(resource)
        return [e for e in self.events if e.resource is res]

    def busy_time(self, resource: Resource | str) -> float:
        return sum(e.duration for e in self.on(resource))

    def summary(self) -> dict:
        out = {
            "record": "summary",
            "iteration_time": self.mean_iteration_time,
            "iteration_spans": self.iteration_spans,
            "idle": {r.value: idle_fraction(self, r) for r in Resource
                     if self.on(r) or r in (Resource.GPU, Resource.CPU)},
        }
        if "flops_per_iteration" in self.meta:
            tp = throughput_estimate(self)
            out["flops_per_s"] = tp.flops_per_s
            out["mfu"] = tp.mfu
        return out

    def to_jsonl(self) -> str:
        lines = [{"record": "meta", "schema_version": TRACE_SCHEMA_VERSION, **dict(self.meta),
                  "iteration_boundaries": list(self.iteration_boundaries)}]
        lines.extend(e.record() for e in self.events)
        lines.append(self.summary())
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["schema_version", "eid", "resource", "label", "iteration", "bucket",
                    "start", "end"])
        for e in self.events:
            w.writerow([TRACE_SCHEMA_VERSION, e.eid, e.resource.value, e.label.value,
                        e.iteration, "" if e.bucket is None else e.bucket,
                        repr(e.start), repr(e.end)])
        return buf.getvalue()

    @classmethod
    def from_jsonl(cls, text: str) -> "ScheduleTrace":
        meta: dict = {}
        bounds: tuple[float, ...] = ()
        events = []
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("record")
            if kind == "meta":
                rec.pop("schema_version", None)
                bounds = tuple(rec.pop("iteration_boundaries"))
                meta = rec
            elif kind == "event":
                events.append(Event(rec["eid"], Resource(rec["resource"]), Label(rec["label"]),
                                    rec["iteration"], rec["bucket"], rec["start"], rec["end"],
                                    tuple(rec["deps"])))
        return cls(tuple(events), bounds, meta)


def _overlap(e: Event, lo: float, hi: float) -> float:
    return max(0.0, min(e.end, hi) - max(e.start, lo))


def idle_fraction(trace: ScheduleTrace, resource: Resource | str = Resource.GPU) -> float:
    """Mean idle share of ``resource`` over the steady-state iterations."""
    events = trace.on(resource)
    fractions = []
    for lo, hi in trace.steady_windows():
        span = hi - lo
        if span <= 0:
            continue
        busy = sum(_overlap(e, lo, hi) for e in events)
        fractions.append(1.0 - min(busy, span) / span)
    if not fractions:
        return 0.0
    return fmean(fractions)


def throughput_estimate(trace: ScheduleTrace, model=None, workload=None) -> Throughput:
    """Model flop/s (6 flops per parameter per token) and MFU on theoretical peak.

    ``model``/``workload`` override the per-chip figures recorded in the trace.
    """
    if model is not None and workload is not None:
        tokens = workload.tokens / trace.meta.get("seq_shards", 1)
        flops = 6.0 * model.param_count * tokens
    else:
        flops = float(trace.meta["flops_per_iteration"])
    t = trace.mean_iteration_time
    rate = flops / t if t > 0 else float("inf")
    peak = float(trace.meta.get("gpu_peak_flops", 0.0))
    return Throughput(t, rate, rate / peak if peak > 0 else float("nan"))


def validate_trace(trace: ScheduleTrace) -> list[str]:
    """Every rule a well-formed trace obeys; returns the violations found."""
    problems = []
    by_id = {e.eid: e for e in trace.events}
    for e in trace.events:
        if e.end < e.start:
            problems.append(f"event {e.eid} ends before it starts")
        for d in e.deps:
            dep = by_id.get(d)
            if dep is not None and dep.end > e.start:
                problems.append(f"event {e.eid} ({e.label.value}) starts at {e.start} before "
                                f"dependency {d} ({dep.label.value}) ends at {dep.end}")
    for res in Resource:
        last = None
        for e in sorted(trace.on(res), key=lambda x: (x.start, x.end, x.eid)):
            if last is not None and e.start < last.end:
                problems.append(f"{res.value}: events {last.eid} and {e.eid} overlap")
            last = e
    chain: dict[tuple[int, int], dict[Label, Event]] = {}
    for e in trace.events:
        if e.bucket is not None and e.label in (Label.BWD, Label.MOVE_GRAD, Label.STEP_CPU,
                                                Label.MOVE_PARAM):
            chain.setdefault((e.iteration, e.bucket), {})[e.label] = e
    order = (Label.BWD, Label.MOVE_GRAD, Label.STEP_CPU, Label.MOVE_PARAM)
    for key, steps in chain.items():
        seen = [steps[lbl] for lbl in order if lbl in steps]
        for a, b in zip(seen, seen[1:]):
            if a.end > b.start:
                problems.append(f"bucket {key[1]} iteration {key[0]}: {a.label.value} "
                                f"must finish before {b.label.value}")
    return problems


def check_trace(trace: ScheduleTrace) -> ScheduleTrace:
    problems = validate_trace(trace)
    if problems:
        raise AssertionError("invalid trace:\n" + "\n".join(problems[:20]))
    return trace


def busy_by_label(events: Iterable[Event]) -> dict[str, float]:
    out: dict[str, float] = {}
    for e in events:
        out[e.label.value] = out.get(e.label.value, 0.0) + e.duration
    return out
