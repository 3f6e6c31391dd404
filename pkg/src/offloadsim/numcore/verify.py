"""Equivalence suite: speculative training must match the synchronous oracle bit for bit."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

from offloadsim.numcore.model import SyntheticStream, TinyModel
from offloadsim.numcore.protocol import (
    FAULT_PATTERNS,
    Mode,
    Mutation,
    Scheduler,
    TrainingResult,
    element_plan,
    fault_pattern,
    run_training,
)
from offloadsim.numcore.state import AdamHyper

DEFAULT_SEEDS = tuple(range(10))
DEFAULT_STEPS = 200
DEFAULT_DIMS = (16, 64, 64, 4)
DEFAULT_BUCKET_ELEMS = 1024
DEFAULT_HYPER = AdamHyper(lr=1e-2, weight_decay=0.01, clip_norm=1.0)


@dataclass(frozen=True)
class RunOutcome:
    seed: int
    pattern: str
    scheduler: str
    ok: bool
    first_mismatch: Optional[int]
    rollbacks: int
    skips: int
    clips: int
    detail: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class VerifyReport:
    outcomes: list[RunOutcome] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(o.ok for o in self.outcomes)

    @property
    def failures(self) -> list[RunOutcome]:
        return [o for o in self.outcomes if not o.ok]


def compare(oracle: TrainingResult, stv: TrainingResult) -> tuple[Optional[int], str]:
    """First iteration at which the two runs differ, with a reason."""
    for i, (a, b) in enumerate(zip(oracle.digests, stv.digests)):
        if a != b:
            return i, "state digest differs"
        if oracle.reports[i].verdict is not stv.reports[i].verdict:
            return i, "verdict differs"
        if oracle.reports[i].t != stv.reports[i].t:
            return i, "step count differs"
    if len(oracle.digests) != len(stv.digests):
        return min(len(oracle.digests), len(stv.digests)), "run lengths differ"
    if not oracle.state.bitwise_equal(stv.state):
        return len(oracle.digests), "final state differs"
    return None, ""


def run_suite(
    seeds: Iterable[int] = DEFAULT_SEEDS,
    patterns: Sequence[str] = FAULT_PATTERNS,
    schedulers: Sequence[Scheduler | str] = (Scheduler.SERIALIZED, Scheduler.TWO_TASK),
    steps: int = DEFAULT_STEPS,
    *,
    dims: Sequence[int] = DEFAULT_DIMS,
    bucket_elems: int = DEFAULT_BUCKET_ELEMS,
    hyper: AdamHyper = DEFAULT_HYPER,
    mutation: Mutation = Mutation.NONE,
    progress=None,
) -> VerifyReport:
    model = TinyModel(tuple(dims))
    plan = element_plan(model.param_sizes, bucket_elems)
    report = VerifyReport()
    for seed in seeds:
        data = SyntheticStream(model, seed)
        for pattern in patterns:
            faults = fault_pattern(pattern, steps, seed)
            oracle = run_training(Mode.SYNC_ORACLE, model, data, steps, hyper, plan,
                                  seed=seed, faults=faults)
            for sched in schedulers:
                sched = Scheduler(sched)
                stv = run_training(Mode.STV, model, data, steps, hyper, plan, seed=seed,
                                   faults=faults, scheduler=sched, mutation=mutation)
                where, why = compare(oracle, stv)
                kinds = [r.verdict.value for r in stv.reports]
                outcome = RunOutcome(seed, pattern, sched.value, where is None, where,
                                     len(stv.rollback_log), kinds.count("SkipNonFinite"),
                                     kinds.count("Clip"), why)
                report.outcomes.append(outcome)
                if progress is not None:
                    progress(outcome)
    return report
