"""Cumulative on/off ladder over the four optimizations."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Optional

from offloadsim.costs import CostKnobs
from offloadsim.errors import ConfigError
from offloadsim.hwmodel import CastStrategy, HardwareProfile, choose_cast_strategy
from offloadsim.memplan import ModelConfig, Workload
from offloadsim.partition import (
    DEFAULT_BK_CANDIDATES,
    DEFAULT_BUCKET_BYTES,
    build_buckets,
    grid_search_plan,
    model_param_sizes,
)
from offloadsim.simsched.schedules import Schedule, ScheduleKind, simulate
from offloadsim.simsched.trace import ScheduleTrace, throughput_estimate


class Toggle(str, enum.Enum):
    GRACE_ADAM = "GraceAdamSpeed"
    CAST_OPT = "CastOpt"
    STV = "STV"
    BUCKET_REPART = "BucketRepart"

    @classmethod
    def parse(cls, value: str) -> "Toggle":
        for t in cls:
            if value.strip().lower() in (t.value.lower(), t.name.lower()):
                return t
        raise ConfigError(f"unknown toggle {value!r}; expected one of "
                          + ", ".join(t.value for t in cls))


TOGGLE_ORDER = (Toggle.GRACE_ADAM, Toggle.CAST_OPT, Toggle.STV, Toggle.BUCKET_REPART)


@dataclass(frozen=True)
class AblationStep:
    toggles: frozenset[Toggle]
    iteration_time: float
    flops_per_s: float
    mfu: float

    def label(self) -> str:
        on = [t.value for t in TOGGLE_ORDER if t in self.toggles]
        return "+".join(on) if on else "baseline"


def configure(toggles: Iterable[Toggle], model: ModelConfig, workload: Workload,
              profile: HardwareProfile,
              bucket_bytes: int = DEFAULT_BUCKET_BYTES) -> ScheduleKind:
    """The simulator knobs an enabled-toggle set stands for.

    GraceAdamSpeed off: the CPU step runs at the profile's baseline slowdown.
    CastOpt off: casts always happen on the CPU and half-width tensors move.
    STV off: the synchronous schedule with its global barriers.
    BucketRepart off: no bucket keeps optimizer state on the GPU.
    """
    on = frozenset(toggles)
    slowdown = 1.0 if Toggle.GRACE_ADAM in on else profile.baseline_adam_slowdown
    if Toggle.CAST_OPT in on:
        cast = choose_cast_strategy(2 * bucket_bytes, profile)
    else:
        cast = CastStrategy.CAST_ON_CPU_MOVE_HALF
    knobs = CostKnobs(cast, slowdown)
    if Toggle.BUCKET_REPART in on:
        plan = grid_search_plan(model, workload, profile, DEFAULT_BK_CANDIDATES, knobs)
    else:
        plan = build_buckets(model_param_sizes(model), bucket_bytes)
    schedule = Schedule.SUPER_STV if Toggle.STV in on else Schedule.BASELINE_STE
    return ScheduleKind(schedule, plan, knobs=knobs)


def run_config(toggles: Iterable[Toggle], model: ModelConfig, workload: Workload,
               profile: HardwareProfile) -> ScheduleTrace:
    return simulate(configure(toggles, model, workload, profile), model, workload, profile)


def ablation_run(model: ModelConfig, workload: Workload | tuple[int, int],
                 profile: HardwareProfile,
                 toggles: Optional[Iterable[Toggle | str]] = None) -> list[AblationStep]:
    """Throughput with the given toggles enabled one at a time, in canonical order.

    The first entry has everything off; entry k has the first k toggles on.
    """
    if not isinstance(workload, Workload):
        workload = Workload(*workload)
    chosen = set(TOGGLE_ORDER if toggles is None else
                 (t if isinstance(t, Toggle) else Toggle.parse(t) for t in toggles))
    ladder = [t for t in TOGGLE_ORDER if t in chosen]
    steps = []
    for k in range(len(ladder) + 1):
        on = frozenset(ladder[:k])
        tp = throughput_estimate(run_config(on, model, workload, profile))
        steps.append(AblationStep(on, tp.iteration_time, tp.flops_per_s, tp.mfu))
    return steps
