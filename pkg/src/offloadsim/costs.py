"""Per-bucket timings derived from a hardware profile.

Everything the simulator schedules is priced here so the planner, the
simulator and the ablation harness agree on the same numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

from offloadsim.hwmodel import (
    CastStrategy,
    HardwareProfile,
    adam_seconds,
    cpu_cast_seconds,
    transfer_time,
)

# Rollback restores and re-steps one shard; measured at ~2 s for a 175B model
# split over 16 CPUs and assumed linear in the shard's parameter count.
ROLLBACK_SECONDS_REF = 2.0
ROLLBACK_PARAMS_REF = 175e9 / 16
NORM_FLOPS_PER_PARAM = 2


@dataclass(frozen=True)
class BucketCosts:
    """Inputs to the repartitioning inequality for one full-size bucket."""

    move_grad: float
    step_cpu: float
    move_param: float
    bwd_per_bucket: float
    step_gpu_per_bucket: float

    def __post_init__(self) -> None:
        for name in ("move_grad", "step_cpu", "move_param", "bwd_per_bucket",
                     "step_gpu_per_bucket"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def offload_chain(self) -> float:
        return self.move_grad + self.step_cpu + self.move_param

    @property
    def gpu_cover_per_bucket(self) -> float:
        return self.bwd_per_bucket + self.step_gpu_per_bucket


@dataclass(frozen=True)
class BucketTimes:
    """Every task duration the simulator needs for one bucket."""

    fwd: float
    bwd: float
    move_grad: float
    step_cpu: float
    move_param: float
    step_gpu: float
    fetch: float = 0.0       # fp16 weight fetch under weight-flow
    gather: float = 0.0      # parameter all-gather (sharded runs)
    scatter: float = 0.0     # gradient reduce-scatter (sharded runs)
    a2a: float = 0.0         # attention all-to-all (sequence parallel runs)

    def costs(self) -> BucketCosts:
        return BucketCosts(self.move_grad, self.step_cpu, self.move_param,
                           self.bwd, self.step_gpu)


@dataclass(frozen=True)
class CostKnobs:
    """Implementation choices that change prices but not the schedule."""

    cast: CastStrategy = CastStrategy.CAST_ON_GPU_MOVE_FULL
    adam_slowdown: float = 1.0


def bucket_times(
    nbytes: float,
    tokens: float,
    profile: HardwareProfile,
    knobs: CostKnobs = CostKnobs(),
    *,
    checkpointing: bool = False,
    shards: int = 1,
    interconnect_bw: float | None = None,
    a2a_bytes: float = 0.0,
) -> BucketTimes:
    """Durations for a bucket of ``nbytes`` fp16 parameter bytes.

    ``tokens`` is the number of tokens this chip processes per iteration and
    ``shards`` the number of chips the optimizer state is partitioned over.
    """
    params = nbytes / 2
    ach = profile.gpu_achievable_flops
    fwd = 2 * tokens * params / ach
    bwd = 4 * tokens * params / ach
    if checkpointing:
        bwd += fwd
    shard = params / shards
    if knobs.cast is CastStrategy.CAST_ON_GPU_MOVE_FULL:
        move = transfer_time(profile, 4 * shard)
        cast_cpu = 0.0
    else:
        move = transfer_time(profile, 2 * shard, penalty=profile.unpinned_penalty)
        cast_cpu = 2 * cpu_cast_seconds(profile, shard)
    step_cpu = adam_seconds(profile, shard, "cpu", knobs.adam_slowdown) + cast_cpu
    step_gpu = adam_seconds(profile, shard, "gpu")
    gather = scatter = a2a = 0.0
    if shards > 1:
        bw = interconnect_bw or profile.link_peak_bw
        ring = (shards - 1) / shards
        gather = 2 * params * ring / bw
        scatter = 2 * params * ring / bw
        a2a = a2a_bytes * ring / bw
    return BucketTimes(
        fwd=fwd,
        bwd=bwd,
        move_grad=move,
        step_cpu=step_cpu,
        move_param=move,
        step_gpu=step_gpu,
        fetch=transfer_time(profile, 2 * shard),
        gather=gather,
        scatter=scatter,
        a2a=a2a,
    )


def validate_seconds(profile: HardwareProfile, params: float) -> float:
    return NORM_FLOPS_PER_PARAM * params / profile.cpu_peak_flops


def rollback_seconds(params: float) -> float:
    return ROLLBACK_SECONDS_REF * params / ROLLBACK_PARAMS_REF
