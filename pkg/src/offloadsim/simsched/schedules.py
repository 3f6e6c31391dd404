"""Task graphs for the synchronous and speculative offload schedules."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

from offloadsim.costs import (
    BucketTimes,
    CostKnobs,
    bucket_times,
    rollback_seconds,
    validate_seconds,
)
from offloadsim.errors import ConfigError, DomainError, InfeasibleError
from offloadsim.hwmodel import HardwareProfile
from offloadsim.memplan import (
    ModelConfig,
    WeightPolicy,
    Workload,
    check_placement,
)
from offloadsim.partition import PartitionPlan
from offloadsim.simsched.engine import Engine
from offloadsim.simsched.trace import Label, Resource, ScheduleTrace

DEFAULT_ITERATIONS = 3
SLINGSHOT_BW = 200e9 / 8
A2A_TENSORS = 4  # q, k, v and the attention output are exchanged per layer


class Schedule(str, enum.Enum):
    BASELINE_STE = "BaselineSTE"
    SUPER_STV = "SuperSTV"

    @classmethod
    def parse(cls, value: str) -> "Schedule":
        key = value.strip().lower()
        for s in cls:
            if key in (s.value.lower(), s.name.lower(), s.value[-3:].lower()):
                return s
        raise ConfigError(f"unknown schedule {value!r}; expected ste or stv")


class Parallelism(str, enum.Enum):
    ZERO3 = "ZeRO3"
    ULYSSES_SP = "UlyssesSP"


@dataclass(frozen=True)
class ScheduleKind:
    """A schedule plus everything attached to it.

    ``policy`` None means: weight-stationary when it fits, weight-flow otherwise.
    """

    schedule: Schedule
    plan: PartitionPlan
    policy: Optional[WeightPolicy] = WeightPolicy.STATIONARY
    knobs: CostKnobs = CostKnobs()
    rollback_iterations: frozenset[int] = field(default_factory=frozenset)

    @classmethod
    def baseline_ste(cls, plan: PartitionPlan, **kw) -> "ScheduleKind":
        return cls(Schedule.BASELINE_STE, plan, **kw)

    @classmethod
    def super_stv(cls, plan: PartitionPlan, **kw) -> "ScheduleKind":
        return cls(Schedule.SUPER_STV, plan, **kw)

    @property
    def speculative(self) -> bool:
        return self.schedule is Schedule.SUPER_STV


@dataclass(frozen=True)
class MultiChipConfig:
    chips: int = 1
    parallelism: Parallelism = Parallelism.ZERO3
    interconnect_bw: float = SLINGSHOT_BW
    profile: Optional[HardwareProfile] = None

    def __post_init__(self) -> None:
        if self.chips < 1:
            raise DomainError("chips must be at least 1")
        if self.interconnect_bw <= 0:
            raise DomainError("interconnect_bw must be positive")


@dataclass(frozen=True)
class GraphSpec:
    """Everything the graph builder needs, already priced."""

    schedule: Schedule
    policy: WeightPolicy
    times: Sequence[BucketTimes]
    gpu_resident: int
    validate: float = 0.0
    rollback: float = 0.0
    rollback_iterations: frozenset[int] = frozenset()
    sharded: bool = False
    sequence_parallel: bool = False


def build_graph(spec: GraphSpec, iterations: int) -> Engine:
    """Emit tasks for ``iterations`` iterations plus one trailing iteration whose
    first forward marks the end of the last measured one."""
    eng = Engine()
    N = len(spec.times)
    n = spec.gpu_resident
    if not 0 <= n <= N:
        raise DomainError("gpu_resident out of range")
    T = spec.times
    ste = spec.schedule is Schedule.BASELINE_STE
    flow = spec.policy is WeightPolicy.FLOW
    offloaded = list(range(n, N))
    bwd_order = list(range(N - 1, -1, -1))

    # handles from the previous iteration
    param_ready: dict[int, int] = {}   # bucket -> task producing its updated weights
    cpu_done: dict[int, int] = {}      # bucket -> StepCpu task
    barrier: list[int] = []            # synchronous schedule: everything of i-1
    gate: Optional[int] = None         # speculative schedule: verdict of i-1

    for it in range(iterations + 1):
        fwd: dict[int, int] = {}
        bwd: dict[int, int] = {}
        prev_fwd: Optional[int] = None
        for j in range(N):
            deps = [prev_fwd] + (barrier if ste else [])
            if flow and j >= n:
                # two weight buffers: bucket j reuses the one bucket j-2 computed from
                fdeps = [cpu_done.get(j), fwd.get(j - 2)] + (barrier if ste else [])
                src = eng.add(Resource.H2D, Label.FETCH, it, j, T[j].fetch, fdeps)
            else:
                src = param_ready.get(j)
            if spec.sharded:
                src = eng.add(Resource.NET, Label.GATHER, it, j, T[j].gather, [src])
            if spec.sequence_parallel and T[j].a2a > 0:
                deps.append(eng.add(Resource.NET, Label.A2A, it, j, T[j].a2a, [prev_fwd]))
            deps.append(src)
            fwd[j] = prev_fwd = eng.add(Resource.GPU, Label.FWD, it, j, T[j].fwd, deps)
        if it == iterations:
            break

        prev_bwd: Optional[int] = None
        grads: dict[int, int] = {}
        for j in bwd_order:
            deps = [prev_bwd]
            if j == N - 1 and not ste:
                deps.append(gate)
            if flow and j >= n:
                after = bwd.get(j + 2, fwd[j])
                deps.append(eng.add(Resource.H2D, Label.FETCH, it, j, T[j].fetch, [after]))
            if spec.sequence_parallel and T[j].a2a > 0:
                deps.append(eng.add(Resource.NET, Label.A2A, it, j, T[j].a2a, [prev_bwd]))
            bwd[j] = prev_bwd = eng.add(Resource.GPU, Label.BWD, it, j, T[j].bwd, deps)
            grads[j] = bwd[j]
            if spec.sharded:
                grads[j] = eng.add(Resource.NET, Label.SCATTER, it, j, T[j].scatter, [bwd[j]])
        move_grad = {}
        for j in bwd_order:
            if j >= n:
                move_grad[j] = eng.add(Resource.D2H, Label.MOVE_GRAD, it, j, T[j].move_grad,
                                       [grads[j]])
        all_grads = move_grad[n] if n < N else None
        # the global norm needs every gradient, including the GPU-resident ones
        sync = [all_grads, grads[0]]

        new_ready: dict[int, int] = {}
        new_cpu: dict[int, int] = {}
        for j in bwd_order:
            if j < n:
                deps = [bwd[0]] + (sync if ste else [grads[j]])
                new_ready[j] = eng.add(Resource.GPU, Label.STEP_GPU, it, j, T[j].step_gpu, deps)
        for j in bwd_order:
            if j >= n:
                deps = [move_grad[j]] + (sync if ste else [])
                new_cpu[j] = eng.add(Resource.CPU, Label.STEP_CPU, it, j, T[j].step_cpu, deps)
        if not flow:
            for j in bwd_order:
                if j >= n:
                    new_ready[j] = eng.add(Resource.H2D, Label.MOVE_PARAM, it, j,
                                           T[j].move_param, [new_cpu[j]])
        if ste:
            # each resource runs in order, so its last task stands for all of them
            tails = [new_ready.get(0) if n else None, new_ready.get(n), new_cpu.get(n)]
            barrier = [t for t in tails if t is not None] or [bwd[0]]
        else:
            last_cpu = new_cpu[n] if n < N else None
            gate = eng.add(Resource.CPU, Label.VALIDATE, it, None, spec.validate,
                           [bwd[0], last_cpu] + ([grads[0]] if spec.sharded else []))
            if it in spec.rollback_iterations:
                gate = eng.add(Resource.CPU, Label.ROLLBACK, it, None, spec.rollback, [gate])
        for j in offloaded:
            param_ready[j] = new_ready.get(j, new_cpu[j])
        for j in range(n):
            param_ready[j] = new_ready[j]
        cpu_done = new_cpu
    return eng


def run_graph(spec: GraphSpec, iterations: int = DEFAULT_ITERATIONS,
              meta: Optional[dict] = None) -> ScheduleTrace:
    if iterations < 1:
        raise DomainError("iterations must be at least 1")
    events = build_graph(spec, iterations).run()
    first_fwd = {}
    for e in events:
        if e.label is Label.FWD and e.iteration not in first_fwd:
            first_fwd[e.iteration] = e.start
    bounds = tuple(first_fwd[i] for i in range(iterations + 1))
    kept = tuple(sorted((e for e in events if e.iteration < iterations),
                        key=lambda e: (e.start, e.eid)))
    info = {"schedule": spec.schedule.value, "policy": spec.policy.value,
            "buckets": len(spec.times), "gpu_resident": spec.gpu_resident}
    info.update(meta or {})
    return ScheduleTrace(kept, bounds, info)


def uniform_times(count: int, **durations: float) -> list[BucketTimes]:
    """``count`` identical buckets, handy for closed-form comparisons."""
    base = dict(fwd=0.0, bwd=0.0, move_grad=0.0, step_cpu=0.0, move_param=0.0, step_gpu=0.0)
    base.update(durations)
    return [BucketTimes(**base)] * count


# ---------------------------------------------------------------------------
# model-level entry points


def _resolve_policy(kind: ScheduleKind, model: ModelConfig, workload: Workload,
                    profile: HardwareProfile, **shard_kw) -> tuple[WeightPolicy, bool]:
    resident = kind.plan.resident_bytes / 2
    candidates = [kind.policy] if kind.policy is not None else [WeightPolicy.STATIONARY,
                                                                  WeightPolicy.FLOW]
    last_err: Optional[InfeasibleError] = None
    for policy in candidates:
        try:
            ckpt = check_placement(model, workload, policy, profile,
                                   resident_params=resident, **shard_kw)
            return policy, ckpt
        except InfeasibleError as exc:
            last_err = exc
    assert last_err is not None
    raise last_err


def simulate_multichip(cfg: MultiChipConfig, kind: ScheduleKind, model: ModelConfig,
                       workload: Workload | tuple[int, int],
                       profile: Optional[HardwareProfile] = None,
                       iterations: int = DEFAULT_ITERATIONS) -> ScheduleTrace:
    """Per-chip timeline of one chip among ``cfg.chips`` identical ones.

    ZeRO3: optimizer state, gradients and fp16 weights are sharded 1/K; each
    bucket is all-gathered before its forward and reduce-scattered after its
    backward, 2 bytes/param each scaled by the ring factor (K-1)/K.
    UlyssesSP: the sequence is split 1/K and every layer exchanges q, k, v and
    the attention output by all-to-all in both passes; optimizer state is
    sharded as in ZeRO3 while weights stay whole on every chip.
    """
    profile = profile or cfg.profile
    if profile is None:
        raise ConfigError("a hardware profile is required")
    if not isinstance(workload, Workload):
        workload = Workload(*workload)
    plan = kind.plan
    psi = model.param_count
    if plan.total_bytes != 2 * psi:
        raise ConfigError(f"plan covers {plan.total_bytes} bytes but {model.name} has "
                          f"{2 * psi} bytes of fp16 parameters")
    K = cfg.chips
    ulysses = cfg.parallelism is Parallelism.ULYSSES_SP
    seq_shards = K if ulysses else 1
    shard_kw = dict(optim_shards=K, weight_shards=1 if ulysses else K, seq_shards=seq_shards)
    policy, ckpt = _resolve_policy(kind, model, workload, profile, **shard_kw)
    tokens = workload.tokens / seq_shards
    a2a_per_param = 0.0
    if ulysses and K > 1:
        per_layer = A2A_TENSORS * tokens * model.hidden * 2
        a2a_per_param = per_layer / model.layer_params
    times = [
        bucket_times(b.nbytes, tokens, profile, kind.knobs, checkpointing=ckpt, shards=K,
                     interconnect_bw=cfg.interconnect_bw,
                     a2a_bytes=a2a_per_param * b.nbytes / 2)
        for b in plan.buckets
    ]
    spec = GraphSpec(
        schedule=kind.schedule,
        policy=policy,
        times=times,
        gpu_resident=plan.gpu_resident_count,
        validate=validate_seconds(profile, psi / K),
        rollback=rollback_seconds(psi / K),
        rollback_iterations=frozenset(kind.rollback_iterations),
        sharded=K > 1,
        sequence_parallel=ulysses and K > 1,
    )
    meta = {
        "model": model.name,
        "params": psi,
        "bsz": workload.bsz,
        "seq": workload.seq,
        "checkpointing": ckpt,
        "profile": profile.name,
        "chips": K,
        "parallelism": cfg.parallelism.value,
        "seq_shards": seq_shards,
        "bucket_bytes": plan.bucket_bytes,
        "cast": kind.knobs.cast.value,
        "adam_slowdown": kind.knobs.adam_slowdown,
        "flops_per_iteration": 6.0 * psi * tokens,
        "gpu_peak_flops": profile.gpu_peak_flops,
    }
    return run_graph(spec, iterations, meta)


def simulate(kind: ScheduleKind, model: ModelConfig, workload: Workload | tuple[int, int],
             profile: HardwareProfile, iterations: int = DEFAULT_ITERATIONS) -> ScheduleTrace:
    """Single-chip timeline."""
    return simulate_multichip(MultiChipConfig(1), kind, model, workload, profile, iterations)
