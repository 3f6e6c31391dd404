"""Bucketization of the flattened parameter space and GPU-resident repartitioning.

Bucket ids follow declaration order (bucket 0 holds the first parameters used
by the forward pass). Gradients materialize in reverse, so backward-creation
order is ``N-1, N-2, ..., 0`` and the last ``n`` buckets in that order, the
ones whose gradients arrive last, are ids ``0..n-1``.
"""

from __future__ import annotations

import bisect
import enum
import json
import math
import warnings
from dataclasses import dataclass, field
from itertools import accumulate
from pathlib import Path
from typing import NamedTuple, Sequence

from offloadsim.costs import BucketCosts, CostKnobs, bucket_times
from offloadsim.errors import ConfigError, DomainError
from offloadsim.hwmodel import HardwareProfile, saturation_bytes
from offloadsim.memplan import HALF_BYTES, ModelConfig, Workload

MIB = 1 << 20
ALIGNMENT_BYTES = 4
DEFAULT_BUCKET_BYTES = 64 * MIB
DEFAULT_BK_CANDIDATES = tuple(m * MIB for m in (16, 32, 64, 128, 256))
PLAN_FORMAT_VERSION = 1
# grid-search candidates this close to the best time count as equal
TIE_REL_TOL = 1e-3


class Residency(str, enum.Enum):
    GPU_RESIDENT = "GpuResident"
    CPU_OFFLOADED = "CpuOffloaded"


@dataclass(frozen=True)
class Bucket:
    bucket_id: int
    byte_start: int
    byte_end: int
    param_start: int
    param_end: int

    @property
    def nbytes(self) -> int:
        return self.byte_end - self.byte_start

    @property
    def byte_range(self) -> tuple[int, int]:
        return (self.byte_start, self.byte_end)

    @property
    def param_range(self) -> tuple[int, int]:
        return (self.param_start, self.param_end)


@dataclass(frozen=True)
class PartitionPlan:
    bucket_bytes: int
    buckets: tuple[Bucket, ...]
    gpu_resident_count: int = 0
    warning: str | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not self.buckets:
            raise DomainError("a plan needs at least one bucket")
        pos = 0
        for i, b in enumerate(self.buckets):
            if b.bucket_id != i or b.byte_start != pos or b.byte_end <= b.byte_start:
                raise DomainError(f"bucket {i} breaks the contiguous layout")
            if i < len(self.buckets) - 1 and b.nbytes != self.bucket_bytes:
                raise DomainError(f"bucket {i} is not exactly {self.bucket_bytes} bytes")
            if b.nbytes > self.bucket_bytes:
                raise DomainError(f"bucket {i} exceeds the bucket size")
            pos = b.byte_end
        if not 0 <= self.gpu_resident_count <= len(self.buckets):
            raise DomainError("gpu_resident_count out of range")

    @property
    def count(self) -> int:
        return len(self.buckets)

    @property
    def total_bytes(self) -> int:
        return self.buckets[-1].byte_end

    @property
    def backward_order(self) -> list[int]:
        return list(range(self.count - 1, -1, -1))

    def residency(self, bucket_id: int) -> Residency:
        if bucket_id < self.gpu_resident_count:
            return Residency.GPU_RESIDENT
        return Residency.CPU_OFFLOADED

    @property
    def residency_map(self) -> dict[int, Residency]:
        return {b.bucket_id: self.residency(b.bucket_id) for b in self.buckets}

    @property
    def resident_ids(self) -> list[int]:
        return list(range(self.gpu_resident_count))

    @property
    def offloaded_ids(self) -> list[int]:
        return list(range(self.gpu_resident_count, self.count))

    @property
    def resident_bytes(self) -> int:
        return sum(self.buckets[i].nbytes for i in self.resident_ids)

    def with_gpu_resident(self, n: int, warning: str | None = None) -> "PartitionPlan":
        return PartitionPlan(self.bucket_bytes, self.buckets, n, warning)

    def to_dict(self) -> dict:
        return {
            "format_version": PLAN_FORMAT_VERSION,
            "bucket_bytes": self.bucket_bytes,
            "gpu_resident_count": self.gpu_resident_count,
            "buckets": [
                {
                    "bucket_id": b.bucket_id,
                    "byte_range": list(b.byte_range),
                    "param_range": list(b.param_range),
                    "residency": self.residency(b.bucket_id).value,
                }
                for b in self.buckets
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PartitionPlan":
        try:
            if data.get("format_version", PLAN_FORMAT_VERSION) != PLAN_FORMAT_VERSION:
                raise ConfigError(f"unsupported plan format {data['format_version']}")
            buckets = tuple(
                Bucket(int(b["bucket_id"]), int(b["byte_range"][0]), int(b["byte_range"][1]),
                       int(b["param_range"][0]), int(b["param_range"][1]))
                for b in data["buckets"]
            )
            plan = cls(int(data["bucket_bytes"]), buckets, int(data["gpu_resident_count"]))
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise ConfigError(f"malformed plan: {exc}") from exc
        for b in data["buckets"]:
            if "residency" in b and Residency(b["residency"]) is not plan.residency(b["bucket_id"]):
                raise ConfigError(f"residency of bucket {b['bucket_id']} contradicts n")
        return plan

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PartitionPlan":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"plan file not found: {p}")
        try:
            return cls.from_dict(json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc


def build_buckets(param_sizes: Sequence[int], bk: int) -> PartitionPlan:
    """Greedily cut the flattened parameter bytes into ``bk``-byte buckets."""
    if not param_sizes:
        raise DomainError("param_sizes must be nonempty")
    if bk < ALIGNMENT_BYTES:
        raise DomainError(f"bucket size {bk} is below the {ALIGNMENT_BYTES}-byte alignment unit")
    if any(s < 0 for s in param_sizes):
        raise DomainError("parameter sizes must be nonnegative")
    bk = int(bk)
    ends = list(accumulate(int(s) for s in param_sizes))
    total = ends[-1]
    if total <= 0:
        raise DomainError("parameters have zero total size")
    buckets = []
    start = 0
    while start < total:
        end = min(start + bk, total)
        # first tensor whose byte span reaches past start, last one starting before end
        p0 = bisect.bisect_right(ends, start)
        p1 = bisect.bisect_left(ends, end) + 1
        buckets.append(Bucket(len(buckets), start, end, p0, p1))
        start = end
    return PartitionPlan(bk, tuple(buckets), 0)


def model_param_sizes(config: ModelConfig) -> list[int]:
    """Half-precision byte size of every tensor, in declaration order."""
    h = config.hidden
    sizes = [config.vocab * h]
    layer = [h, h, 3 * h * h, 3 * h, h * h, h, h, h, 4 * h * h, 4 * h, 4 * h * h, h]
    for _ in range(config.layers):
        sizes.extend(layer)
    return [HALF_BYTES * s for s in sizes]


class MinBuckets(NamedTuple):
    n: int
    fallback: bool


def satisfies_inequality(costs: BucketCosts, n: int) -> bool:
    return costs.offload_chain <= n * costs.gpu_cover_per_bucket


def min_gpu_buckets(costs: BucketCosts, bucket_count: int) -> MinBuckets:
    """Smallest n whose GPU work hides one bucket's offload round trip."""
    if bucket_count < 1:
        raise DomainError("bucket_count must be at least 1")
    lhs = costs.offload_chain
    per = costs.gpu_cover_per_bucket
    if lhs <= 0:
        return MinBuckets(0, False)
    if per <= 0 or lhs > bucket_count * per:
        return MinBuckets(bucket_count, True)
    n = min(bucket_count, max(0, math.ceil(lhs / per)))
    # ceil on a float quotient can be off by one either way
    while n > 0 and satisfies_inequality(costs, n - 1):
        n -= 1
    while n < bucket_count and not satisfies_inequality(costs, n):
        n += 1
    return MinBuckets(n, False)


def plan_costs(
    plan_bk: int,
    model: ModelConfig,
    workload: Workload,
    profile: HardwareProfile,
    knobs: CostKnobs = CostKnobs(),
) -> BucketCosts:
    ckpt = bool(workload.checkpointing)
    return bucket_times(plan_bk, workload.tokens, profile, knobs, checkpointing=ckpt).costs()


def repartition(
    plan: PartitionPlan,
    model: ModelConfig,
    workload: Workload,
    profile: HardwareProfile,
    knobs: CostKnobs = CostKnobs(),
) -> PartitionPlan:
    """Return ``plan`` with n chosen by the bucket inequality."""
    bk = min(plan.bucket_bytes, plan.total_bytes)
    n, fallback = min_gpu_buckets(plan_costs(bk, model, workload, profile, knobs), plan.count)
    note = None
    if fallback:
        note = "bucket inequality unsatisfiable; all optimizer state kept on GPU"
        warnings.warn(note, RuntimeWarning, stacklevel=2)
    return plan.with_gpu_resident(n, note)


@dataclass(frozen=True)
class CandidateResult:
    bucket_bytes: int
    gpu_resident_count: int
    iteration_time: float
    min_gpu_resident: int = 0


def max_resident_buckets(plan: PartitionPlan, model: ModelConfig, workload: Workload,
                         profile: HardwareProfile) -> int:
    """Most buckets whose optimizer state still fits on the GPU next to the rest."""
    from offloadsim.memplan import WeightPolicy, resolve_checkpointing

    def fits(n: int) -> bool:
        resident = sum(b.nbytes for b in plan.buckets[:n]) / HALF_BYTES
        return resolve_checkpointing(model, workload, WeightPolicy.STATIONARY, profile,
                                     resident_params=resident) is not None

    if not fits(0):
        return plan.count
    lo, hi = 0, plan.count
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid - 1
    return lo


def _search_resident(time_of, lo: int, hi: int) -> int:
    """Integer minimizer of a unimodal ``time_of`` on [lo, hi], smallest on ties."""
    cache: dict[int, float] = {}

    def t(n: int) -> float:
        if n not in cache:
            cache[n] = time_of(n)
        return cache[n]

    a, b = lo, hi
    while b - a > 4:
        m1 = a + (b - a) // 3
        m2 = b - (b - a) // 3
        if t(m1) <= t(m2):
            b = m2
        else:
            a = m1
    return min(range(a, b + 1), key=lambda n: (t(n), n))


def evaluate_candidates(
    model: ModelConfig,
    workload: Workload,
    profile: HardwareProfile,
    bk_candidates: Sequence[int] = DEFAULT_BK_CANDIDATES,
    knobs: CostKnobs = CostKnobs(),
    *,
    search_resident: bool = True,
    iterations: int = 2,
) -> list[tuple[CandidateResult, PartitionPlan]]:
    """Simulate every candidate bucket size under the speculative schedule.

    For each size the number of GPU-resident buckets starts at the minimum
    that satisfies the bucket inequality; with ``search_resident`` it is then
    grown while that shortens the simulated iteration and memory allows.
    """
    from offloadsim.simsched import ScheduleKind, simulate

    if not bk_candidates:
        raise DomainError("bk_candidates must be nonempty")
    sizes = model_param_sizes(model)
    out = []
    for bk in sorted(set(int(b) for b in bk_candidates)):
        base = build_buckets(sizes, bk)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            first = repartition(base, model, workload, profile, knobs)
        n0 = first.gpu_resident_count

        def time_of(n: int) -> float:
            kind = ScheduleKind.super_stv(base.with_gpu_resident(n), knobs=knobs)
            return simulate(kind, model, workload, profile, iterations=iterations) \
                .mean_iteration_time

        n = n0
        if search_resident:
            hi = max(n0, min(base.count, max_resident_buckets(base, model, workload, profile)))
            n = _search_resident(time_of, n0, hi)
        plan = base.with_gpu_resident(n, first.warning)
        out.append((CandidateResult(bk, n, time_of(n), n0), plan))
    return out


def grid_search_plan(
    model: ModelConfig,
    workload: Workload | tuple[int, int],
    profile: HardwareProfile,
    bk_candidates: Sequence[int] = DEFAULT_BK_CANDIDATES,
    knobs: CostKnobs = CostKnobs(),
    *,
    search_resident: bool = True,
    tie_rel_tol: float = TIE_REL_TOL,
) -> PartitionPlan:
    """Pick the (bk, n) pair with the shortest simulated iteration.

    Candidates within ``tie_rel_tol`` of the best time are treated as equal.
    Among those, the smallest bucket that moves at the link's saturated
    bandwidth wins (less memory per resident bucket, shorter tail); if none
    saturates the link, the largest does. Remaining ties go to fewer
    GPU-resident buckets, so the result does not depend on evaluation order.
    """
    if not isinstance(workload, Workload):
        workload = Workload(*workload)
    if tie_rel_tol < 0:
        raise DomainError("tie_rel_tol must be nonnegative")
    results = evaluate_candidates(model, workload, profile, bk_candidates, knobs,
                                  search_resident=search_resident)
    best_time = min(r.iteration_time for r, _ in results)
    tied = [r for r in results if r[0].iteration_time <= best_time * (1 + tie_rel_tol)]
    sat = saturation_bytes(profile)
    saturated = [r for r in tied if r[0].bucket_bytes >= sat]
    if saturated:
        key = lambda r: (r[0].bucket_bytes, r[0].gpu_resident_count, r[0].iteration_time)
    else:
        saturated = tied
        key = lambda r: (-r[0].bucket_bytes, r[0].gpu_resident_count, r[0].iteration_time)
    return min(saturated, key=key)[1]
