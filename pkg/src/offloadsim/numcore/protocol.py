"""Synchronous and speculative optimizer protocols, and the training loop
that drives either under a serialized or a two-task scheduler."""

from __future__ import annotations

import enum
import json
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from offloadsim.errors import ConfigError, DomainError
from offloadsim.numcore.adam import DEFAULT_TILE_ELEMS, adam_step_bucket
from offloadsim.numcore.model import Batch, SyntheticStream, TinyModel
from offloadsim.numcore.state import (
    WORKING_DTYPE,
    AdamHyper,
    BucketSnapshot,
    IterationReport,
    LossScalePolicy,
    TrainState,
    ValidationVerdict,
    VerdictKind,
)
from offloadsim.numcore.validation import unscale, validate
from offloadsim.partition import PartitionPlan, build_buckets

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class Mode(str, enum.Enum):
    SYNC_ORACLE = "SyncOracle"
    STV = "STV"


class Scheduler(str, enum.Enum):
    SERIALIZED = "serialized"
    TWO_TASK = "two-task"


class Mutation(str, enum.Enum):
    """Deliberate bugs for checking that the equivalence suite can fail."""

    NONE = "none"
    SKIP_MOMENT2_RESTORE = "skip-moment2-restore"
    KEEP_STEP_ON_SKIP = "keep-step-on-skip"


# ---------------------------------------------------------------------------
# buckets over a flat vector


def element_plan(param_sizes: Sequence[int], bucket_elems: int) -> PartitionPlan:
    """Bucket plan over half-precision elements (2 bytes each)."""
    if bucket_elems < 2:
        raise DomainError("bucket_elems must be at least 2")
    return build_buckets([2 * s for s in param_sizes], 2 * bucket_elems)


def element_ranges(plan: PartitionPlan) -> list[tuple[int, int]]:
    out = []
    for b in plan.buckets:
        if b.byte_start % 2 or b.byte_end % 2:
            raise DomainError("bucket boundaries must fall on element boundaries")
        out.append((b.byte_start // 2, b.byte_end // 2))
    return out


def _split(g: np.ndarray, ranges: Sequence[tuple[int, int]]) -> list[np.ndarray]:
    return [g[lo:hi] for lo, hi in ranges]


def clip_grads(g: np.ndarray, coef: float) -> np.ndarray:
    return (g * np.float32(coef)).astype(np.float32)


# ---------------------------------------------------------------------------
# one iteration of each protocol


def _step_all(state: TrainState, g: np.ndarray, ranges, hyper, tile: int) -> None:
    t = state.t + 1
    for lo, hi in reversed(ranges):
        adam_step_bucket(state, g[lo:hi], lo, hi, hyper, t, tile)


def _finish(state: TrainState, verdict: ValidationVerdict, policy: LossScalePolicy) -> None:
    skipped = verdict.kind is VerdictKind.SKIP_NON_FINITE
    if not skipped:
        state.t += 1
    state.loss_scale, state.clean_steps = policy.update(state.loss_scale, state.clean_steps,
                                                        skipped)
    state.refresh_working()


def sync_iteration(state: TrainState, scaled_grads: np.ndarray, plan: PartitionPlan,
                   hyper: AdamHyper, policy: LossScalePolicy = LossScalePolicy(),
                   tile_elems: int = DEFAULT_TILE_ELEMS) -> ValidationVerdict:
    """Validate first, then step with whatever the verdict allows."""
    ranges = element_ranges(plan)
    verdict = validate(_split(scaled_grads, ranges), hyper, state.loss_scale)
    if verdict.kind is not VerdictKind.SKIP_NON_FINITE:
        g = unscale(scaled_grads, state.loss_scale)
        if verdict.kind is VerdictKind.CLIP:
            g = clip_grads(g, verdict.coef)
        _step_all(state, g, ranges, hyper, tile_elems)
    _finish(state, verdict, policy)
    return verdict


class _Speculation:
    """Speculative per-bucket steps whose verdict arrives later."""

    def __init__(self, state: TrainState, scaled_grads: np.ndarray, plan: PartitionPlan,
                 hyper: AdamHyper, tile_elems: int, mutation: Mutation) -> None:
        self.state = state
        self.hyper = hyper
        self.tile = tile_elems
        self.mutation = mutation
        self.ranges = element_ranges(plan)
        self.scale = state.loss_scale
        self.scaled = scaled_grads
        self.snapshots: list[BucketSnapshot] = []

    def speculate(self) -> None:
        g = unscale(self.scaled, self.scale)
        t = self.state.t + 1
        with np.errstate(all="ignore"):
            for bid in range(len(self.ranges) - 1, -1, -1):
                lo, hi = self.ranges[bid]
                self.snapshots.append(BucketSnapshot.take(self.state, bid, lo, hi))
                adam_step_bucket(self.state, g[lo:hi], lo, hi, self.hyper, t, self.tile)
        # what the next forward would read if the speculation holds
        self.state.refresh_working()

    def _restore(self) -> None:
        for snap in self.snapshots:
            if self.mutation is Mutation.SKIP_MOMENT2_RESTORE:
                v = self.state.v[snap.lo:snap.hi].copy()
                snap.restore(self.state)
                self.state.v[snap.lo:snap.hi] = v
            else:
                snap.restore(self.state)
        self.snapshots.clear()

    def resolve(self, verdict: ValidationVerdict, policy: LossScalePolicy) -> int:
        """Apply the verdict; returns the number of rollbacks performed."""
        if verdict.kind is VerdictKind.PROCEED:
            self.snapshots.clear()
            _finish(self.state, verdict, policy)
            return 0
        self._restore()
        if verdict.kind is VerdictKind.CLIP:
            g = clip_grads(unscale(self.scaled, self.scale), verdict.coef)
            _step_all(self.state, g, self.ranges, self.hyper, self.tile)
        elif self.mutation is Mutation.KEEP_STEP_ON_SKIP:
            self.state.t += 1
        _finish(self.state, verdict, policy)
        return 1


def stv_iteration(state: TrainState, scaled_grads: np.ndarray, plan: PartitionPlan,
                  hyper: AdamHyper, policy: LossScalePolicy = LossScalePolicy(),
                  tile_elems: int = DEFAULT_TILE_ELEMS,
                  mutation: Mutation = Mutation.NONE) -> tuple[ValidationVerdict, int]:
    """Step every bucket speculatively, then validate and roll back if needed."""
    spec = _Speculation(state, scaled_grads, plan, hyper, tile_elems, mutation)
    spec.speculate()
    verdict = validate(_split(scaled_grads, spec.ranges), hyper, spec.scale)
    return verdict, spec.resolve(verdict, policy)


# ---------------------------------------------------------------------------
# fault injection


@dataclass(frozen=True)
class Fault:
    kind: str           # "nan" or "scale"
    k: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("nan", "scale"):
            raise ConfigError(f"unknown fault kind {self.kind!r}")

    def apply(self, g: np.ndarray, iteration: int) -> None:
        if self.kind == "nan":
            g[(iteration * 7919) % g.size] = np.nan
        else:
            g *= np.float32(self.k)


@dataclass(frozen=True)
class FaultSpec:
    """Iteration index -> fault, applied to the gradients after they reach
    full precision on the host."""

    faults: Mapping[int, Fault] = field(default_factory=dict)

    def at(self, iteration: int) -> Optional[Fault]:
        return self.faults.get(iteration)

    @classmethod
    def from_mapping(cls, data: Mapping) -> "FaultSpec":
        faults = {}
        for key, val in data.items():
            try:
                it = int(key)
            except ValueError:
                raise ConfigError(f"fault key {key!r} is not an iteration index") from None
            if val == "nan":
                faults[it] = Fault("nan")
            elif isinstance(val, Mapping) and "scale" in val:
                faults[it] = Fault("scale", float(val["scale"]))
            else:
                raise ConfigError(f"fault at iteration {it}: expected 'nan' or {{scale = k}}")
        return cls(faults)

    @classmethod
    def load(cls, path: str | Path) -> "FaultSpec":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"fault file not found: {p}")
        try:
            if p.suffix == ".json":
                data = json.loads(p.read_text())
            else:
                data = tomllib.loads(p.read_text())
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        return cls.from_mapping(data.get("faults", data))


FAULT_PATTERNS = ("clean", "nan", "clip")
CLIP_FAULT_SCALE = 1000.0


def fault_pattern(name: str, steps: int, seed: int = 0, count: int = 5) -> FaultSpec:
    """``count`` faults of one kind at seeded iterations (none for "clean")."""
    if name == "clean" or steps <= 0:
        if name not in FAULT_PATTERNS:
            raise ConfigError(f"unknown fault pattern {name!r}")
        return FaultSpec()
    if name not in FAULT_PATTERNS:
        raise ConfigError(f"unknown fault pattern {name!r}")
    rng = np.random.default_rng([seed, 99])
    its = sorted(int(i) for i in rng.choice(steps, size=min(count, steps), replace=False))
    fault = Fault("nan") if name == "nan" else Fault("scale", CLIP_FAULT_SCALE)
    return FaultSpec({i: fault for i in its})


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainingResult:
    state: TrainState
    reports: list[IterationReport]
    digests: list[str]

    @property
    def verdict_log(self) -> list[tuple[int, str]]:
        return [(r.iteration, r.verdict.value) for r in self.reports
                if r.verdict is not VerdictKind.PROCEED]

    @property
    def rollback_log(self) -> list[int]:
        return [r.iteration for r in self.reports if r.rollbacks]

    @property
    def t_history(self) -> list[int]:
        return [r.t for r in self.reports]

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.reports]


class _ValidatorTask:
    """Validation on its own thread, one request and one reply in flight."""

    def __init__(self, hyper: AdamHyper) -> None:
        self.hyper = hyper
        self.requests: queue.Queue = queue.Queue(maxsize=1)
        self.replies: queue.Queue = queue.Queue(maxsize=1)
        self.thread = threading.Thread(target=self._loop, name="validator", daemon=True)
        self.thread.start()

    def _loop(self) -> None:
        while True:
            job = self.requests.get()
            if job is None:
                return
            buckets, scale = job
            try:
                self.replies.put(validate(buckets, self.hyper, scale))
            except BaseException as exc:  # surface errors on the consumer side
                self.replies.put(exc)

    def submit(self, buckets: list[np.ndarray], scale: float) -> None:
        self.requests.put((buckets, scale))

    def verdict(self) -> ValidationVerdict:
        out = self.replies.get()
        if isinstance(out, BaseException):
            raise out
        return out

    def close(self) -> None:
        self.requests.put(None)
        self.thread.join()


def host_gradients(model: TinyModel, state: TrainState, batch: Batch,
                   cached: Optional[tuple[float, list]] = None) -> tuple[np.ndarray, float]:
    """Loss-scaled gradients as they arrive on the host: computed from the
    half-precision weights, scaled, stored in half precision, widened."""
    params = state.working.astype(np.float32)
    if cached is None:
        loss, acts = model.forward(params, batch)
    else:
        loss, acts = cached
    g = model.backward(params, batch, acts)
    with np.errstate(over="ignore", invalid="ignore"):
        scaled = (g * np.float32(state.loss_scale)).astype(WORKING_DTYPE).astype(np.float32)
    return scaled, loss


def run_training(
    mode: Mode | str,
    model: TinyModel,
    data: SyntheticStream,
    steps: int,
    hyper: AdamHyper,
    plan: PartitionPlan,
    *,
    seed: int = 0,
    faults: FaultSpec = FaultSpec(),
    scheduler: Scheduler | str = Scheduler.SERIALIZED,
    policy: LossScalePolicy = LossScalePolicy(),
    tile_elems: int = DEFAULT_TILE_ELEMS,
    mutation: Mutation = Mutation.NONE,
    init: Optional[TrainState] = None,
    on_iteration: Optional[Callable[[IterationReport], None]] = None,
) -> TrainingResult:
    """Train ``steps`` iterations and record a digest of the state after each.

    Under the two-task scheduler, STV hands validation to a second thread and
    runs the next forward pass on the speculative weights while it waits; a
    rollback discards that forward pass.
    """
    mode = Mode(mode)
    scheduler = Scheduler(scheduler)
    if steps < 0:
        raise DomainError("steps must be nonnegative")
    state = init.copy() if init is not None else TrainState.fresh(model.init_params(seed),
                                                                  policy.initial)
    if plan.total_bytes != 2 * state.size:
        raise DomainError(f"plan covers {plan.total_bytes // 2} elements, state has {state.size}")
    ranges = element_ranges(plan)
    reports: list[IterationReport] = []
    digests: list[str] = []
    validator = _ValidatorTask(hyper) if (scheduler is Scheduler.TWO_TASK
                                          and mode is Mode.STV) else None
    cached = None
    try:
        for i in range(steps):
            batch = data.batch(i)
            scaled, loss = host_gradients(model, state, batch, cached)
            cached = None
            fault = faults.at(i)
            if fault is not None:
                fault.apply(scaled, i)
            rollbacks = 0
            if mode is Mode.SYNC_ORACLE:
                verdict = sync_iteration(state, scaled, plan, hyper, policy, tile_elems)
            elif validator is None:
                verdict, rollbacks = stv_iteration(state, scaled, plan, hyper, policy,
                                                   tile_elems, mutation)
            else:
                spec = _Speculation(state, scaled, plan, hyper, tile_elems, mutation)
                validator.submit(_split(scaled, ranges), spec.scale)
                spec.speculate()
                ahead = None
                if i + 1 < steps:
                    nxt = data.batch(i + 1)
                    ahead = model.forward(state.working.astype(np.float32), nxt)
                verdict = validator.verdict()
                rollbacks = spec.resolve(verdict, policy)
                if rollbacks == 0:
                    cached = ahead
            report = IterationReport(i, verdict.kind, rollbacks, state.t, state.loss_scale,
                                     loss, verdict.norm)
            reports.append(report)
            digests.append(state.digest())
            if on_iteration is not None:
                on_iteration(report)
    finally:
        if validator is not None:
            validator.close()
    return TrainingResult(state, reports, digests)
