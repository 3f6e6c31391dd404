"""Sequence-length sweep: which placement fits, and how fast it runs."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

from offloadsim.errors import DomainError
from offloadsim.hwmodel import HardwareProfile
from offloadsim.memplan import ModelConfig, WeightPolicy, Workload, resolve_checkpointing
from offloadsim.partition import DEFAULT_BUCKET_BYTES, build_buckets, model_param_sizes
from offloadsim.simsched.schedules import (
    SLINGSHOT_BW,
    MultiChipConfig,
    Parallelism,
    ScheduleKind,
    simulate_multichip,
)
from offloadsim.simsched.trace import idle_fraction, throughput_estimate

DEFAULT_SEQS = tuple(1 << k for k in range(12, 21))


@dataclass(frozen=True)
class ScanRow:
    seq: int
    stationary_feasible: bool
    flow_feasible: bool
    policy: Optional[str]
    iteration_time: Optional[float]
    mfu: Optional[float]
    gpu_idle: Optional[float]

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ScanResult:
    rows: tuple[ScanRow, ...]

    def frontier(self, policy: WeightPolicy) -> int:
        attr = "stationary_feasible" if policy is WeightPolicy.STATIONARY else "flow_feasible"
        feasible = [r.seq for r in self.rows if getattr(r, attr)]
        return max(feasible, default=0)

    @property
    def frontier_ratio(self) -> float:
        st = self.frontier(WeightPolicy.STATIONARY)
        fl = self.frontier(WeightPolicy.FLOW)
        if st == 0:
            return float("inf") if fl else 0.0
        return fl / st


def _shard_kw(cfg: MultiChipConfig) -> dict:
    ulysses = cfg.parallelism is Parallelism.ULYSSES_SP
    return dict(optim_shards=cfg.chips, weight_shards=1 if ulysses else cfg.chips,
                seq_shards=cfg.chips if ulysses else 1)


def scan_sequence(model: ModelConfig, profile: HardwareProfile, seqs: Sequence[int] = DEFAULT_SEQS,
                  *, chips: int = 8, parallelism: Parallelism = Parallelism.ULYSSES_SP,
                  bsz: int = 1, interconnect_bw: float = SLINGSHOT_BW,
                  bucket_bytes: int = DEFAULT_BUCKET_BYTES,
                  run_simulation: bool = True) -> ScanResult:
    """Feasibility of both weight policies at each sequence length, plus a
    simulated speculative iteration for the policy that would be used."""
    if not seqs:
        raise DomainError("at least one sequence length is required")
    cfg = MultiChipConfig(chips, parallelism, interconnect_bw, profile)
    plan = build_buckets(model_param_sizes(model), bucket_bytes)
    kw = _shard_kw(cfg)
    rows = []
    for seq in sorted(set(int(s) for s in seqs)):
        w = Workload(bsz, seq)
        ok = {pol: resolve_checkpointing(model, w, pol, profile, **kw) is not None
              for pol in (WeightPolicy.STATIONARY, WeightPolicy.FLOW)}
        policy = next((p for p, fits in ok.items() if fits), None)
        t = mfu = idle = None
        if policy is not None and run_simulation:
            trace = simulate_multichip(cfg, ScheduleKind.super_stv(plan, policy=policy),
                                       model, w, profile, iterations=2)
            tp = throughput_estimate(trace)
            t, mfu, idle = tp.iteration_time, tp.mfu, idle_fraction(trace)
        rows.append(ScanRow(seq, ok[WeightPolicy.STATIONARY], ok[WeightPolicy.FLOW],
                            policy.value if policy else None, t, mfu, idle))
    return ScanResult(tuple(rows))
