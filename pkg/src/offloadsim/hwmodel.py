"""Hardware profiles and the cost primitives every planner builds on.

A :class:`HardwareProfile` describes one GPU/CPU pair joined by a single
link. Profiles are loaded from TOML files (see ``docs/profile_format.md``);
the package ships ``gh200``, ``dgx-a100`` and ``dgx-2``.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from offloadsim.errors import ConfigError, DomainError

PROFILE_PATH_ENV = "OFFLOADSIM_PROFILE_PATH"

# Bytes of optimizer-side memory traffic per parameter for one Adam update:
# read master/m/v/grad (4 x fp32), write master/m/v (3 x fp32), write fp16 copy.
ADAM_BYTES_PER_PARAM = 30
# Arithmetic per parameter for one Adam update (moments, bias correction,
# sqrt, divide, decay, update).
ADAM_FLOPS_PER_PARAM = 12
# Bytes touched per element when casting fp16 <-> fp32 (2 read + 4 written).
CAST_BYTES_PER_ELEM = 6


class CastStrategy(str, enum.Enum):
    """Where the fp16/fp32 conversion happens relative to the link transfer."""

    CAST_ON_GPU_MOVE_FULL = "CastOnGpuMoveFull"
    CAST_ON_CPU_MOVE_HALF = "CastOnCpuMoveHalf"

    @classmethod
    def parse(cls, value: str) -> "CastStrategy":
        for member in cls:
            if value in (member.value, member.name, member.name.lower()):
                return member
        raise ConfigError(f"unknown cast strategy {value!r}")


@dataclass(frozen=True)
class HardwareProfile:
    """Calibration surface for one GPU/CPU pair.

    Rates are in flop/s and bytes/s, capacities in bytes, times in seconds.
    ``link_peak_bw`` is the aggregate (both directions) link rate, so a single
    direction runs at half of it unless the curve says otherwise.
    """

    name: str
    gpu_peak_flops: float
    gpu_achievable_fraction: float
    cpu_peak_flops: float
    link_peak_bw: float
    link_bw_curve: tuple[tuple[float, float], ...]
    cpu_mem_bw: float
    gpu_mem_bytes: float
    cpu_mem_bytes: float
    cast_cost_table: tuple[tuple[float, CastStrategy, float], ...]
    # Secondary calibration knobs used by the simulator.
    gpu_mem_bw: float = 4000e9
    adam_bw_fraction: float = 0.79
    gpu_adam_bw_fraction: float = 0.8
    baseline_adam_slowdown: float = 1.265
    unpinned_penalty: float = 2.0
    link_latency: float = 10e-6
    cpu_step_overhead: float = 15e-6
    description: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        positive = {
            "gpu_peak_flops": self.gpu_peak_flops,
            "cpu_peak_flops": self.cpu_peak_flops,
            "link_peak_bw": self.link_peak_bw,
            "cpu_mem_bw": self.cpu_mem_bw,
            "gpu_mem_bytes": self.gpu_mem_bytes,
            "cpu_mem_bytes": self.cpu_mem_bytes,
            "gpu_mem_bw": self.gpu_mem_bw,
            "adam_bw_fraction": self.adam_bw_fraction,
            "gpu_adam_bw_fraction": self.gpu_adam_bw_fraction,
            "baseline_adam_slowdown": self.baseline_adam_slowdown,
            "unpinned_penalty": self.unpinned_penalty,
        }
        for key, value in positive.items():
            if not value > 0:
                raise ConfigError(f"profile {self.name!r}: {key} must be > 0, got {value}")
        if not 0 < self.gpu_achievable_fraction <= 1:
            raise ConfigError(
                f"profile {self.name!r}: gpu_achievable_fraction must be in (0, 1]"
            )
        if self.link_latency < 0 or self.cpu_step_overhead < 0:
            raise ConfigError(f"profile {self.name!r}: overheads must be >= 0")
        if not self.link_bw_curve:
            raise ConfigError(f"profile {self.name!r}: link_bw_curve is empty")
        prev_size, prev_bw = 0.0, 0.0
        for size, bw in self.link_bw_curve:
            if size <= prev_size:
                raise ConfigError(
                    f"profile {self.name!r}: curve sizes must be strictly increasing"
                )
            if bw <= 0 or bw < prev_bw:
                raise ConfigError(
                    f"profile {self.name!r}: curve bandwidth must be positive and nondecreasing"
                )
            if bw > self.link_peak_bw:
                raise ConfigError(
                    f"profile {self.name!r}: curve value {bw} exceeds link_peak_bw"
                )
            prev_size, prev_bw = size, bw
        for size, _, seconds in self.cast_cost_table:
            if size <= 0 or seconds <= 0:
                raise ConfigError(f"profile {self.name!r}: cast rows must be positive")

    @property
    def gpu_achievable_flops(self) -> float:
        return self.gpu_peak_flops * self.gpu_achievable_fraction

    @property
    def unidirectional_bw(self) -> float:
        return self.link_peak_bw / 2

    def with_overrides(self, **changes) -> "HardwareProfile":
        return replace(self, **changes)


def bandwidth_at(profile: HardwareProfile, nbytes: float) -> float:
    """Link bandwidth (bytes/s) achieved by a single transfer of ``nbytes``.

    Piecewise-linear in log2(size) between knots, clamped outside them.
    """
    if not nbytes > 0:
        raise DomainError(f"transfer size must be positive, got {nbytes}")
    knots = profile.link_bw_curve
    if nbytes <= knots[0][0]:
        return knots[0][1]
    if nbytes >= knots[-1][0]:
        return knots[-1][1]
    x = math.log2(nbytes)
    for (s0, b0), (s1, b1) in zip(knots, knots[1:]):
        if nbytes == s1:
            return b1
        if s0 <= nbytes < s1:
            x0, x1 = math.log2(s0), math.log2(s1)
            return b0 + (b1 - b0) * (x - x0) / (x1 - x0)
    return knots[-1][1]  # pragma: no cover - loop always returns


def saturation_bytes(profile: HardwareProfile) -> float:
    """Smallest calibrated transfer size that already runs at the final bandwidth."""
    final = profile.link_bw_curve[-1][1]
    return next(size for size, bw in profile.link_bw_curve if bw >= final)


def transfer_time(profile: HardwareProfile, nbytes: float, penalty: float = 1.0) -> float:
    """Seconds to move ``nbytes`` over the link in one direction."""
    if nbytes == 0:
        return 0.0
    return profile.link_latency + penalty * nbytes / bandwidth_at(profile, nbytes)


def efficiency(
    params: float,
    bsz: int,
    seq: int,
    profile: HardwareProfile,
    bw_override: Optional[float] = None,
) -> float:
    """Fraction of a forward pass that is compute when weights stream over the link."""
    if params <= 0 or bsz <= 0 or seq <= 0:
        raise DomainError("params, bsz and seq must be positive")
    bw = bw_override if bw_override is not None else profile.unidirectional_bw
    if bw <= 0:
        raise DomainError("bandwidth must be positive")
    comp_time = (2.0 * bsz * seq * params) / profile.gpu_achievable_flops
    if math.isinf(bw):
        return 1.0
    comm_time = (2.0 * params) / bw
    return comp_time / (comp_time + comm_time)


def _cast_rows(profile: HardwareProfile, strategy: CastStrategy) -> list[tuple[float, float]]:
    rows = sorted((b, s) for b, strat, s in profile.cast_cost_table if strat is strategy)
    if not rows:
        raise ConfigError(
            f"profile {profile.name!r} has no cast_cost rows for {strategy.value}"
        )
    return rows


def cast_move_cost(nbytes: float, strategy: CastStrategy, profile: HardwareProfile) -> float:
    """Seconds to cast and move a full-precision tensor of ``nbytes``.

    Log-log interpolation over the strategy's calibration rows; outside the
    table the cost scales linearly with size from the nearest row. For
    ``CastOnCpuMoveHalf`` the unpinned-buffer penalty is already folded into
    the rows when the profile is loaded.
    """
    if not nbytes > 0:
        raise DomainError(f"tensor size must be positive, got {nbytes}")
    rows = _cast_rows(profile, strategy)
    if nbytes <= rows[0][0]:
        return rows[0][1] * nbytes / rows[0][0]
    if nbytes >= rows[-1][0]:
        return rows[-1][1] * nbytes / rows[-1][0]
    for (s0, c0), (s1, c1) in zip(rows, rows[1:]):
        if nbytes == s1:
            return c1
        if s0 <= nbytes < s1:
            frac = (math.log(nbytes) - math.log(s0)) / (math.log(s1) - math.log(s0))
            return math.exp(math.log(c0) + frac * (math.log(c1) - math.log(c0)))
    return rows[-1][1]  # pragma: no cover


def choose_cast_strategy(nbytes: float, profile: HardwareProfile) -> CastStrategy:
    """Cheaper of the two strategies for ``nbytes``; ties go to casting on the GPU."""
    gpu = cast_move_cost(nbytes, CastStrategy.CAST_ON_GPU_MOVE_FULL, profile)
    cpu = cast_move_cost(nbytes, CastStrategy.CAST_ON_CPU_MOVE_HALF, profile)
    if cpu < gpu:
        return CastStrategy.CAST_ON_CPU_MOVE_HALF
    return CastStrategy.CAST_ON_GPU_MOVE_FULL


def adam_seconds(profile: HardwareProfile, params: float, device: str = "cpu",
                 slowdown: float = 1.0) -> float:
    """Roofline time of one Adam update over ``params`` parameters.

    The update is memory bound on both devices, so the byte term dominates;
    the flop term is kept so compute-starved profiles still bound it.
    """
    if params <= 0:
        return 0.0
    if device == "cpu":
        flops = params * ADAM_FLOPS_PER_PARAM / profile.cpu_peak_flops
        mem = params * ADAM_BYTES_PER_PARAM / (profile.cpu_mem_bw * profile.adam_bw_fraction)
        return slowdown * max(flops, mem) + profile.cpu_step_overhead
    if device == "gpu":
        flops = params * ADAM_FLOPS_PER_PARAM / profile.gpu_achievable_flops
        mem = params * ADAM_BYTES_PER_PARAM / (profile.gpu_mem_bw * profile.gpu_adam_bw_fraction)
        return slowdown * max(flops, mem)
    raise DomainError(f"unknown device {device!r}")


def cpu_cast_seconds(profile: HardwareProfile, elems: float) -> float:
    """Seconds the CPU spends converting ``elems`` values between fp16 and fp32."""
    if elems <= 0:
        return 0.0
    return elems * CAST_BYTES_PER_ELEM / profile.cpu_mem_bw


# ---------------------------------------------------------------------------
# profile files


def _profile_dirs() -> list[Path]:
    dirs: list[Path] = []
    env = os.environ.get(PROFILE_PATH_ENV)
    if env:
        dirs.extend(Path(p) for p in env.split(os.pathsep) if p)
    dirs.append(Path(str(resources.files("offloadsim") / "data" / "profiles")))
    return dirs


def resolve_profile_path(name_or_path: str | os.PathLike) -> Path:
    """Find a profile by explicit path or by name on the search path."""
    candidate = Path(name_or_path)
    if candidate.suffix == ".toml" or candidate.parent != Path("."):
        if candidate.is_file():
            return candidate
        raise ConfigError(f"profile file not found: {candidate}")
    for directory in _profile_dirs():
        path = directory / f"{candidate.name}.toml"
        if path.is_file():
            return path
    raise ConfigError(
        f"profile {str(name_or_path)!r} not found on search path "
        + os.pathsep.join(str(d) for d in _profile_dirs())
    )


def profile_from_dict(data: dict, source: str = "<dict>") -> HardwareProfile:
    """Build a profile from the parsed TOML document (schema in docs)."""
    required = [
        "name", "gpu_peak_flops", "cpu_peak_flops", "link_peak_bw",
        "link_bw_curve", "cpu_mem_bw", "gpu_mem_bytes", "cpu_mem_bytes",
    ]
    missing = [key for key in required if key not in data]
    if missing:
        raise ConfigError(f"{source}: missing field(s) {', '.join(missing)}")
    tuning = dict(data.get("tuning", {}))
    penalty = float(tuning.get("unpinned_penalty", 2.0))
    rows = []
    for i, row in enumerate(data.get("cast_cost", [])):
        try:
            strategy = CastStrategy.parse(row["strategy"])
            size = float(row["bytes"])
            if "seconds" in row:
                seconds = float(row["seconds"])
            else:
                # cast work plus a move that the penalty stretches when it
                # lands in an unpinned buffer
                move = float(row["move_s"])
                if strategy is CastStrategy.CAST_ON_CPU_MOVE_HALF:
                    move *= penalty
                seconds = float(row["cast_s"]) + move
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: bad cast_cost row {i}: {exc}") from exc
        rows.append((size, strategy, seconds))
    try:
        curve = tuple((float(s), float(b)) for s, b in data["link_bw_curve"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: link_bw_curve must be [[bytes, bytes_per_s], ...]") from exc
    known = {
        "gpu_mem_bw", "adam_bw_fraction", "gpu_adam_bw_fraction",
        "baseline_adam_slowdown", "unpinned_penalty", "link_latency", "cpu_step_overhead",
    }
    unknown = set(tuning) - known
    if unknown:
        raise ConfigError(f"{source}: unknown tuning key(s) {', '.join(sorted(unknown))}")
    return HardwareProfile(
        name=str(data["name"]),
        gpu_peak_flops=float(data["gpu_peak_flops"]),
        gpu_achievable_fraction=float(data.get("gpu_achievable_fraction", 0.6)),
        cpu_peak_flops=float(data["cpu_peak_flops"]),
        link_peak_bw=float(data["link_peak_bw"]),
        link_bw_curve=curve,
        cpu_mem_bw=float(data["cpu_mem_bw"]),
        gpu_mem_bytes=float(data["gpu_mem_bytes"]),
        cpu_mem_bytes=float(data["cpu_mem_bytes"]),
        cast_cost_table=tuple(rows),
        description=str(data.get("description", "")),
        **{key: float(value) for key, value in tuning.items()},
    )


def load_profile(name_or_path: str | os.PathLike = "gh200") -> HardwareProfile:
    path = resolve_profile_path(name_or_path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return profile_from_dict(data, source=str(path))


def available_profiles() -> list[str]:
    names: set[str] = set()
    for directory in _profile_dirs():
        if directory.is_dir():
            names.update(p.stem for p in directory.glob("*.toml"))
    return sorted(names)


def flat_profile(base: HardwareProfile, bw: float, sizes: Iterable[float] = (1 << 20, 1 << 30),
                 **overrides) -> HardwareProfile:
    """Copy of ``base`` whose link runs at ``bw`` regardless of transfer size."""
    curve = tuple((float(s), float(bw)) for s in sizes)
    return replace(base, link_bw_curve=curve, link_peak_bw=max(base.link_peak_bw, bw), **overrides)


def scaled_cast_table(profile: HardwareProfile, factor: float,
                      strategies: Sequence[CastStrategy] | None = None) -> HardwareProfile:
    """Copy of ``profile`` with the chosen strategies' cast costs multiplied."""
    targets = set(strategies) if strategies is not None else set(CastStrategy)
    rows = tuple(
        (b, s, c * factor if s in targets else c) for b, s, c in profile.cast_cost_table
    )
    return replace(profile, cast_cost_table=rows)
