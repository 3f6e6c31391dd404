"""Parameter and memory accounting, and the weight-stationary/weight-flow choice.

Accounting follows mixed-precision Adam: every parameter costs 16 bytes of
model state (fp16 weight 2, fp16 gradient 2, fp32 master/m/v 12). Activation
accounting is documented in ``docs/activation_accounting.md``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from offloadsim.errors import ConfigError, DomainError, InfeasibleError
from offloadsim.hwmodel import HardwareProfile, efficiency

DEFAULT_VOCAB = 50257
STATE_BYTES_PER_PARAM = 16
OPTIM_BYTES_PER_PARAM = 12
HALF_BYTES = 2

# Bytes of saved activations per (token x hidden x layer) without
# checkpointing, calibrated so a 7B model at 1M tokens needs ~2 TB.
ACT_BYTES_PER_ELEM = 16
# With checkpointing only the fp16 layer inputs are kept, plus one layer's
# full working set while it is being recomputed.
CKPT_BYTES_PER_ELEM = 2

# Fractions of device memory withheld from placement.
GPU_WORKSPACE_RESERVE = 0.10   # allocator fragmentation, cuBLAS workspace
GPU_ACTIVATION_RESERVE = 0.22  # stands in for activations when no workload is given
HOST_RESERVE = 0.15            # OS, pinned staging buffers, dataloader
MAX_MODEL_GRANULARITY = 1e8
POLICY_EFFICIENCY_THRESHOLD = 0.60


@dataclass(frozen=True)
class ModelConfig:
    name: str
    layers: int
    hidden: int
    vocab: int = DEFAULT_VOCAB
    seq_default: int = 1024
    nominal: Optional[float] = None

    def __post_init__(self) -> None:
        if self.layers < 0 or self.hidden <= 0 or self.vocab < 0:
            raise DomainError(f"invalid model dimensions for {self.name!r}")

    @property
    def param_count(self) -> int:
        return param_count(self)

    @property
    def layer_params(self) -> int:
        return 12 * self.hidden * self.hidden + 13 * self.hidden


class WeightPolicy(str, enum.Enum):
    STATIONARY = "Stationary"
    FLOW = "Flow"


class PlacementMode(str, enum.Enum):
    GPU_ONLY = "GpuOnly"
    OPTIM_OFFLOAD = "OptimOffload"
    ADAPTIVE = "Adaptive"


@dataclass(frozen=True)
class Workload:
    bsz: int
    seq: int
    # None lets the planner pick: no checkpointing if it fits, else checkpointing
    checkpointing: Optional[bool] = None

    def __post_init__(self) -> None:
        if self.bsz <= 0 or self.seq <= 0:
            raise DomainError("bsz and seq must be positive")

    @property
    def tokens(self) -> int:
        return self.bsz * self.seq


@dataclass(frozen=True)
class MemoryFootprint:
    model_state_bytes: float
    activation_bytes: float
    gpu_resident_bytes: float
    cpu_resident_bytes: float

    def fits(self, profile: HardwareProfile) -> bool:
        return (self.gpu_resident_bytes <= gpu_budget(profile)
                and self.cpu_resident_bytes <= host_budget(profile))


def param_count(config: ModelConfig) -> int:
    """12*L*h^2 + 13*L*h + V*h: attention and MLP weights with biases and
    two layer norms per block, plus a tied token embedding."""
    if config.hidden <= 0 or config.layers < 0:
        raise DomainError("positive dimensions required")
    h = config.hidden
    return config.layers * (12 * h * h + 13 * h) + config.vocab * h


def model_state_bytes(params: float) -> float:
    if params <= 0:
        raise DomainError("params must be positive")
    return STATE_BYTES_PER_PARAM * params


def activation_bytes(config: ModelConfig, bsz: int, seq: int, checkpointing: bool) -> float:
    if bsz <= 0 or seq <= 0:
        raise DomainError("bsz and seq must be positive")
    per_layer = float(bsz) * seq * config.hidden
    if not checkpointing:
        return ACT_BYTES_PER_ELEM * per_layer * config.layers
    return CKPT_BYTES_PER_ELEM * per_layer * config.layers + ACT_BYTES_PER_ELEM * per_layer


def gpu_budget(profile: HardwareProfile) -> float:
    return profile.gpu_mem_bytes * (1 - GPU_WORKSPACE_RESERVE)


def host_budget(profile: HardwareProfile) -> float:
    return profile.cpu_mem_bytes * (1 - HOST_RESERVE)


# ---------------------------------------------------------------------------
# presets


@lru_cache(maxsize=1)
def _preset_table() -> dict[str, ModelConfig]:
    path = resources.files("offloadsim") / "data" / "presets.toml"
    data = tomllib.loads(path.read_text())
    table = {}
    for row in data["preset"]:
        cfg = ModelConfig(
            name=row["name"],
            layers=int(row["layers"]),
            hidden=int(row["hidden"]),
            vocab=int(row.get("vocab", DEFAULT_VOCAB)),
            seq_default=int(row.get("seq_default", 1024)),
            nominal=float(row["nominal"]),
        )
        table[cfg.name] = cfg
    return table


def preset_names() -> list[str]:
    return sorted(_preset_table(), key=lambda n: _preset_table()[n].nominal)


def load_preset(name: str) -> ModelConfig:
    try:
        return _preset_table()[name.lower()]
    except KeyError:
        raise ConfigError(
            f"unknown model preset {name!r}; known: {', '.join(preset_names())}"
        ) from None


def parse_model(spec: str) -> ModelConfig:
    """``"13b"`` or ``"custom:<layers>,<hidden>[,<vocab>]"``/``"<layers>,<hidden>"``."""
    text = spec.strip()
    if text.lower().startswith("custom:"):
        text = text.split(":", 1)[1]
    if "," in text:
        try:
            parts = [int(p) for p in text.split(",")]
        except ValueError:
            raise ConfigError(f"bad custom model spec {spec!r}") from None
        if len(parts) not in (2, 3):
            raise ConfigError(f"custom model needs layers,hidden[,vocab]: {spec!r}")
        vocab = parts[2] if len(parts) == 3 else DEFAULT_VOCAB
        return ModelConfig(name=f"custom-{parts[0]}x{parts[1]}", layers=parts[0],
                           hidden=parts[1], vocab=vocab)
    return load_preset(text)


# ---------------------------------------------------------------------------
# placement


def placement(
    config: ModelConfig,
    workload: Workload,
    policy: WeightPolicy,
    *,
    resident_params: float = 0.0,
    checkpointing: bool = False,
    optim_shards: int = 1,
    weight_shards: int = 1,
    seq_shards: int = 1,
) -> MemoryFootprint:
    """Per-chip bytes for an offloaded placement.

    ``resident_params`` keep their optimizer state on the GPU (bucket
    repartitioning). ``optim_shards`` partitions optimizer state and gradient
    offload across chips, ``weight_shards`` partitions the fp16 weights
    (ZeRO-3), ``seq_shards`` splits the sequence (Ulysses).
    """
    psi = float(config.param_count)
    resident = min(max(resident_params, 0.0), psi)
    act = activation_bytes(config, workload.bsz, max(1, workload.seq // seq_shards), checkpointing)
    offloaded_optim = OPTIM_BYTES_PER_PARAM * (psi - resident) / optim_shards
    resident_optim = OPTIM_BYTES_PER_PARAM * resident / optim_shards
    if policy is WeightPolicy.STATIONARY:
        weights_grads = 2 * HALF_BYTES * psi / weight_shards
        gpu = weights_grads + resident_optim + act
        cpu = offloaded_optim
    else:
        # two layer groups of fp16 weights and gradients in flight
        stream_buffer = 2 * 2 * HALF_BYTES * config.layer_params
        gpu = stream_buffer + resident_optim + 2 * HALF_BYTES * resident / optim_shards + act
        cpu = offloaded_optim + 2 * HALF_BYTES * (psi - resident) / optim_shards
    return MemoryFootprint(
        model_state_bytes=model_state_bytes(psi),
        activation_bytes=act,
        gpu_resident_bytes=gpu,
        cpu_resident_bytes=cpu,
    )


def resolve_checkpointing(config: ModelConfig, workload: Workload, policy: WeightPolicy,
                          profile: HardwareProfile, **kw) -> Optional[bool]:
    """Checkpointing flag that makes the placement fit, or None if neither does."""
    choices = [workload.checkpointing] if workload.checkpointing is not None else [False, True]
    for ckpt in choices:
        if placement(config, workload, policy, checkpointing=ckpt, **kw).fits(profile):
            return ckpt
    return None


def check_placement(config: ModelConfig, workload: Workload, policy: WeightPolicy,
                    profile: HardwareProfile, **kw) -> bool:
    """Checkpointing flag for a feasible placement; raises if none fits."""
    ckpt = resolve_checkpointing(config, workload, policy, profile, **kw)
    if ckpt is None:
        fp = placement(config, workload, policy, checkpointing=True, **kw)
        raise InfeasibleError(
            f"{config.name} bsz={workload.bsz} seq={workload.seq} under {policy.value}: "
            f"needs {fp.gpu_resident_bytes / 1e9:.1f} GB GPU "
            f"(budget {gpu_budget(profile) / 1e9:.1f}) and "
            f"{fp.cpu_resident_bytes / 1e9:.1f} GB host (budget {host_budget(profile) / 1e9:.1f})"
        )
    return ckpt


def max_batch_size(config: ModelConfig, seq: int, policy: WeightPolicy,
                   profile: HardwareProfile, checkpointing: bool, limit: int = 4096,
                   **kw) -> int:
    """Largest power-of-two batch that fits, or 0."""
    best, bsz = 0, 1
    while bsz <= limit:
        fp = placement(config, Workload(bsz, seq), policy, checkpointing=checkpointing, **kw)
        if not fp.fits(profile):
            break
        best, bsz = bsz, bsz * 2
    return best


@dataclass(frozen=True)
class PolicyDecision:
    """The choice and everything it was computed from."""

    policy: WeightPolicy
    stationary_gpu_bytes: float
    gpu_mem_bytes: float
    exceeds_gpu: bool
    efficiency: float
    threshold: float
    overlappable: bool

    def decide(self) -> WeightPolicy:
        exceeds = self.stationary_gpu_bytes > self.gpu_mem_bytes
        overlappable = self.efficiency >= self.threshold
        return WeightPolicy.FLOW if (exceeds or overlappable) else WeightPolicy.STATIONARY

    def as_dict(self) -> dict:
        d = asdict(self)
        d["policy"] = self.policy.value
        return d


def choose_weight_policy(config: ModelConfig, bsz: int, seq: int,
                         profile: HardwareProfile,
                         checkpointing: bool = False) -> PolicyDecision:
    """Stream weights when they do not fit next to activations, or when the
    transfer can hide behind compute."""
    if bsz <= 0 or seq <= 0:
        raise DomainError("bsz and seq must be positive")
    psi = float(config.param_count)
    if model_state_bytes(psi) > profile.gpu_mem_bytes + profile.cpu_mem_bytes:
        raise InfeasibleError(
            f"{config.name}: {model_state_bytes(psi) / 1e9:.0f} GB of model state exceeds "
            f"GPU+CPU memory ({(profile.gpu_mem_bytes + profile.cpu_mem_bytes) / 1e9:.0f} GB)"
        )
    stationary = HALF_BYTES * psi + activation_bytes(config, bsz, seq, checkpointing)
    eff = efficiency(psi, bsz, seq, profile)
    exceeds = stationary > profile.gpu_mem_bytes
    overlappable = eff >= POLICY_EFFICIENCY_THRESHOLD
    policy = WeightPolicy.FLOW if (exceeds or overlappable) else WeightPolicy.STATIONARY
    return PolicyDecision(policy, stationary, profile.gpu_mem_bytes, exceeds, eff,
                          POLICY_EFFICIENCY_THRESHOLD, overlappable)


def _feasible(psi: float, profile: HardwareProfile, mode: PlacementMode) -> bool:
    gpu = gpu_budget(profile) - profile.gpu_mem_bytes * GPU_ACTIVATION_RESERVE
    host = host_budget(profile)
    gpu_only = STATE_BYTES_PER_PARAM * psi <= gpu
    if mode is PlacementMode.GPU_ONLY:
        return gpu_only
    # an offloading runtime can always fall back to keeping everything on the GPU
    offload = gpu_only or (2 * HALF_BYTES * psi <= gpu and OPTIM_BYTES_PER_PARAM * psi <= host)
    if mode is PlacementMode.OPTIM_OFFLOAD:
        return offload
    flow = STATE_BYTES_PER_PARAM * psi <= host
    return offload or flow


def max_trainable_params(profile: HardwareProfile,
                         mode: PlacementMode | str = PlacementMode.ADAPTIVE) -> float:
    """Largest parameter count (multiple of 1e8) whose model state fits."""
    mode = PlacementMode(mode)
    lo = 0
    hi = int(math.ceil((profile.gpu_mem_bytes + profile.cpu_mem_bytes)
                       / STATE_BYTES_PER_PARAM / MAX_MODEL_GRANULARITY)) + 1
    # invariant: lo feasible (or zero), hi infeasible
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _feasible(mid * MAX_MODEL_GRANULARITY, profile, mode):
            lo = mid
        else:
            hi = mid
    return lo * MAX_MODEL_GRANULARITY
