"""Mixed-precision optimizer state and its on-disk form."""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from offloadsim.errors import ConfigError, DomainError

MASTER_DTYPE = np.float32
WORKING_DTYPE = np.float16

CHECKPOINT_MAGIC = b"OSIMCKPT"
CHECKPOINT_VERSION = 1
# magic, version, psi, t, loss_scale, clean_steps
_HEADER = struct.Struct("<8sIQQdQ")


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: Optional[float] = 1.0

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise DomainError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise DomainError("betas must lie in [0, 1)")
        if not self.eps > 0:
            raise DomainError("eps must be positive")
        if self.weight_decay < 0:
            raise DomainError("weight_decay must be nonnegative")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise DomainError("clip_norm must be positive or None")


class VerdictKind(str, enum.Enum):
    PROCEED = "Proceed"
    CLIP = "Clip"
    SKIP_NON_FINITE = "SkipNonFinite"


@dataclass(frozen=True)
class ValidationVerdict:
    kind: VerdictKind
    coef: float = 1.0
    norm: float = float("nan")

    def __post_init__(self) -> None:
        if self.kind is VerdictKind.CLIP and not 0 < self.coef < 1:
            raise DomainError("clip coefficient must lie in (0, 1)")

    @property
    def rolls_back(self) -> bool:
        return self.kind is not VerdictKind.PROCEED


@dataclass(frozen=True)
class LossScalePolicy:
    """Halve on a skipped step, double after ``growth_interval`` clean steps."""

    initial: float = 2.0 ** 12
    growth_interval: int = 2000
    factor: float = 2.0
    min_scale: float = 1.0
    max_scale: float = 2.0 ** 24

    def update(self, scale: float, clean: int, skipped: bool) -> tuple[float, int]:
        if skipped:
            return max(self.min_scale, scale / self.factor), 0
        clean += 1
        if clean >= self.growth_interval:
            return min(self.max_scale, scale * self.factor), 0
        return scale, clean


@dataclass
class TrainState:
    master: np.ndarray
    m: np.ndarray
    v: np.ndarray
    working: np.ndarray
    t: int = 0
    loss_scale: float = LossScalePolicy.initial
    clean_steps: int = 0

    def __post_init__(self) -> None:
        n = self.master.shape
        if not (self.m.shape == self.v.shape == self.working.shape == n) or len(n) != 1:
            raise DomainError("state vectors must be 1-D and equally long")
        if self.master.dtype != MASTER_DTYPE or self.m.dtype != MASTER_DTYPE \
                or self.v.dtype != MASTER_DTYPE or self.working.dtype != WORKING_DTYPE:
            raise DomainError("state vectors have the wrong precision")
        if not self.loss_scale > 0:
            raise DomainError("loss_scale must be positive")

    @classmethod
    def fresh(cls, params: np.ndarray, loss_scale: float = LossScalePolicy.initial) -> "TrainState":
        master = np.ascontiguousarray(params, dtype=MASTER_DTYPE).copy()
        zeros = np.zeros_like(master)
        return cls(master, zeros, zeros.copy(), master.astype(WORKING_DTYPE), 0, float(loss_scale))

    @property
    def size(self) -> int:
        return int(self.master.shape[0])

    def refresh_working(self) -> None:
        np.copyto(self.working, self.master.astype(WORKING_DTYPE))

    def mirror_ok(self) -> bool:
        return bool(np.array_equal(self.working.view(np.uint16),
                                   self.master.astype(WORKING_DTYPE).view(np.uint16)))

    def copy(self) -> "TrainState":
        return TrainState(self.master.copy(), self.m.copy(), self.v.copy(), self.working.copy(),
                          self.t, self.loss_scale, self.clean_steps)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.master, self.m, self.v, self.working):
            h.update(arr.tobytes())
        h.update(struct.pack("<QdQ", self.t, self.loss_scale, self.clean_steps))
        return h.hexdigest()

    def bitwise_equal(self, other: "TrainState") -> bool:
        return self.digest() == other.digest()

    # checkpoint layout: header, then master, m, v (float32) and working (float16),
    # all little-endian
    def to_bytes(self) -> bytes:
        head = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self.size, self.t,
                            float(self.loss_scale), self.clean_steps)
        body = b"".join(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
                        for a in (self.master, self.m, self.v, self.working))
        return head + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "TrainState":
        if len(data) < _HEADER.size:
            raise ConfigError("checkpoint truncated")
        magic, version, psi, t, scale, clean = _HEADER.unpack_from(data)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError("not an offloadsim checkpoint")
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        expected = _HEADER.size + psi * (3 * 4 + 2)
        if len(data) != expected:
            raise ConfigError(f"checkpoint has {len(data)} bytes, expected {expected}")
        off = _HEADER.size
        vecs = []
        for dtype in ("<f4", "<f4", "<f4", "<f2"):
            arr = np.frombuffer(data, dtype=dtype, count=psi, offset=off)
            vecs.append(arr.astype(np.dtype(dtype).newbyteorder("="), copy=True))
            off += arr.nbytes
        return cls(vecs[0], vecs[1], vecs[2], vecs[3], int(t), float(scale), int(clean))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "TrainState":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"checkpoint not found: {p}")
        return cls.from_bytes(p.read_bytes())


@dataclass
class BucketSnapshot:
    """Copies of one bucket's full-precision state taken before a speculative step.

    Costs 12 bytes per parameter of the bucket.
    """

    bucket_id: int
    lo: int
    hi: int
    master: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int

    @classmethod
    def take(cls, state: TrainState, bucket_id: int, lo: int, hi: int) -> "BucketSnapshot":
        return cls(bucket_id, lo, hi, state.master[lo:hi].copy(), state.m[lo:hi].copy(),
                   state.v[lo:hi].copy(), state.t)

    def restore(self, state: TrainState) -> None:
        state.master[self.lo:self.hi] = self.master
        state.m[self.lo:self.hi] = self.m
        state.v[self.lo:self.hi] = self.v
        state.t = self.t


@dataclass
class IterationReport:
    iteration: int
    verdict: VerdictKind
    rollbacks: int
    t: int
    loss_scale: float
    loss: float = float("nan")
    norm: float = float("nan")
    extra: dict = field(default_factory=dict)
