"""Deferred gradient checks: non-finite detection, global norm, clipping."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np
from numba import njit

from offloadsim.errors import DomainError
from offloadsim.numcore.state import AdamHyper, ValidationVerdict, VerdictKind


@njit(cache=True, nogil=True)
def _sumsq(g):
    acc = 0.0
    for i in range(g.shape[0]):
        x = np.float64(g[i])
        acc += x * x
    return acc


@njit(cache=True, nogil=True)
def _all_finite(g):
    for i in range(g.shape[0]):
        if not np.isfinite(g[i]):
            return False
    return True


def bucket_sumsq(grads: np.ndarray) -> float:
    """Sequential float64 sum of squares, first element to last."""
    return float(_sumsq(np.ascontiguousarray(grads, dtype=np.float32)))


def combine_norm(partials: Sequence[float]) -> float:
    total = 0.0
    for s in partials:
        total += s
    return math.sqrt(total)


def global_grad_norm(grad_buckets: Sequence[np.ndarray], workers: int = 1) -> float:
    """L2 norm: per-bucket partial sums, added in bucket-id order.

    With ``workers > 1`` the partial sums are computed concurrently; they are
    still combined in bucket-id order so the result does not change.
    """
    if len(grad_buckets) == 0:
        raise DomainError("at least one gradient bucket is required")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(bucket_sumsq, grad_buckets))
    else:
        partials = [bucket_sumsq(g) for g in grad_buckets]
    return combine_norm(partials)


def all_finite(grad_buckets: Sequence[np.ndarray]) -> bool:
    return all(_all_finite(np.ascontiguousarray(g, dtype=np.float32)) for g in grad_buckets)


def unscale(grads: np.ndarray, loss_scale: float) -> np.ndarray:
    return (np.asarray(grads, dtype=np.float32) / np.float32(loss_scale)).astype(np.float32)


def validate(grad_buckets: Sequence[np.ndarray], hyper: AdamHyper,
             loss_scale: float) -> ValidationVerdict:
    """Verdict on loss-scaled gradients.

    Non-finite values are looked for before unscaling, since dividing an
    overflowed value can turn it into something that hides the cause.
    Clipping triggers only when the norm strictly exceeds the threshold.
    """
    if not all_finite(grad_buckets):
        return ValidationVerdict(VerdictKind.SKIP_NON_FINITE)
    norm = global_grad_norm([unscale(g, loss_scale) for g in grad_buckets])
    if not math.isfinite(norm):
        return ValidationVerdict(VerdictKind.SKIP_NON_FINITE, norm=norm)
    if hyper.clip_norm is not None and norm > hyper.clip_norm:
        return ValidationVerdict(VerdictKind.CLIP, hyper.clip_norm / norm, norm)
    return ValidationVerdict(VerdictKind.PROCEED, 1.0, norm)
