"""AdamW update over a contiguous slice, in three implementations.

``adam_step_bucket`` is the tiled production kernel: tiles are distributed
over threads and each tile is a tight loop the compiler can vectorize.
``adam_step_scalar`` is the same arithmetic as one serial loop, and
``adam_step_reference`` is an independent per-element Python version. All
three perform the identical sequence of float32 operations, so their results
agree bit for bit.
"""

from __future__ import annotations

import warnings

import numba
import numpy as np
from numba import njit, prange

from offloadsim.errors import DomainError
from offloadsim.numcore.state import AdamHyper, TrainState

DEFAULT_TILE_ELEMS = 4096
f32 = np.float32

warnings.filterwarnings("ignore", message="The TBB threading layer", category=numba.NumbaWarning)


def step_constants(hyper: AdamHyper, t: int) -> tuple:
    """Scalars of the update at step ``t`` (1-based), rounded once to float32."""
    if t < 1:
        raise DomainError("step count must be at least 1")
    b1 = f32(hyper.beta1)
    b2 = f32(hyper.beta2)
    return (
        b1,
        f32(1.0 - hyper.beta1),
        b2,
        f32(1.0 - hyper.beta2),
        f32(hyper.lr),
        f32(hyper.eps),
        f32(1.0 - hyper.lr * hyper.weight_decay),
        f32(1.0 - hyper.beta1 ** t),
        f32(1.0 - hyper.beta2 ** t),
    )


@njit(cache=True, nogil=True, inline="always")
def _update(p, m, v, g, b1, omb1, b2, omb2, lr, eps, decay, bc1, bc2):
    mi = b1 * m + omb1 * g
    vi = b2 * v + omb2 * (g * g)
    mh = mi / bc1
    vh = vi / bc2
    pi = p * decay - lr * (mh / (np.sqrt(vh) + eps))
    return pi, mi, vi


@njit(cache=True, nogil=True)
def _tile(p, m, v, g, b1, omb1, b2, omb2, lr, eps, decay, bc1, bc2):
    # unit-stride views with no offset arithmetic keep this loop vectorizable
    for i in range(g.shape[0]):
        p[i], m[i], v[i] = _update(p[i], m[i], v[i], g[i], b1, omb1, b2, omb2, lr, eps,
                                   decay, bc1, bc2)


@njit(cache=True, nogil=True, parallel=True)
def _tiled(p, m, v, g, lo, tile, b1, omb1, b2, omb2, lr, eps, decay, bc1, bc2):
    n = g.shape[0]
    ntiles = (n + tile - 1) // tile
    for k in prange(ntiles):
        s = k * tile
        e = min(s + tile, n)
        _tile(p[lo + s:lo + e], m[lo + s:lo + e], v[lo + s:lo + e], g[s:e],
              b1, omb1, b2, omb2, lr, eps, decay, bc1, bc2)


@njit(cache=True, nogil=True)
def _tiled_one_thread(p, m, v, g, lo, tile, b1, omb1, b2, omb2, lr, eps, decay, bc1, bc2):
    n = g.shape[0]
    for s in range(0, n, tile):
        e = min(s + tile, n)
        _tile(p[lo + s:lo + e], m[lo + s:lo + e], v[lo + s:lo + e], g[s:e],
              b1, omb1, b2, omb2, lr, eps, decay, bc1, bc2)


@njit(cache=True, nogil=True)
def _serial(p, m, v, g, lo, b1, omb1, b2, omb2, lr, eps, decay, bc1, bc2):
    for i in range(g.shape[0]):
        j = lo + i
        p[j], m[j], v[j] = _update(p[j], m[j], v[j], g[i], b1, omb1, b2, omb2, lr, eps,
                                   decay, bc1, bc2)


def _check(state: TrainState, grads: np.ndarray, lo: int, hi: int) -> np.ndarray:
    if not 0 <= lo <= hi <= state.size:
        raise DomainError(f"slice [{lo}, {hi}) outside a state of {state.size} elements")
    g = np.ascontiguousarray(grads, dtype=np.float32)
    if g.shape != (hi - lo,):
        raise DomainError(f"gradient slice has shape {g.shape}, expected ({hi - lo},)")
    return g


def adam_step_bucket(state: TrainState, grads: np.ndarray, lo: int, hi: int, hyper: AdamHyper,
                     t: int, tile_elems: int = DEFAULT_TILE_ELEMS) -> None:
    """Apply step ``t`` to ``state[lo:hi]`` in place; ``state.t`` is left alone."""
    if tile_elems < 1:
        raise DomainError("tile_elems must be positive")
    g = _check(state, grads, lo, hi)
    if hi > lo:
        # a single thread gains nothing from the parallel runtime but pays for it
        kernel = _tiled if numba.get_num_threads() > 1 else _tiled_one_thread
        kernel(state.master, state.m, state.v, g, lo, tile_elems, *step_constants(hyper, t))


def adam_step_scalar(state: TrainState, grads: np.ndarray, lo: int, hi: int, hyper: AdamHyper,
                     t: int) -> None:
    g = _check(state, grads, lo, hi)
    if hi > lo:
        _serial(state.master, state.m, state.v, g, lo, *step_constants(hyper, t))


def adam_step_reference(state: TrainState, grads: np.ndarray, lo: int, hi: int,
                        hyper: AdamHyper, t: int) -> None:
    """Element-at-a-time oracle written directly from the AdamW formulas."""
    g = _check(state, grads, lo, hi)
    b1, omb1, b2, omb2, lr, eps, decay, bc1, bc2 = step_constants(hyper, t)
    with np.errstate(all="ignore"):
        for i in range(hi - lo):
            j = lo + i
            gi = g[i]
            m_new = b1 * state.m[j] + omb1 * gi
            v_new = b2 * state.v[j] + omb2 * (gi * gi)
            m_hat = m_new / bc1
            v_hat = v_new / bc2
            state.master[j] = state.master[j] * decay - lr * (m_hat / (np.sqrt(v_hat) + eps))
            state.m[j] = m_new
            state.v[j] = v_new
