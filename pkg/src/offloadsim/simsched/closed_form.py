"""Closed-form iteration spans for uniform buckets under weight-stationary.

With N identical buckets of which n stay GPU-resident (m = N - n offloaded),
per-bucket durations f, b, g, c, p, u and validation time v:

* synchronous: B = max(F + N b, F + b + g + (m-1) max(b, g)) is when the last
  gradient is on the CPU; the iteration ends when both the parameter return
  chain B + c + p + (m-1) max(c, p) and the GPU step B + n u are done.
* speculative: the offloaded buckets form a four-stage flow shop whose last
  parameter lands C4 = b + g + c + p + (m-1) max(b, g, c, p) after the first
  backward starts; the period is
  max(max(N b + n(u + f), C4) + m f, max(N b, C3) + v) with C3 the same flow
  shop truncated after the CPU stage.

The literal textbook forms are recovered as special cases and exposed as
``eq6_literal``/``eq7_literal``.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class UniformCosts:
    buckets: int
    resident: int
    fwd: float
    bwd: float
    move_grad: float
    step_cpu: float
    move_param: float
    step_gpu: float = 0.0
    validate: float = 0.0

    @property
    def offloaded(self) -> int:
        return self.buckets - self.resident


def _flow_shop(stages: list[float], jobs: int) -> float:
    if jobs <= 0:
        return 0.0
    return sum(stages) + (jobs - 1) * max(stages)


def ste_span(c: UniformCosts) -> float:
    N, n, m = c.buckets, c.resident, c.offloaded
    F = N * c.fwd
    bwd_end = F + N * c.bwd
    if m == 0:
        return bwd_end + n * c.step_gpu
    grads_in = F + _flow_shop([c.bwd, c.move_grad], m)
    B = max(bwd_end, grads_in)
    params_back = B + _flow_shop([c.step_cpu, c.move_param], m)
    return max(params_back, B + n * c.step_gpu)


def stv_span(c: UniformCosts) -> float:
    N, n, m = c.buckets, c.resident, c.offloaded
    gpu_free = N * c.bwd + n * (c.step_gpu + c.fwd)
    c4 = _flow_shop([c.bwd, c.move_grad, c.step_cpu, c.move_param], m)
    c3 = _flow_shop([c.bwd, c.move_grad, c.step_cpu], m)
    fwd_done = max(gpu_free, c4) + m * c.fwd
    verdict = max(N * c.bwd, c3) + c.validate
    return max(fwd_done, verdict)


def eq6_literal(c: UniformCosts) -> float:
    """fwd + bwd + one gradient move + all CPU steps + one parameter move."""
    N = c.buckets
    return N * c.fwd + N * c.bwd + c.move_grad + N * c.step_cpu + c.move_param


def eq7_literal(c: UniformCosts) -> float:
    """fwd + bwd + the CPU step of the final bucket."""
    N = c.buckets
    return N * c.fwd + N * c.bwd + c.step_cpu


def eq6_applies(c: UniformCosts) -> bool:
    """The literal synchronous form holds when nothing stays on the GPU and
    each transfer is shorter than the compute it pipelines with."""
    return c.resident == 0 and c.move_grad <= c.bwd and c.move_param <= c.step_cpu


def eq7_applies(c: UniformCosts) -> bool:
    """The literal speculative form holds when transfers are free, backward
    dominates the CPU step and validation hides under the forward."""
    return (c.resident == 0 and c.move_grad == 0 and c.move_param == 0
            and c.bwd >= c.step_cpu and c.validate <= c.buckets * c.fwd)
