"""Helpers shared by the unit and acceptance tests."""

from __future__ import annotations

import random

from offloadsim.costs import CostKnobs, bucket_times, validate_seconds
from offloadsim.hwmodel import CastStrategy, flat_profile, load_profile
from offloadsim.memplan import ModelConfig, WeightPolicy, Workload
from offloadsim.partition import build_buckets, model_param_sizes
from offloadsim.simsched import (
    GraphSpec,
    Schedule,
    ScheduleKind,
    run_graph,
    simulate,
    uniform_times,
)
from offloadsim.simsched.closed_form import UniformCosts, ste_span, stv_span


def graph_span(c: UniformCosts, schedule: Schedule, iterations: int = 3) -> float:
    """Steady-state iteration time of the event simulation for uniform costs."""
    times = uniform_times(c.buckets, fwd=c.fwd, bwd=c.bwd, move_grad=c.move_grad,
                          step_cpu=c.step_cpu, move_param=c.move_param, step_gpu=c.step_gpu)
    v = c.validate if schedule is Schedule.SUPER_STV else 0.0
    spec = GraphSpec(schedule, WeightPolicy.STATIONARY, times, c.resident, validate=v)
    return run_graph(spec, iterations).mean_iteration_time


def closed_span(c: UniformCosts, schedule: Schedule) -> float:
    return ste_span(c) if schedule is Schedule.BASELINE_STE else stv_span(c)


def random_uniform_costs(rng: random.Random, max_buckets: int = 16) -> UniformCosts:
    N = rng.randint(1, max_buckets)
    draw = lambda: rng.choice([0.0, rng.uniform(0, 1e-3), rng.uniform(0, 1e-2)])
    return UniformCosts(N, rng.randint(0, N), draw(), draw(), draw(), draw(), draw(), draw(),
                        validate=rng.uniform(0, 3e-2))


def random_profile_plan(rng: random.Random):
    """A small model whose fp16 bytes split into equal buckets, on a perturbed
    profile. Returns (model, workload, profile, kind-factory, UniformCosts)."""
    base = load_profile(rng.choice(["gh200", "dgx-a100", "dgx-2"]))
    prof = base.with_overrides(
        cpu_mem_bw=base.cpu_mem_bw * rng.uniform(0.25, 4),
        gpu_achievable_fraction=rng.uniform(0.2, 0.9),
        cpu_step_overhead=rng.uniform(0, 1e-4),
    )
    if rng.random() < 0.5:
        prof = flat_profile(prof, rng.uniform(10e9, 500e9))
    model = ModelConfig("rand", rng.randint(1, 6), 64 * rng.randint(1, 8), rng.randint(100, 5000))
    total = 2 * model.param_count
    divisors = [d for d in range(1, 33) if total % d == 0 and total // d >= 4]
    N = rng.choice(divisors)
    bk = total // N
    plan = build_buckets(model_param_sizes(model), bk)
    assert plan.count == N and all(b.nbytes == bk for b in plan.buckets)
    n = rng.randint(0, N)
    plan = plan.with_gpu_resident(n)
    knobs = CostKnobs(rng.choice(list(CastStrategy)), rng.uniform(1.0, 1.5))
    w = Workload(rng.randint(1, 8), rng.choice([128, 512, 1024, 2048]), checkpointing=False)
    t = bucket_times(bk, w.tokens, prof, knobs)
    costs = UniformCosts(N, n, t.fwd, t.bwd, t.move_grad, t.step_cpu, t.move_param, t.step_gpu,
                         validate=validate_seconds(prof, model.param_count))
    return model, w, prof, plan, knobs, costs


def simulated_span(schedule: Schedule, model, w, prof, plan, knobs) -> float:
    kind = ScheduleKind(schedule, plan, WeightPolicy.STATIONARY, knobs)
    return simulate(kind, model, w, prof).mean_iteration_time


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(b), 1e-300)
