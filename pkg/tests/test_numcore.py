import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from offloadsim.errors import ConfigError, DomainError
from offloadsim.numcore import (
    AdamHyper,
    Batch,
    BucketSnapshot,
    Fault,
    FaultSpec,
    LossScalePolicy,
    Mode,
    Mutation,
    Scheduler,
    SyntheticStream,
    TinyModel,
    TrainState,
    VerdictKind,
    adam_step_bucket,
    adam_step_reference,
    adam_step_scalar,
    element_plan,
    fault_pattern,
    global_grad_norm,
    run_training,
    stv_iteration,
    sync_iteration,
    tiny_model_grads,
    validate,
)
from offloadsim.numcore.validation import bucket_sumsq

# --- Adam ---------------------------------------------------------------------


def adam_by_hand(w, m, v, g, t, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    """Float64 textbook AdamW, written without reference to the package."""
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh = m / (1 - b1 ** t)
    vh = v / (1 - b2 ** t)
    w = w * (1 - lr * wd) - lr * mh / (math.sqrt(vh) + eps)
    return w, m, v


def random_state(n, seed):
    rng = np.random.default_rng(seed)
    st_ = TrainState.fresh(rng.standard_normal(n).astype(np.float32))
    st_.m[:] = rng.standard_normal(n).astype(np.float32) * 0.1
    st_.v[:] = np.abs(rng.standard_normal(n)).astype(np.float32) * 0.01
    return st_, rng.standard_normal(n).astype(np.float32)


def test_adam_single_element_hand_value():
    state = TrainState.fresh(np.array([1.0], dtype=np.float32))
    hyper = AdamHyper(lr=0.1, clip_norm=None)
    adam_step_bucket(state, np.array([1.0], dtype=np.float32), 0, 1, hyper, t=1)
    w, m, v = adam_by_hand(1.0, 0.0, 0.0, 1.0, 1, 0.1)
    assert w == pytest.approx(0.9, abs=1e-7)
    assert state.master[0] == pytest.approx(w, rel=1e-6)
    assert state.m[0] == pytest.approx(m, rel=1e-6) and m == pytest.approx(0.1)
    assert state.v[0] == pytest.approx(v, rel=1e-6) and v == pytest.approx(0.001)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.integers(0, 10_000), st.integers(1, 50),
       st.floats(0.0, 0.1))
def test_adam_matches_float64_formula(n, seed, t, wd):
    state, g = random_state(n, seed)
    w0, m0, v0 = (state.master.astype(np.float64), state.m.astype(np.float64),
                  state.v.astype(np.float64))
    hyper = AdamHyper(lr=1e-3, weight_decay=wd)
    adam_step_bucket(state, g, 0, n, hyper, t)
    for i in range(n):
        w, m, v = adam_by_hand(w0[i], m0[i], v0[i], float(g[i]), t, 1e-3, wd=wd)
        assert state.m[i] == pytest.approx(m, rel=1e-5, abs=1e-7)
        assert state.v[i] == pytest.approx(v, rel=1e-5, abs=1e-9)
        assert state.master[i] == pytest.approx(w, rel=1e-5, abs=1e-6)


def test_adam_zero_gradient_is_noop():
    state, _ = random_state(1000, 3)
    state.m[:] = 0
    state.v[:] = 0
    before = state.copy()
    adam_step_bucket(state, np.zeros(1000, np.float32), 0, 1000, AdamHyper(), t=1)
    assert state.bitwise_equal(before)


@pytest.mark.parametrize("tile", [1, 7, 4096])
def test_adam_tiling_invariance_10k(tile):
    ref, g = random_state(10_000, 11)
    out = ref.copy()
    hyper = AdamHyper(lr=1e-2, weight_decay=0.01)
    adam_step_scalar(ref, g, 0, 10_000, hyper, t=3)
    adam_step_bucket(out, g, 0, 10_000, hyper, t=3, tile_elems=tile)
    assert out.bitwise_equal(ref)


def test_adam_reference_matches_kernel():
    ref, g = random_state(3000, 5)
    out = ref.copy()
    hyper = AdamHyper(lr=1e-2, weight_decay=0.01)
    adam_step_reference(ref, g[100:2900], 100, 2900, hyper, t=7)
    adam_step_bucket(out, g[100:2900], 100, 2900, hyper, t=7, tile_elems=64)
    assert out.bitwise_equal(ref)


def test_adam_range_touches_only_slice():
    state, g = random_state(100, 2)
    before = state.copy()
    adam_step_bucket(state, g[10:20], 10, 20, AdamHyper(), t=1)
    assert np.array_equal(state.master[:10], before.master[:10])
    assert np.array_equal(state.master[20:], before.master[20:])
    assert not np.array_equal(state.master[10:20], before.master[10:20])


def test_adam_rejects_bad_input():
    state, g = random_state(10, 0)
    with pytest.raises(DomainError):
        adam_step_bucket(state, g[:5], 0, 10, AdamHyper(), t=1)
    with pytest.raises(DomainError):
        adam_step_bucket(state, g, 0, 10, AdamHyper(), t=0)
    with pytest.raises((DomainError, ValueError)):
        AdamHyper(lr=-1)


# --- validation ---------------------------------------------------------------


def test_norm_examples():
    assert global_grad_norm([np.array([3, 4], np.float32)]) == 5.0
    assert global_grad_norm([np.zeros(10, np.float32)]) == 0.0


@given(st.integers(0, 1000), st.integers(1, 5))
def test_norm_equals_concatenated_sequential(seed, workers):
    rng = np.random.default_rng(seed)
    parts = [rng.standard_normal(rng.integers(1, 500)).astype(np.float32) for _ in range(3)]
    whole = np.concatenate(parts)
    acc = 0.0
    for p in parts:   # same bucket-then-combine order, written out longhand
        s = 0.0
        for x in p.astype(np.float64):
            s += x * x
        acc += s
    assert global_grad_norm(parts, workers=workers) == math.sqrt(acc)
    assert bucket_sumsq(whole) == pytest.approx(acc, rel=1e-12)


def test_validate_verdicts():
    hyper = AdamHyper(clip_norm=1.0)
    g = np.full(4, 0.5, np.float32)   # norm exactly 1
    assert validate([g], hyper, 1.0).kind is VerdictKind.PROCEED
    v = validate([2 * g], hyper, 1.0)
    assert v.kind is VerdictKind.CLIP and v.coef == pytest.approx(0.5)
    assert validate([g * 8], hyper, 8.0).kind is VerdictKind.PROCEED  # loss scale divided out
    bad = g.copy()
    bad[1] = np.nan
    assert validate([g, bad], hyper, 1.0).kind is VerdictKind.SKIP_NON_FINITE
    bad[1] = np.inf
    assert validate([bad], hyper, 1.0).kind is VerdictKind.SKIP_NON_FINITE
    assert validate([g * 1e6], AdamHyper(clip_norm=None), 1.0).kind is VerdictKind.PROCEED


# --- state --------------------------------------------------------------------


def test_state_roundtrip(tmp_path):
    state, _ = random_state(257, 1)
    state.t, state.loss_scale, state.clean_steps = 12, 512.0, 7
    path = tmp_path / "s.ckpt"
    state.save(path)
    back = TrainState.load(path)
    assert back.bitwise_equal(state) and back.t == 12 and back.loss_scale == 512.0
    assert back.digest() == state.digest()
    with pytest.raises(ConfigError):
        TrainState.from_bytes(b"garbage" * 10)


def test_snapshot_restore():
    state, g = random_state(50, 4)
    before = state.copy()
    snap = BucketSnapshot.take(state, 0, 10, 30)
    adam_step_bucket(state, g, 0, 50, AdamHyper(), t=1)
    snap.restore(state)
    assert np.array_equal(state.master[10:30], before.master[10:30])
    assert np.array_equal(state.v[10:30], before.v[10:30])


def test_loss_scale_policy():
    pol = LossScalePolicy(initial=8.0, growth_interval=2)
    assert pol.update(8.0, 0, skipped=True) == (4.0, 0)
    assert pol.update(8.0, 0, skipped=False) == (8.0, 1)
    assert pol.update(8.0, 1, skipped=False) == (16.0, 0)
    assert pol.update(1.0, 0, skipped=True)[0] == 1.0


# --- protocol -----------------------------------------------------------------


MODEL = TinyModel((8, 16, 2))
PLAN = element_plan(MODEL.param_sizes, 40)


def scaled_grads(seed, scale=4096.0):
    params = MODEL.init_params(seed)
    batch = SyntheticStream(MODEL, seed).batch(0)
    g, _ = tiny_model_grads(MODEL, params, batch)
    return params, (g * np.float32(scale)).astype(np.float16).astype(np.float32)


@pytest.mark.parametrize("case", ["clean", "inf", "clip"])
def test_stv_iteration_matches_sync(case):
    params, g = scaled_grads(1)
    hyper = AdamHyper(lr=1e-2, clip_norm=1e3)
    if case == "inf":
        g[5] = np.inf
    if case == "clip":
        hyper = AdamHyper(lr=1e-2, clip_norm=1e-3)
    a, b = TrainState.fresh(params), TrainState.fresh(params)
    before = a.copy()
    va = sync_iteration(a, g, PLAN, hyper)
    vb, rollbacks = stv_iteration(b, g, PLAN, hyper)
    assert va == vb
    assert a.bitwise_equal(b) and a.t == b.t
    if case == "clean":
        assert rollbacks == 0 and a.t == 1
    if case == "inf":
        assert b.t == 0 and rollbacks >= 1
        assert np.array_equal(b.master, before.master) and np.array_equal(b.v, before.v)
    if case == "clip":
        assert vb.kind is VerdictKind.CLIP and rollbacks == 1


def test_run_training_equivalence_and_known_skips():
    data = SyntheticStream(MODEL, 3)
    hyper = AdamHyper(lr=1e-2, clip_norm=1.0)
    nan_its = {4, 9, 17}
    faults = FaultSpec({i: Fault("nan") for i in nan_its})
    runs = [run_training(Mode.SYNC_ORACLE, MODEL, data, 30, hyper, PLAN, seed=3, faults=faults)]
    for sched in Scheduler:
        runs.append(run_training(Mode.STV, MODEL, data, 30, hyper, PLAN, seed=3, faults=faults,
                                 scheduler=sched))
    for r in runs:
        skipped = {i for i, k in r.verdict_log if k == "SkipNonFinite"}
        assert skipped == nan_its
        assert r.state.bitwise_equal(runs[0].state)
        assert r.digests == runs[0].digests
        assert r.state.mirror_ok()


def test_run_training_loss_decreases():
    data = SyntheticStream(TinyModel((16, 32, 4)), 0)
    res = run_training(Mode.SYNC_ORACLE, data.model, data, 50,
                       AdamHyper(lr=1e-2, clip_norm=10.0),
                       element_plan(data.model.param_sizes, 256), seed=0)
    losses = res.losses
    assert np.mean(losses[-5:]) < 0.5 * np.mean(losses[:5])


def test_t_counts_applied_iterations():
    data = SyntheticStream(MODEL, 1)
    faults = fault_pattern("nan", 20, seed=1)
    res = run_training(Mode.STV, MODEL, data, 20, AdamHyper(lr=1e-2), PLAN, seed=1, faults=faults)
    applied = [r for r in res.reports if r.verdict is not VerdictKind.SKIP_NON_FINITE]
    assert res.state.t == len(applied)
    ts = res.t_history
    assert all(b - a in (0, 1) for a, b in zip(ts, ts[1:]))


@pytest.mark.parametrize("mutation", [m for m in Mutation if m is not Mutation.NONE])
def test_mutations_are_detected(mutation):
    from offloadsim.numcore.verify import run_suite
    report = run_suite([0], ["nan", "clip"], [Scheduler.SERIALIZED], 40, mutation=mutation)
    assert not report.passed
    assert all(o.first_mismatch is not None for o in report.failures)


def test_fault_spec_parsing(tmp_path):
    spec = FaultSpec.from_mapping({"3": "nan", "5": {"scale": 100.0}})
    assert spec.faults[3] == Fault("nan") and spec.faults[5] == Fault("scale", 100.0)
    p = tmp_path / "f.toml"
    p.write_text('[faults]\n2 = "nan"\n')
    assert FaultSpec.load(p).faults == {2: Fault("nan")}
    with pytest.raises(ConfigError):
        FaultSpec.from_mapping({"x": "nan"})
    with pytest.raises(ConfigError):
        fault_pattern("bogus", 10)


# --- model --------------------------------------------------------------------


def test_bias_free_zero_network_has_zero_gradient():
    model = TinyModel((4, 5, 3), bias=False)
    params = np.zeros(model.param_count, np.float64)
    batch = Batch(np.zeros((6, 4)), np.zeros((6, 3)))
    g, loss = tiny_model_grads(model, params, batch)
    assert loss == 0.0 and not g.any()


@pytest.mark.parametrize("seed", range(3))
def test_gradients_finite_differences(seed):
    model = TinyModel((5, 7, 3))
    params = model.init_params(seed).astype(np.float64)
    batch = SyntheticStream(model, seed).batch(0)
    batch = Batch(batch.x.astype(np.float64), batch.y.astype(np.float64))
    g, _ = tiny_model_grads(model, params, batch)
    h = 1e-6
    for i in np.random.default_rng(seed).choice(params.size, 10, replace=False):
        e = np.zeros_like(params)
        e[i] = h
        fd = (model.forward(params + e, batch)[0] - model.forward(params - e, batch)[0]) / (2 * h)
        assert g[i] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_stream_is_deterministic():
    s = SyntheticStream(MODEL, 7)
    a, b = s.batch(3), s.batch(3)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert not np.array_equal(s.batch(4).x, a.x)
