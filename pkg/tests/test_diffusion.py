import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nocdda.diffusion import (DivergenceError, NoiseSchedule, ScheduleError, forward_diffuse, forward_diffuse_batch,
                              make_epsilon_net, make_linear_schedule, time_embedding, train_epsilon)
from nocdda.mlp import DimensionError

from oracles import alpha_bar_loop, sinusoid


def test_default_schedule_matches_product_loop():
    s = make_linear_schedule(1000)
    ref = alpha_bar_loop(1000, 1e-4, 0.02)
    assert np.allclose(s.alpha_bars, ref, rtol=1e-12, atol=0)
    assert s.alpha_bar(1000) == pytest.approx(ref[-1], rel=1e-12)


def test_alpha_bar_zero_is_one():
    assert make_linear_schedule(10).alpha_bar(0) == 1.0


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.02, 1e-4), (10, 0.0, 0.1), (10, 0.1, 1.0), (2.5, 1e-4, 0.02)])
def test_invalid_schedules_rejected(args):
    with pytest.raises(ScheduleError):
        make_linear_schedule(*args)


def test_near_equal_betas_either_increase_or_are_rejected():
    try:
        s = make_linear_schedule(2, 0.1, 0.1 + 1e-17)
    except ScheduleError:
        return
    assert s.betas[1] > s.betas[0]


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 400), st.floats(1e-5, 0.05), st.floats(1e-3, 0.5))
def test_schedule_invariants(T, lo, gap):
    s = make_linear_schedule(T, lo, min(lo + gap, 0.99))
    assert np.all(np.diff(s.betas) > 0) and np.all((s.betas > 0) & (s.betas < 1))
    assert np.all(np.diff(s.alpha_bars) < 0) and np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))
    assert np.allclose(s.alpha_bars[:-1] * s.alphas[1:], s.alpha_bars[1:], rtol=1e-12, atol=0)
    running = np.multiply.accumulate(s.alphas)
    assert np.max(np.abs(running - s.alpha_bars)) <= 1e-12


def test_schedule_json_round_trip_recomputes_arrays():
    s = make_linear_schedule(300, 2e-4, 0.03, seed=5)
    text = s.to_json()
    assert "alpha" not in text
    r = NoiseSchedule.from_json(text)
    assert r == s and np.array_equal(r.alpha_bars, s.alpha_bars)


def test_embedding_at_zero_alternates_zero_one():
    e = time_embedding(0, 1000, 16)
    assert np.array_equal(e, np.tile([0.0, 1.0], 8))


def test_embedding_matches_reference_and_is_injective():
    ts = np.arange(0, 1001)
    E = time_embedding(ts, 1000, 16)
    assert np.allclose(E[::97], sinusoid(ts[::97], 1000, 16), atol=1e-12)
    assert len({tuple(np.round(row, 12)) for row in E}) == len(ts)


def test_forward_diffuse_special_cases():
    s = make_linear_schedule(100)
    x0 = np.array([1.0, -2.0])
    assert np.array_equal(forward_diffuse(x0, 0, np.ones(2), s), x0)
    assert np.allclose(forward_diffuse(x0, 40, np.zeros(2), s), np.sqrt(s.alpha_bar(40)) * x0, rtol=0, atol=1e-15)
    with pytest.raises(DimensionError):
        forward_diffuse(x0, 3, np.zeros(3), s)
    with pytest.raises(ScheduleError):
        forward_diffuse(x0, 101, np.zeros(2), s)


def test_batch_matches_single():
    s = make_linear_schedule(50)
    rng = np.random.default_rng(0)
    X, Z = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    ts = rng.integers(1, 51, size=6)
    ref = np.array([forward_diffuse(x, int(t), z, s) for x, t, z in zip(X, ts, Z)])
    assert np.allclose(forward_diffuse_batch(X, ts, Z, s), ref, rtol=0, atol=1e-15)


def test_forward_moments_on_one_point():
    s = make_linear_schedule(1000)
    rng = np.random.default_rng(1)
    x0, t, n = np.array([1.5, -0.5]), 250, 10_000
    xt = forward_diffuse_batch(np.tile(x0, (n, 1)), np.full(n, t), rng.standard_normal((n, 2)), s)
    ab = s.alpha_bar(t)
    assert np.all(np.abs(xt.mean(0) - np.sqrt(ab) * x0) < 3 * np.sqrt((1 - ab) / n))
    assert np.all(np.abs(xt.var(0) / (1 - ab) - 1) < 0.05)


def test_variance_grows_toward_one_on_unit_data():
    s = make_linear_schedule(1000)
    rng = np.random.default_rng(2)
    x0 = rng.normal(scale=0.3, size=(20_000, 1))
    var = [forward_diffuse_batch(x0, np.full(len(x0), t), rng.standard_normal(x0.shape), s).var()
           for t in (1, 100, 300, 600, 1000)]
    assert all(b > a for a, b in zip(var, var[1:])) and abs(var[-1] - 1) < 0.05


def test_zero_head_initial_loss_is_data_dimension():
    s = make_linear_schedule(100)
    rng = np.random.default_rng(3)
    net = make_epsilon_net(3, 100, rng, hidden=(8,))
    _, trace = train_epsilon(rng.normal(size=(4000, 3)), s, net, 1, 4000, 1e-12, rng, momentum=0.0)
    assert trace[0] == pytest.approx(3.0, rel=0.05)


def test_training_on_repeated_point_halves_loss():
    s = make_linear_schedule(100)
    rng = np.random.default_rng(4)
    net = make_epsilon_net(2, 100, rng, hidden=(32, 32))
    data = np.tile([[0.7, -0.4]], (64, 1))
    _, trace = train_epsilon(data, s, net, 500, 64, 0.01, rng)
    assert trace[-1] < 0.5 * trace[0]


def test_training_trace_is_reproducible():
    s = make_linear_schedule(100)
    traces = []
    for _ in range(2):
        rng = np.random.default_rng(5)
        net = make_epsilon_net(2, 100, rng, hidden=(8,))
        traces.append(train_epsilon(rng.normal(size=(50, 2)), s, net, 5, 16, 0.01, rng)[1])
    assert traces[0] == traces[1]


def test_divergence_is_reported_with_trace():
    s = make_linear_schedule(100)
    rng = np.random.default_rng(6)
    net = make_epsilon_net(2, 100, rng, hidden=(8,), zero_last=False)
    with pytest.raises(DivergenceError) as info, np.errstate(all="ignore"):
        train_epsilon(rng.normal(scale=1e3, size=(64, 2)), s, net, 50, 8, 10.0, rng)
    assert not np.isfinite(info.value.trace[-1])
