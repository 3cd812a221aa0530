"""Reservoir tests: construction statistics, dynamics, ridge readout."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xsrc import rng
from xsrc.errors import ConfigError, NumericalError, UntrainedError
from xsrc.reservoir import (
    Reservoir,
    ReservoirHyperparams,
    drive,
    init_reservoir,
    readout,
    step,
    train_readout,
)


def _hp(**kw):
    base = dict(d_r=30, g=0.8, p=0.3, g_in=0.5, tau=1.0, dt_step=1.0, washout=20)
    base.update(kw)
    return ReservoirHyperparams(**base)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def test_zero_gain_gives_zero_matrix():
    res = init_reservoir(_hp(g=0.0), 4, 0, 2, seed=1)
    assert res.W.nnz == 0 or (res.W.toarray() == 0).all()


def test_weight_std_matches_target():
    # p = 1, d_r = 400, g = 1: entry std should be 1/sqrt(400) = 0.05
    res = init_reservoir(_hp(d_r=400, g=1.0, p=1.0), 3, 0, 1, seed=7)
    entries = res.W.toarray().ravel()
    assert entries.size == 160000
    sample_std = entries.std(ddof=1)
    se = 0.05 / math.sqrt(2 * (entries.size - 1))
    assert abs(sample_std - 0.05) < 3 * se


def test_density_matches_p():
    res = init_reservoir(_hp(d_r=200, p=0.1, g=1.0), 3, 0, 1, seed=3)
    density = res.W.nnz / 200**2
    # binomial(40000, 0.1): std of density ~ 0.0015
    assert abs(density - 0.1) < 0.006


def test_same_seed_identical():
    a = init_reservoir(_hp(), 5, 2, 3, seed=99)
    b = init_reservoir(_hp(), 5, 2, 3, seed=99)
    assert np.array_equal(a.W.toarray(), b.W.toarray())
    assert np.array_equal(a.W_in, b.W_in)
    c = init_reservoir(_hp(), 5, 2, 3, seed=100)
    assert not np.array_equal(c.W_in, a.W_in)


def test_input_gain_column_groups():
    a = init_reservoir(_hp(g_in=1.0, g_l=1.0), 4, 3, 2, seed=5)
    b = init_reservoir(_hp(g_in=2.0, g_l=0.25), 4, 3, 2, seed=5)
    np.testing.assert_allclose(b.W_in[:, :4], 2.0 * a.W_in[:, :4], rtol=1e-15)
    np.testing.assert_allclose(b.W_in[:, 4:], 0.25 * a.W_in[:, 4:], rtol=1e-15)


def test_invalid_hyperparameters():
    with pytest.raises(ConfigError):
        _hp(p=0.0).validate()
    with pytest.raises(ConfigError):
        _hp(dt_step=2.0, tau=1.0).validate()
    with pytest.raises(ConfigError):
        _hp(beta=-1.0).validate()
    with pytest.raises(ConfigError):
        init_reservoir(_hp(), 0, 0, 1, seed=1)


# ---------------------------------------------------------------------------
# step / drive dynamics
# ---------------------------------------------------------------------------

def test_step_fixed_point_at_origin():
    res = init_reservoir(_hp(), 3, 0, 2, seed=2)
    out = step(res, np.zeros(30), np.zeros(3))
    assert np.array_equal(out, np.zeros(30))


def test_step_pure_decay():
    # W = 0, W_in = 0, dt_step = tau: one step leaks everything
    res = init_reservoir(_hp(g=0.0, g_in=0.0), 3, 0, 2, seed=2)
    r0 = np.random.default_rng(0).normal(size=30)
    out = step(res, r0, np.ones(3))
    np.testing.assert_allclose(out, np.zeros(30), atol=1e-15)


def test_step_scalar_euler_oracle():
    # d_r = 1, W = 0: r' = r + (dt/tau) * (tanh(w_in * u) - r)
    hp = _hp(d_r=1, g=0.0, g_in=1.3, tau=4.0, dt_step=0.5)
    res = init_reservoir(hp, 1, 0, 1, seed=11)
    w = res.W_in[0, 0]
    r, u = 0.37, 1.9
    expected = r + (0.5 / 4.0) * (math.tanh(w * u) - r)
    out = step(res, np.array([r]), np.array([u]))
    assert out[0] == pytest.approx(expected, rel=1e-15)


def test_step_rejects_nonfinite():
    res = init_reservoir(_hp(), 3, 0, 2, seed=2)
    with pytest.raises(NumericalError):
        step(res, np.zeros(30), np.array([1.0, np.nan, 0.0]))


def test_drive_single_input_equals_step():
    res = init_reservoir(_hp(), 4, 0, 2, seed=8)
    u = np.array([0.3, -0.1, 0.8, 0.0])
    states = drive(res, u[None, :])
    np.testing.assert_allclose(states[0], step(res, np.zeros(30), u), rtol=1e-14)


def test_drive_constant_input_fixed_point():
    # small recurrent gain: iteration contracts to a fixed point
    res = init_reservoir(_hp(g=0.1), 3, 0, 2, seed=4)
    inputs = np.tile([0.5, -0.2, 0.1], (400, 1))
    states = drive(res, inputs)
    assert np.linalg.norm(states[-1] - states[-2]) < 1e-12


def test_drive_noise_determinism():
    res = init_reservoir(_hp(), 3, 0, 2, seed=4)
    inputs = np.random.default_rng(1).normal(size=(50, 3))
    a = drive(res, inputs, noise_std=0.1, noise_rng=rng.stream(123, "noise"))
    b = drive(res, inputs, noise_std=0.1, noise_rng=rng.stream(123, "noise"))
    assert np.array_equal(a, b)
    c = drive(res, inputs, noise_std=0.1, noise_rng=rng.stream(124, "noise"))
    assert not np.array_equal(a, c)


def test_drive_requires_rng_with_noise():
    res = init_reservoir(_hp(), 3, 0, 2, seed=4)
    with pytest.raises(ConfigError):
        drive(res, np.zeros((5, 3)), noise_std=0.1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.1, 5.0))
def test_boundedness_invariant(seed, scale):
    # dt_step <= tau keeps |r_i| <= max(|r_i(0)|, 1)
    gen = np.random.default_rng(seed)
    hp = _hp(d_r=20, g=1.5, g_in=2.0, tau=1.0, dt_step=1.0)
    res = init_reservoir(hp, 3, 0, 2, seed=seed % 1000)
    r0 = gen.normal(0, scale, 20)
    inputs = gen.normal(0, scale, (60, 3))
    states = drive(res, inputs, initial_state=r0)
    bound = max(1.0, np.abs(r0).max()) + 1e-12
    assert np.abs(states).max() <= bound


def test_echo_state_contraction():
    # two different initial states converge under a shared drive
    hp = _hp(d_r=60, g=0.8, g_in=0.6, p=0.2, washout=100)
    res = init_reservoir(hp, 4, 0, 2, seed=21)
    inputs = np.random.default_rng(5).normal(0, 0.5, (100, 4))
    gen = np.random.default_rng(6)
    sa = drive(res, inputs, initial_state=gen.normal(0, 0.8, 60))
    sb = drive(res, inputs, initial_state=gen.normal(0, 0.8, 60))
    gap = np.linalg.norm(sa[-1] - sb[-1])
    assert gap < 1e-6


# ---------------------------------------------------------------------------
# ridge readout
# ---------------------------------------------------------------------------

def test_ridge_exact_recovery():
    gen = np.random.default_rng(42)
    S = gen.normal(size=(10, 50))
    A = gen.normal(size=(3, 10))
    W_out = train_readout(S, A @ S, beta=0.0)
    assert np.linalg.norm(W_out - A) / np.linalg.norm(A) < 1e-8


def test_ridge_regularizer_dominance():
    gen = np.random.default_rng(1)
    S = gen.normal(size=(8, 100))
    V = gen.normal(size=(2, 100))
    W_out = train_readout(S, V, beta=1e12)
    assert np.linalg.norm(W_out) < 1e-6


def test_ridge_scalar_closed_form():
    gen = np.random.default_rng(2)
    s = gen.normal(size=(1, 30))
    v = gen.normal(size=(1, 30))
    beta = 0.37
    expected = float((s * v).sum() / ((s**2).sum() + beta))
    W_out = train_readout(s, v, beta)
    assert W_out[0, 0] == pytest.approx(expected, rel=1e-12)


def test_ridge_matches_normal_equation_oracle():
    gen = np.random.default_rng(3)
    for _ in range(5):
        d_r, d_out, n = gen.integers(2, 30), gen.integers(1, 6), gen.integers(40, 120)
        S = gen.normal(size=(d_r, n))
        V = gen.normal(size=(d_out, n))
        beta = float(gen.uniform(1e-8, 1.0))
        oracle = np.linalg.solve(S @ S.T + beta * np.eye(d_r), S @ V.T).T
        got = train_readout(S, V, beta)
        np.testing.assert_allclose(got, oracle, rtol=1e-9, atol=1e-11)


def test_ridge_singular_advises_beta():
    S = np.zeros((4, 10))
    S[0] = 1.0  # rank 1, beta = 0: singular normal equations
    with pytest.raises(NumericalError, match="beta > 0"):
        train_readout(S, np.ones((1, 10)), beta=0.0)


def test_ridge_optimality_under_perturbation():
    gen = np.random.default_rng(9)
    S = gen.normal(size=(6, 80))
    V = gen.normal(size=(2, 80))
    beta = 0.05
    W = train_readout(S, V, beta)

    def objective(M):
        return np.linalg.norm(V - M @ S) ** 2 + beta * np.linalg.norm(M) ** 2

    base = objective(W)
    for (i, j) in [(0, 0), (1, 3), (0, 5), (1, 1)]:
        for delta in (1e-3, -1e-3):
            P = W.copy()
            P[i, j] += delta
            assert objective(P) >= base


# ---------------------------------------------------------------------------
# readout
# ---------------------------------------------------------------------------

def _trained(seed=0):
    res = init_reservoir(_hp(), 3, 0, 4, seed=seed)
    gen = np.random.default_rng(seed)
    res.W_out = gen.normal(size=(4, 30))
    return res


def test_readout_untrained():
    res = init_reservoir(_hp(), 3, 0, 4, seed=0)
    with pytest.raises(UntrainedError):
        readout(res, np.zeros(30))


def test_readout_zero_and_basis():
    res = _trained()
    res.W_out = np.zeros((4, 30))
    assert (readout(res, np.ones(30)) == 0).all()
    res = _trained(3)
    e = np.zeros(30)
    e[17] = 1.0
    np.testing.assert_array_equal(readout(res, e), res.W_out[:, 17])


def test_readout_dot_product_oracle():
    res = _trained(7)
    state = np.random.default_rng(8).normal(size=30)
    expected = np.array(
        [sum(res.W_out[i, k] * state[k] for k in range(30)) for i in range(4)]
    )
    np.testing.assert_allclose(readout(res, state), expected, rtol=1e-12)
