import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import solve_discrete_are
from scipy.optimize import minimize_scalar

from hoof import envs


def test_make_env_dimensions_and_validation():
    assert (envs.make_env("pointmass").state_dim, envs.make_env("pointmass").action_dim) == (4, 2)
    assert (envs.make_env("pendulum").state_dim, envs.make_env("pendulum").action_dim) == (3, 1)
    assert envs.make_env("lqr").horizon == 50
    with pytest.raises(ValueError):
        envs.make_env("cartpole")
    with pytest.raises(ValueError):
        envs.make_env("pendulum", gravity=9.8)
    with pytest.raises(ValueError):
        envs.make_env("lqr", A=[[1.0]])


def test_reset_is_deterministic_and_bounded():
    spec = envs.make_env("pointmass")
    a, b = envs.reset(spec, 0), envs.reset(spec, 0)
    assert np.array_equal(a.observation, b.observation)
    assert np.all(np.abs(a.observation[:2]) <= 1.0)
    assert np.all(a.observation[2:] == 0.0)


def test_lqr_initial_states_in_unit_ball():
    spec = envs.make_env("lqr")
    norms = [np.linalg.norm(envs.reset(spec, s).observation) for s in range(1000)]
    assert max(norms) <= 1.0
    assert min(norms) >= 0.0


def test_pointmass_fixed_point():
    spec = envs.make_env("pointmass")
    state = envs.reset(spec, 3)
    tr = envs.step(spec, state, np.zeros(2))
    pos = state.observation[:2]
    assert np.array_equal(tr.next_state.observation[:2], pos)
    assert tr.reward == pytest.approx(-float(pos @ pos))


def test_pendulum_upright_stays_near_upright():
    spec = envs.make_env("pendulum")
    state = envs.EnvState(envs.observe(spec, np.zeros(2)), 0, np.zeros(2), None)
    tr = envs.step(spec, state, np.zeros(1))
    assert np.allclose(tr.next_state.physical, 0.0, atol=1e-12)
    # slightly off upright: one Euler step of the linearised dynamics
    th = 1e-4
    state = envs.EnvState(envs.observe(spec, np.array([th, 0.0])), 0, np.array([th, 0.0]), None)
    nxt = envs.step(spec, state, np.zeros(1)).next_state.physical
    thdot = 3 * 10.0 / 2 * th * 0.05
    assert nxt[1] == pytest.approx(thdot, rel=1e-6)
    assert nxt[0] == pytest.approx(th + thdot * 0.05, rel=1e-6)


def test_lqr_transition_matches_matrix_product():
    spec = envs.make_env("lqr")
    x = np.array([0.3, -0.4])
    u = np.array([1.5])
    state = envs.EnvState(x.copy(), 0, x.copy(), None)
    tr = envs.step(spec, state, u)
    assert np.allclose(tr.next_state.physical, [0.3 + 0.1 * -0.4, -0.4 + 0.1 * 1.5])
    assert tr.reward == pytest.approx(-(0.09 + 0.16 + 0.1 * 2.25))


def test_actions_clipped_at_boundary():
    spec = envs.make_env("pointmass")
    s = envs.reset(spec, 1)
    a = envs.step(spec, s, np.array([5.0, -5.0]))
    b = envs.step(spec, s, np.array([1.0, -1.0]))
    assert np.array_equal(a.next_state.observation, b.next_state.observation)
    assert a.reward == b.reward


def test_episode_ends_at_horizon_and_cannot_continue():
    spec = envs.make_env("pointmass", horizon=3)
    s = envs.reset(spec, 0)
    for _ in range(3):
        tr = envs.step(spec, s, np.zeros(2))
        s = tr.next_state
    assert tr.done and s.t == 3
    with pytest.raises(RuntimeError):
        envs.step(spec, s, np.zeros(2))


def test_non_finite_action_rejected():
    spec = envs.make_env("pendulum")
    with pytest.raises(ValueError):
        envs.step(spec, envs.reset(spec, 0), np.array([np.nan]))


@given(st.integers(0, 2**31), st.lists(st.floats(-3, 3), min_size=20, max_size=20))
@settings(max_examples=25, deadline=None)
def test_identical_seed_and_actions_give_identical_trajectories(seed, acts):
    spec = envs.make_env("lqr", noise_std=0.1)

    def roll():
        s = envs.reset(spec, seed)
        out = []
        for a in acts:
            tr = envs.step(spec, s, np.array([a]))
            out.append((tr.next_state.observation.tobytes(), tr.reward))
            s = tr.next_state
        return out

    assert roll() == roll()


@given(st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_rewards_within_documented_bounds(seed):
    rng = np.random.default_rng(seed)
    for kind, lo in (("pointmass", -8.02), ("pendulum", -16.3)):
        spec = envs.make_env(kind)
        phys = envs.initial_physical(spec, rng, 64)
        for _ in range(spec.horizon):
            phys, r = envs.dynamics(spec, phys, rng.uniform(-3, 3, (64, spec.action_dim)))
            assert np.all(r <= 0.0) and np.all(r >= lo)


def test_lqr_zero_state_has_zero_value():
    assert envs.lqr_optimal_value(envs.make_env("lqr"), np.zeros(2), 0.9) == 0.0


def test_lqr_value_negative_for_nonzero_state():
    assert envs.lqr_optimal_value(envs.make_env("lqr"), np.array([0.5, 0.1]), 0.95) < 0.0


def test_scalar_lqr_against_value_iteration():
    spec = envs.make_env("lqr", A=[[1.0]], B=[[1.0]], Q=[[1.0]], R=[[1.0]])
    gamma = 0.9
    # value iteration on the quadratic coefficient, with numerical minimisation over u at x = 1
    p = 0.0
    for _ in range(10_000):
        res = minimize_scalar(lambda u: 1.0 + u * u + gamma * p * (1.0 + u) ** 2, bracket=(-2.0, 0.0),
                              method="brent", tol=1e-12)
        p = res.fun
    assert envs.lqr_optimal_value(spec, np.array([1.0]), gamma) == pytest.approx(-p, abs=1e-6)
    closed = (0.8 + math.sqrt(0.64 + 3.6)) / 1.8
    assert envs.riccati(spec, gamma)[0, 0] == pytest.approx(closed, abs=1e-9)


def test_riccati_matches_scipy_and_rollout():
    spec = envs.make_env("lqr")
    gamma = 0.95
    A, B, Q, R = (spec.params[k] for k in ("A", "B", "Q", "R"))
    s = math.sqrt(gamma)
    assert np.allclose(envs.riccati(spec, gamma), solve_discrete_are(s * A, s * B, Q, R / 1.0), atol=1e-8)
    K = envs.lqr_gain(spec, gamma)
    x0 = np.array([0.7, -0.2])
    x, total = x0.copy(), 0.0
    for t in range(2000):
        u = -K @ x
        total += gamma ** t * -(x @ Q @ x + u @ R @ u)
        x = A @ x + B @ u
    assert total == pytest.approx(envs.lqr_optimal_value(spec, x0, gamma), rel=1e-8)


def test_riccati_errors():
    with pytest.raises(ValueError):
        envs.riccati(envs.make_env("pendulum"), 0.9)
    with pytest.raises(ValueError):
        envs.riccati(envs.make_env("lqr"), 1.0)
    # unstabilisable: B has no effect on an expanding state, discount too weak to compensate
    spec = envs.make_env("lqr", A=[[2.0]], B=[[0.0]], Q=[[1.0]], R=[[1.0]])
    with pytest.raises(ArithmeticError):
        envs.riccati(spec, 0.9, max_iter=10_000)
