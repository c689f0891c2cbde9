import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hoof import envs
from hoof.advantage import (GaeConfig, Sampler, TrajectoryBatch, ValueFunction, collect_batch, compute_gae,
                            discounted_return, predict_value, train_conditioned_vf, value_targets)
from hoof.nn import GaussianPolicy, log_prob


def direct_gae(r, v, v_last, gamma, lam):
    """Weighted sum of k-step advantages, ``(1 - lam) sum_k lam^(k-1) A^(k)`` with the tail
    weight ``lam^(T-t-1)`` on the longest available estimate."""
    T = len(r)
    vs = np.append(v, v_last)
    out = np.empty(T)
    for t in range(T):
        n = T - t
        ks = []
        for k in range(1, n + 1):
            ks.append(sum(gamma ** i * r[t + i] for i in range(k)) + gamma ** k * vs[t + k] - v[t])
        w = [(1 - lam) * lam ** (k - 1) for k in range(1, n)] + [lam ** (n - 1)]
        out[t] = float(np.dot(w, ks))
    return out


@given(st.integers(1, 12), st.floats(0, 1), st.floats(0, 1), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_recursive_gae_matches_direct_sum(T, gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r, v, vl = rng.standard_normal(T), rng.standard_normal(T), rng.standard_normal()
    adv = compute_gae(r[None], v[None], np.zeros((1, T), bool), np.array([vl]), gamma, lam)[0]
    assert np.max(np.abs(adv - direct_gae(r, v, vl, gamma, lam))) < 1e-10


def test_gae_lambda_zero_is_td_residual():
    rng = np.random.default_rng(0)
    r, v = rng.standard_normal((2, 7)), rng.standard_normal((2, 7))
    last = rng.standard_normal(2)
    adv = compute_gae(r, v, np.zeros((2, 7), bool), last, 0.9, 0.0)
    nxt = np.concatenate([v[:, 1:], last[:, None]], axis=1)
    assert np.allclose(adv, r + 0.9 * nxt - v, atol=1e-14)


def test_gae_lambda_one_gamma_one_zero_values_is_return_to_go():
    r = np.array([[1.0, 2.0, -0.5, 4.0]])
    dones = np.array([[False, False, False, True]])
    adv = compute_gae(r, np.zeros_like(r), dones, np.array([123.0]), 1.0, 1.0)
    assert np.allclose(adv, [[6.5, 5.5, 3.5, 4.0]])


def test_gae_stops_at_episode_boundary():
    r = np.ones((1, 4))
    dones = np.array([[False, True, False, False]])
    adv = compute_gae(r, np.zeros((1, 4)), dones, np.array([0.0]), 1.0, 1.0)
    assert np.allclose(adv, [[2.0, 1.0, 2.0, 1.0]])


def test_gae_rejects_misaligned():
    with pytest.raises(ValueError):
        compute_gae(np.zeros((1, 3)), np.zeros((1, 2)), np.zeros((1, 3), bool), np.zeros(1), 0.9, 0.9)
    with pytest.raises(ValueError):
        compute_gae(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3), bool), np.zeros(2), 0.9, 0.9)


def test_discounted_return():
    assert discounted_return([3.0, 5.0], 0.0) == 3.0
    assert discounted_return([1.0, 1.0, 1.0], 0.5) == 1.75
    r = np.random.default_rng(0).standard_normal(20)
    horner = 0.0
    for x in r[::-1]:
        horner = x + 0.97 * horner
    assert abs(discounted_return(r, 0.97) - horner) < 1e-12
    with pytest.raises(ValueError):
        discounted_return([1.0], 1.5)


def test_gae_config_ranges():
    with pytest.raises(ValueError):
        GaeConfig(1.1, 0.9)
    with pytest.raises(ValueError):
        GaeConfig(0.9, -0.1)


def _policy(spec, seed=0):
    pol = GaussianPolicy(spec.state_dim, spec.action_dim, (8, 8))
    return pol, pol.init_params(np.random.default_rng(seed))


def test_collect_batch_is_deterministic_and_replayable():
    spec = envs.make_env("pointmass")
    pol, p = _policy(spec)
    a = collect_batch(pol, p, spec, 3, 100, seed=5)
    b = collect_batch(pol, p, spec, 3, 100, seed=5)
    assert np.array_equal(a.obs, b.obs) and np.array_equal(a.actions, b.actions)
    assert a.horizon == 100 and a.dones[:, -1].all() and not a.dones[:, :-1].any()
    out = pol.forward(p, a.flat_obs())
    replay = log_prob(out.mean, out.log_std, a.flat_actions())
    assert np.max(np.abs(replay - a.log_probs.ravel())) < 1e-12
    assert np.allclose(a.returns, a.episode_returns)


def test_sampler_carries_state_and_counts_steps():
    spec = envs.make_env("pointmass", horizon=10)
    pol, p = _policy(spec)
    s = Sampler(spec, num_envs=4, nsteps=3, seed=0)
    batches = [s.collect(pol, p) for _ in range(4)]
    assert s.env_steps == 4 * 4 * 3
    # the second segment continues where the first stopped
    assert not np.array_equal(batches[1].obs[:, 0], batches[0].obs[:, 0])
    assert np.array_equal(batches[0].last_obs, batches[1].obs[:, 0])
    # episode of 10 steps ends inside the fourth segment (steps 9..11)
    assert batches[3].dones[:, 0].all()
    assert len(batches[3].episode_returns) == 4


def test_batch_validation():
    with pytest.raises(ValueError):
        TrajectoryBatch(np.zeros((2, 3, 1)), np.zeros((2, 3, 1)), np.zeros((2, 3)), np.full((2, 3), np.nan),
                        np.zeros((2, 3), bool), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        TrajectoryBatch(np.zeros((2, 4, 1)), np.zeros((2, 3, 1)), np.zeros((2, 3)), np.zeros((2, 3)),
                        np.zeros((2, 3), bool), np.zeros((2, 1)))


def test_batch_csv_layout(tmp_path):
    spec = envs.make_env("pendulum", horizon=4)
    pol, p = _policy(spec)
    b = collect_batch(pol, p, spec, 2, 4, seed=0)
    b.to_csv(tmp_path / "b.csv")
    with open(tmp_path / "b.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    assert list(rows[0]) == ["traj", "t", "obs_0", "obs_1", "obs_2", "act_0", "reward", "behavior_log_prob", "done"]
    assert float(rows[5]["reward"]) == b.rewards[1, 1]


def chain_batch(T=300):
    """Deterministic cycle 0 -> 1 -> 2 -> 0 with one-hot states and reward 1 on leaving state 0."""
    r = np.array([1.0, 0.0, 0.0])
    states = (np.arange(3)[:, None] + np.arange(T)[None]) % 3
    eye = np.eye(3)
    batch = TrajectoryBatch(eye[states], np.zeros((3, T, 1)), r[states], np.zeros((3, T)), np.zeros((3, T), bool),
                            eye[(np.arange(3) + T) % 3])
    return batch, r, np.roll(eye, 1, axis=1)


def test_constant_reward_gamma_zero_target():
    T = 20
    batch = TrajectoryBatch(np.random.default_rng(0).standard_normal((4, T, 2)), np.zeros((4, T, 1)),
                            np.ones((4, T)), np.zeros((4, T)), np.zeros((4, T), bool), np.zeros((4, 2)))
    vf = ValueFunction(2, (16,), conditioned=True, seed=0)
    for _ in range(20):
        train_conditioned_vf(vf, batch, [GaeConfig(0.0, 0.5)], steps=100)
    pred = vf.predict(batch.flat_obs(), 0.0, 0.5)
    assert np.max(np.abs(pred - 1.0)) < 0.1


def test_conditioned_vf_separates_discounts_on_chain():
    batch, r, P = chain_batch()
    vf = ValueFunction(3, (32, 32), conditioned=True, seed=0)
    samples = [GaeConfig(0.9, 1.0), GaeConfig(0.99, 1.0)]
    for _ in range(20):
        train_conditioned_vf(vf, batch, samples, steps=100)
    for g in (0.9, 0.99):
        truth = np.linalg.solve(np.eye(3) - g * P, r)
        pred = [predict_value(vf, np.eye(3)[s], g, 1.0) for s in range(3)]
        assert np.max(np.abs(pred - truth)) < 0.05


def test_vf_fit_decreases_loss_and_keeps_predictions_on_rescale():
    batch, _, _ = chain_batch(50)
    vf = ValueFunction(3, (16,), conditioned=True, seed=1)
    x, y = value_targets(vf, batch, [GaeConfig(0.95, 0.9)])
    before = vf.loss(x, y)
    vf.fit(x, y, steps=200)
    assert vf.loss(x, y) < before
    pred = vf.predict(x[:, :3], 0.95, 0.9)
    vf._update_stats(10.0 * y + 3.0)
    assert np.allclose(vf.predict(x[:, :3], 0.95, 0.9), pred, atol=1e-10)


def test_vf_input_checks():
    vf = ValueFunction(3, (8,), conditioned=True)
    with pytest.raises(ValueError):
        vf.predict(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        vf.fit(np.zeros((0, 5)), np.zeros(0))
    with pytest.raises(ValueError):
        predict_value(vf, np.zeros(3), 1.2, 0.5)
    batch, _, _ = chain_batch(5)
    with pytest.raises(ValueError):
        train_conditioned_vf(vf, batch, [])


@given(st.floats(0, 1), st.floats(0, 1))
@settings(max_examples=30, deadline=None)
def test_untrained_vf_is_finite_everywhere(g, l):
    vf = ValueFunction(3, (8, 8), conditioned=True, seed=0)
    v = predict_value(vf, np.array([0.5, -1.0, 2.0]), g, l)
    assert np.isfinite(v)
    assert v == predict_value(vf, np.array([0.5, -1.0, 2.0]), g, l)
