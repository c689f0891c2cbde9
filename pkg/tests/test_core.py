import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hoof import envs
from hoof.advantage import collect_batch
from hoof.core import (HoofConfig, HyperCandidate, RunRecord, SearchSpace, WisDegeneracyError, effective_sample_size,
                       generate_candidates, log_importance_weights, select_candidate, trajectory_sample_kl,
                       update_bounds, wis_estimate, wis_from_log_weights)
from hoof.learners import A2CConfig, A2CLearner, NPGConfig, NPGLearner
from hoof.nn import GaussianPolicy, gaussian_kl, log_prob


def test_search_space_validation_and_presets():
    with pytest.raises(ValueError):
        SearchSpace({"lr": (1.0, 0.0)})
    with pytest.raises(ValueError):
        SearchSpace({"momentum": (0.0, 1.0)})
    with pytest.raises(ValueError):
        SearchSpace({})
    with pytest.raises(ValueError):
        SearchSpace({"lr": (0.0, 1.0)}, nu=1.0)
    assert SearchSpace.a2c_lr().bounds == {"lr": (0.0, 1e-2)}
    assert SearchSpace.tnpg().names == ("delta", "gamma", "lam")
    assert SearchSpace.a2c_lr_c2().bounds["c2"] == (0.0, 0.2)


def test_hoof_config_validation():
    with pytest.raises(ValueError):
        HoofConfig(mode="bayesian")
    with pytest.raises(ValueError):
        HoofConfig(n_candidates=0)
    with pytest.raises(ValueError):
        HoofConfig(kl_constraint=0.0)
    assert HoofConfig().constrained and not HoofConfig(kl_constraint=None).constrained
    assert not HoofConfig(mode="natural").constrained


def test_generate_candidates():
    space = SearchSpace({"lr": (0.004, 0.004)})
    assert generate_candidates(space, 1, np.random.default_rng(0)) == [{"lr": 0.004}]
    space = SearchSpace.a2c_lr()
    cands = [c["lr"] for c in generate_candidates(space, 1000, np.random.default_rng(1))]
    assert min(cands) >= 0.0 and max(cands) <= 1e-2
    assert min(cands) < 1e-4 and max(cands) > 0.99e-2
    a = generate_candidates(SearchSpace.tnpg(), 50, np.random.default_rng(7))
    b = generate_candidates(SearchSpace.tnpg(), 50, np.random.default_rng(7))
    assert a == b and set(a[0]) == {"delta", "gamma", "lam"}
    with pytest.raises(ValueError):
        generate_candidates(space, 0, np.random.default_rng(0))


def test_wis_trivial_cases():
    R = np.array([1.0, 5.0, -2.0])
    assert wis_from_log_weights(np.zeros(3), R) == pytest.approx(R.mean(), abs=1e-15)
    assert wis_from_log_weights(np.array([7.3]), np.array([4.2])) == 4.2
    # huge log weights do not overflow
    assert wis_from_log_weights(np.array([1000.0, 990.0]), np.array([1.0, 0.0])) == pytest.approx(1 / (1 + math.exp(-10)))


def test_wis_degeneracy():
    with pytest.raises(WisDegeneracyError):
        wis_from_log_weights(np.array([-np.inf, -np.inf]), np.array([1.0, 2.0]))
    with pytest.raises(WisDegeneracyError):
        wis_from_log_weights(np.array([np.nan, 0.0]), np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        wis_from_log_weights(np.zeros(2), np.zeros(3))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_wis_is_convex_combination(log_w, seed):
    R = np.random.default_rng(seed).standard_normal(len(log_w)) * 10
    est = wis_from_log_weights(np.array(log_w), R)
    assert R.min() <= est <= R.max()


@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-100, 100))
@settings(max_examples=60, deadline=None)
def test_selection_invariant_to_affine_return_transform(seed, a, b):
    rng = np.random.default_rng(seed)
    R = rng.standard_normal(8)
    log_ws = rng.standard_normal((6, 8))
    kls = rng.uniform(0, 0.05, 6)

    def choose(returns):
        cands = [HyperCandidate({}, wis_score=wis_from_log_weights(lw, returns), sample_kl=k)
                 for lw, k in zip(log_ws, kls)]
        return select_candidate(cands, 0.03)

    assert choose(R) == choose(a * R + b)


def small_batch(seed=0):
    spec = envs.make_env("pendulum", horizon=30)
    pol = GaussianPolicy(3, 1, (8,))
    p = pol.init_params(np.random.default_rng(seed))
    return pol, p, collect_batch(pol, p, spec, 6, 30, seed)


def test_wis_of_behaviour_policy_is_batch_mean():
    pol, p, batch = small_batch()
    out = pol.forward(p, batch.flat_obs())
    lp = log_prob(out.mean, out.log_std, batch.flat_actions())
    assert wis_estimate(batch, lp) == pytest.approx(batch.returns.mean(), rel=1e-14)
    lw = log_importance_weights(batch.log_probs, lp.reshape(batch.log_probs.shape))
    assert np.allclose(lw, 0.0, atol=1e-12)
    assert effective_sample_size(lw) == pytest.approx(batch.n_traj)


def test_trajectory_sample_kl():
    pol, p, batch = small_batch()
    assert trajectory_sample_kl(pol, batch, p, p) == 0.0
    q = p.copy()
    q[pol.n_pi - 1] += 0.1   # output bias of the mean: shifts every state's mean by 0.1
    assert trajectory_sample_kl(pol, batch, p, q) == pytest.approx(0.005, rel=1e-12)


def test_trajectory_sample_kl_matches_monte_carlo():
    pol, p, batch = small_batch(1)
    rng = np.random.default_rng(3)
    q = p + 0.2 * rng.standard_normal(p.size)
    kl = trajectory_sample_kl(pol, batch, p, q)
    obs = batch.flat_obs()
    new, old = pol.forward(q, obs), pol.forward(p, obs)
    m = 400
    a = new.mean[None] + np.exp(new.log_std)[None] * rng.standard_normal((m,) + new.mean.shape)
    diff = (log_prob(new.mean[None], new.log_std[None], a) - log_prob(old.mean[None], old.log_std[None], a))
    per_draw = diff.mean(axis=1)
    se = per_draw.std() / math.sqrt(m)
    assert abs(kl - per_draw.mean()) < 3 * se
    assert kl == pytest.approx(float(np.mean(gaussian_kl(new.mean, new.log_std, old.mean, old.log_std))))


def cand(score, kl, feasible=True):
    return HyperCandidate({}, wis_score=score, sample_kl=kl, feasible=feasible)


def test_select_candidate_rules():
    assert select_candidate([cand(1.0, 0.01)], 0.03) == 0
    assert select_candidate([cand(5.0, 0.04), cand(3.0, 0.02)], 0.03) == 1
    assert select_candidate([cand(5.0, 0.04), cand(3.0, 0.05)], 0.03) is None
    # ties: smaller KL, then smaller index
    assert select_candidate([cand(2.0, 0.02), cand(2.0, 0.01), cand(2.0, 0.01)], 0.03) == 1
    # no constraint: feasibility flag decides; non-finite scores never win
    assert select_candidate([cand(9.0, 0.0, False), cand(1.0, 9.0)]) == 1
    assert select_candidate([cand(-math.inf, 0.0)]) is None
    with pytest.raises(ValueError):
        select_candidate([])


def test_update_bounds():
    s = SearchSpace.a2c_lr()
    assert update_bounds(s, 0.0).lr_upper == pytest.approx(1.25e-2)
    assert update_bounds(s, 0.9).lr_upper == pytest.approx(1e-2 / 1.25)
    assert update_bounds(s, 0.5) is s
    assert update_bounds(s, 0.8) is s
    tight = SearchSpace({"lr": (0.005, 0.005)})
    assert update_bounds(tight, 1.0).bounds["lr"] == (0.005, 0.005)
    assert update_bounds(SearchSpace.tnpg(), 0.0) == SearchSpace.tnpg()
    with pytest.raises(ValueError):
        update_bounds(s, 1.5)


def test_run_record_csv_roundtrip():
    r = RunRecord(3, 600, -1.5, -2.25, lr=0.1 + 0.2, null_update=True, divergences=2, wall_time=9.9)
    assert "wall_time" not in RunRecord.csv_fields()
    back = RunRecord.from_row(dict(zip(RunRecord.csv_fields(), r.csv_row())))
    assert back.lr == r.lr and back.null_update and back.divergences == 2
    assert math.isnan(back.delta) and back.wall_time == 0.0


def test_single_default_candidate_reproduces_plain_a2c():
    env = envs.make_env("pointmass", horizon=20)
    cfg = A2CConfig(num_envs=4, nsteps=5, hidden=(8,), lr_schedule="constant")
    plain = A2CLearner(env, cfg, seed=3)
    hoof = A2CLearner(env, cfg, seed=3, hoof=HoofConfig(n_candidates=1, kl_constraint=None),
                      space=SearchSpace({"lr": (cfg.lr, cfg.lr)}))
    plain.train(400)
    hoof.train(400)
    assert np.array_equal(plain.params, hoof.params)
    assert [r.batch_return for r in plain.records] == [r.batch_return for r in hoof.records]


def test_single_default_candidate_reproduces_plain_tnpg():
    env = envs.make_env("pendulum", horizon=20)
    cfg = NPGConfig(num_envs=3, hidden=(8,), vf_hidden=(8,), conditioned_vf=False, vf_train_steps=5)
    plain = NPGLearner(env, cfg, seed=1)
    space = SearchSpace({"delta": (0.01, 0.01), "gamma": (0.99, 0.99), "lam": (0.98, 0.98)})
    hoof = NPGLearner(env, cfg, seed=1, hoof=HoofConfig(mode="natural", n_candidates=1), space=space)
    plain.train(300)
    hoof.train(300)
    assert np.array_equal(plain.params, hoof.params)


def test_infeasible_radius_freezes_policy():
    env = envs.make_env("pointmass", horizon=20)
    cfg = A2CConfig(num_envs=4, nsteps=5, hidden=(8,))
    learner = A2CLearner(env, cfg, seed=0, hoof=HoofConfig(n_candidates=10, kl_constraint=1e-9, dynamic_bounds=False))
    p0 = learner.params.copy()
    recs = learner.train(1000)
    assert sum(r.null_update for r in recs) >= 0.9 * len(recs)
    assert np.max(np.abs(learner.params - p0)) < 1e-3


def test_dynamic_bound_shrinks_under_tiny_radius():
    env = envs.make_env("pointmass", horizon=20)
    cfg = A2CConfig(num_envs=4, nsteps=5, hidden=(8,))
    learner = A2CLearner(env, cfg, seed=0, hoof=HoofConfig(n_candidates=10, kl_constraint=1e-9))
    learner.train(1000)
    assert learner.space.lr_upper < 1e-3


def test_hoof_uses_one_batch_per_iteration():
    env = envs.make_env("pointmass", horizon=20)
    cfg = A2CConfig(num_envs=4, nsteps=5, hidden=(8,))
    for z in (1, 7, 30):
        learner = A2CLearner(env, cfg, seed=0, hoof=HoofConfig(n_candidates=z))
        recs = learner.train(200)
        assert [r.env_steps for r in recs] == [20 * (i + 1) for i in range(10)]
