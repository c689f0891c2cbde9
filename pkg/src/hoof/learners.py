"""Training loops: plain A2C / TNPG / TRPO and their HOOF-wrapped variants.

Every ``iterate`` call samples exactly one batch from the environment; HOOF
builds and scores all candidate updates from that single batch.
"""
from __future__ import annotations

import logging
import math
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import envs
from .advantage import GaeConfig, Sampler, ValueFunction, batch_values, compute_gae, value_targets
from .core import (HoofConfig, HyperCandidate, RunRecord, SearchSpace, WisDegeneracyError,
                   generate_candidates, select_candidate, trajectory_sample_kl, update_bounds, wis_estimate)
from .nn import GaussianPolicy, OptimizerState, clip_by_global_norm, log_prob
from .polgrad import (NpgConfig, a2c_gradient_parts, a2c_returns, gae_policy_gradient, make_fvp,
                      conjugate_gradient, npg_step, standardize, trpo_step)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class A2CConfig:
    num_envs: int = 40
    nsteps: int = 5
    gamma: float = 0.99
    lr: float = 7e-4
    lr_schedule: str = "linear"
    c1: float = 0.5
    c2: float = 0.01
    max_grad_norm: float = 0.5
    optimizer: str = "rmsprop"
    hidden: tuple = (64, 64)
    value_head: str = "shared"

    def __post_init__(self):
        if self.lr_schedule not in ("linear", "constant"):
            raise ValueError(f"unknown learning-rate schedule {self.lr_schedule!r}")


@dataclass(frozen=True)
class NPGConfig:
    method: str = "tnpg"
    num_envs: int = 10
    nsteps: int | None = None
    delta: float = 0.01
    gamma: float = 0.99
    lam: float = 0.98
    cg_iters: int = 10
    cg_damping: float = 1e-3
    fvp_subsample: int = 1
    hidden: tuple = (64, 64)
    vf_hidden: tuple = (64, 64)
    vf_lr: float = 1e-3
    vf_train_steps: int = 50
    vf_minibatch: int = 256
    conditioned_vf: bool = True
    normalize_advantages: bool = True
    backtrack_coeff: float = 0.8
    max_backtracks: int = 10

    def __post_init__(self):
        if self.method not in ("tnpg", "trpo"):
            raise ValueError(f"unknown natural-gradient method {self.method!r}")


class _Learner:
    """Shared bookkeeping: sampler, interaction counter and completed-episode returns."""

    batches_per_iteration = 1

    def __init__(self, env_spec: envs.EnvSpec, num_envs: int, nsteps: int, seed: int):
        self.env_spec = env_spec
        self.seed = seed
        ss = np.random.SeedSequence(seed)
        init_ss, sample_ss, hoof_ss, misc_ss = ss.spawn(4)
        self.init_rng = np.random.default_rng(init_ss)
        self.hoof_rng = np.random.default_rng(hoof_ss)
        self.misc_seed = int(misc_ss.generate_state(1)[0])
        self.sampler = Sampler(env_spec, num_envs, nsteps, int(sample_ss.generate_state(1)[0]))
        self.iteration = 0
        self.recent_returns: deque = deque(maxlen=num_envs)
        self.records: list[RunRecord] = []

    @property
    def env_steps(self) -> int:
        return self.sampler.env_steps

    @property
    def batch_size(self) -> int:
        return self.sampler.batch_size

    def _sample(self, params):
        batch = self.sampler.collect(self.policy, params)
        self.recent_returns.extend(batch.episode_returns)
        if self.records:
            self.records[-1].next_return = float(batch.returns.mean())
        return batch

    def _record(self, batch, t0, **kw) -> RunRecord:
        mean_ret = float(np.mean(self.recent_returns)) if self.recent_returns else math.nan
        rec = RunRecord(self.iteration, self.env_steps, mean_ret, float(batch.returns.mean()),
                        wall_time=time.perf_counter() - t0, **kw)
        self.records.append(rec)
        self.iteration += 1
        return rec

    def train(self, total_env_steps: int) -> list[RunRecord]:
        while self.env_steps + self.batches_per_iteration * self.batch_size <= total_env_steps:
            self.iterate()
        return self.records


def _score(policy, batch, old_params, old_out, cand: HyperCandidate):
    """Fill in WIS score and sample KL; degenerate weights mark a divergence."""
    obs = batch.flat_obs()
    try:
        out = policy.forward(cand.params, obs, value=False)
        lp = log_prob(out.mean, out.log_std, batch.flat_actions())
        cand.wis_score = wis_estimate(batch, lp)
        cand.sample_kl = trajectory_sample_kl(policy, batch, old_params, cand.params, old_out, out)
        return False
    except (WisDegeneracyError, FloatingPointError, ValueError):
        cand.wis_score, cand.sample_kl = -math.inf, math.inf
        return True


class A2CLearner(_Learner):
    """Synchronous A2C; HOOF tunes ``lr`` (and optionally ``c2``) when ``hoof`` is given."""

    def __init__(self, env_spec: envs.EnvSpec, cfg: A2CConfig = A2CConfig(), seed: int = 0,
                 hoof: HoofConfig | None = None, space: SearchSpace | None = None,
                 total_env_steps: int | None = None):
        super().__init__(env_spec, cfg.num_envs, cfg.nsteps, seed)
        self.cfg = cfg
        self.policy = GaussianPolicy(env_spec.state_dim, env_spec.action_dim, cfg.hidden, cfg.value_head)
        self.params = self.policy.init_params(self.init_rng)
        self.opt = OptimizerState(cfg.optimizer)
        self.hoof = hoof
        if hoof is not None:
            if hoof.mode != "first_order":
                raise ValueError("A2C uses first-order HOOF")
            self.space = space or SearchSpace.a2c_lr()
            if set(self.space.names) - {"lr", "c2"}:
                raise ValueError("HOOF-A2C tunes only lr and c2")
        self.total_env_steps = total_env_steps

    def current_lr(self) -> float:
        if self.cfg.lr_schedule == "constant" or not self.total_env_steps:
            return self.cfg.lr
        return self.cfg.lr * max(0.0, 1.0 - self.env_steps / self.total_env_steps)

    def returns(self, batch, params=None):
        params = self.params if params is None else params
        K, T = batch.n_traj, batch.horizon
        values = self.policy.forward(params, batch.flat_obs()).value.reshape(K, T)
        last = self.policy.forward(params, batch.last_obs).value
        return a2c_returns(batch, values, last, self.cfg.gamma)

    def train(self, total_env_steps: int) -> list[RunRecord]:
        if self.total_env_steps is None:
            self.total_env_steps = total_env_steps
        return super().train(total_env_steps)

    def iterate(self) -> RunRecord:
        t0 = time.perf_counter()
        lr_now = self.current_lr()
        batch = self._sample(self.params)
        parts = a2c_gradient_parts(self.policy, self.params, batch, self.returns(batch))
        if self.hoof is None:
            g = clip_by_global_norm(parts.combine(self.cfg.c1, self.cfg.c2), self.cfg.max_grad_norm)
            self.params = self.opt.step(self.params, g, lr_now)
            return self._record(batch, t0, lr=lr_now, c2=self.cfg.c2)
        return self._hoof_iterate(batch, parts, t0)

    def _hoof_iterate(self, batch, parts, t0) -> RunRecord:
        cfg, hoof = self.cfg, self.hoof
        psis = generate_candidates(self.space, hoof.n_candidates, self.hoof_rng)
        old_out = self.policy.forward(self.params, batch.flat_obs())
        directions = {}
        candidates, divergences = [], 0
        for psi in psis:
            c2 = psi.get("c2", cfg.c2)
            lr = psi.get("lr", cfg.lr)
            if c2 not in directions:
                g = clip_by_global_norm(parts.combine(cfg.c1, c2), cfg.max_grad_norm)
                directions[c2] = self.opt.preview(g)
            direction, pending = directions[c2]
            cand = HyperCandidate(dict(psi), self.params + lr * direction, extra={"pending": pending})
            divergences += _score(self.policy, batch, self.params, old_out, cand)
            cand.feasible = math.isfinite(cand.wis_score) and (
                not hoof.constrained or cand.sample_kl < hoof.kl_constraint)
            candidates.append(cand)
        eps = hoof.kl_constraint if hoof.constrained else None
        idx = select_candidate(candidates, eps)
        violations = sum(1 for c in candidates if not c.feasible) / len(candidates)
        lr_upper = self.space.lr_upper if self.space.lr_upper is not None else math.nan
        if idx is None:
            rec = self._record(batch, t0, violation_fraction=violations, lr_upper=lr_upper,
                               null_update=True, divergences=divergences)
        else:
            chosen = candidates[idx]
            self.params = chosen.params
            self.opt.commit(chosen.extra["pending"])
            rec = self._record(batch, t0, lr=chosen.psi.get("lr", cfg.lr), c2=chosen.psi.get("c2", cfg.c2),
                               wis=chosen.wis_score, sample_kl=chosen.sample_kl, violation_fraction=violations,
                               lr_upper=lr_upper, divergences=divergences)
        if hoof.constrained and hoof.dynamic_bounds:
            self.space = update_bounds(self.space, violations)
        return rec


class NPGLearner(_Learner):
    """Truncated natural policy gradient (or TRPO) with a separate value function.

    With ``hoof`` set (natural mode), each iteration tunes any of
    ``delta, gamma, lam``; the value function is then conditioned on
    ``(gamma, lambda)`` unless ``cfg.conditioned_vf`` is false.
    """

    def __init__(self, env_spec: envs.EnvSpec, cfg: NPGConfig = NPGConfig(), seed: int = 0,
                 hoof: HoofConfig | None = None, space: SearchSpace | None = None):
        nsteps = cfg.nsteps or env_spec.horizon
        super().__init__(env_spec, cfg.num_envs, nsteps, seed)
        self.cfg = cfg
        self.policy = GaussianPolicy(env_spec.state_dim, env_spec.action_dim, cfg.hidden)
        self.params = self.policy.init_params(self.init_rng)
        self.hoof = hoof
        self.space = space or (SearchSpace.tnpg() if hoof is not None else None)
        conditioned = hoof is not None and cfg.conditioned_vf and bool({"gamma", "lam"} & set(self.space.names))
        self.vf = ValueFunction(env_spec.state_dim, cfg.vf_hidden, conditioned, cfg.vf_lr,
                                cfg.vf_train_steps, cfg.vf_minibatch, seed=self.misc_seed)
        self.npg_cfg = NpgConfig(cfg.delta, cfg.cg_iters, cfg.cg_damping, cfg.fvp_subsample)
        if hoof is not None and cfg.method != "tnpg":
            raise ValueError("HOOF wraps the TNPG update")
        self.last_step = None  # step result of the latest plain iteration

    def default_gae(self) -> GaeConfig:
        return GaeConfig(self.cfg.gamma, self.cfg.lam)

    def advantages(self, batch, gae: GaeConfig):
        values, last = batch_values(self.vf, batch, gae)
        adv = compute_gae(batch.rewards, values, batch.dones, last, gae.gamma, gae.lam)
        return standardize(adv) if self.cfg.normalize_advantages else adv

    def _fit_vf(self, batch, gaes):
        x, y = value_targets(self.vf, batch, gaes)
        self.vf.fit(x, y)

    def iterate(self) -> RunRecord:
        t0 = time.perf_counter()
        batch = self._sample(self.params)
        if self.hoof is not None:
            return self._hoof_iterate(batch, t0)
        gae = self.default_gae()
        adv = self.advantages(batch, gae)
        if self.cfg.method == "trpo":
            res = trpo_step(self.policy, self.params, batch, adv, self.cfg.delta, self.npg_cfg,
                            self.cfg.backtrack_coeff, self.cfg.max_backtracks)
        else:
            g = gae_policy_gradient(self.policy, self.params, batch, adv)
            res = npg_step(self.policy, self.params, batch.flat_obs(), g, self.cfg.delta, self.npg_cfg)
        self.params = res.new_params
        self.last_step = res
        self._fit_vf(batch, [gae])
        return self._record(batch, t0, delta=self.cfg.delta, gamma=gae.gamma, lam=gae.lam,
                            sample_kl=res.sample_kl if res.sample_kl is not None else math.nan,
                            null_update=not res.accepted)

    def _hoof_iterate(self, batch, t0) -> RunRecord:
        cfg, hoof = self.cfg, self.hoof
        obs = batch.flat_obs()
        psis = generate_candidates(self.space, hoof.n_candidates, self.hoof_rng)
        old_out = self.policy.forward(self.params, obs)
        fvp = make_fvp(self.policy, self.params, obs, cfg.cg_damping, cfg.fvp_subsample)
        adv_cache = {}
        candidates, divergences = [], 0
        for psi in psis:
            gae = GaeConfig(psi.get("gamma", cfg.gamma), psi.get("lam", cfg.lam))
            delta = psi.get("delta", cfg.delta)
            if gae not in adv_cache:
                adv = self.advantages(batch, gae)
                g = gae_policy_gradient(self.policy, self.params, batch, adv, out=old_out)
                x = conjugate_gradient(fvp, g, cfg.cg_iters) if np.any(g) else np.zeros_like(g)
                adv_cache[gae] = (g, (x, float(g @ x)))
            g, direction = adv_cache[gae]
            res = npg_step(self.policy, self.params, obs, g, delta, self.npg_cfg, direction=direction,
                           measure_kl=False)
            cand = HyperCandidate(dict(psi), res.new_params)
            divergences += _score(self.policy, batch, self.params, old_out, cand)
            cand.feasible = res.accepted and math.isfinite(cand.wis_score)
            if hoof.kl_constraint is not None and hoof.mode == "first_order":
                cand.feasible = cand.feasible and cand.sample_kl < hoof.kl_constraint
            candidates.append(cand)
        idx = select_candidate(candidates)
        if self.vf.conditioned:
            gaes = [GaeConfig(p.get("gamma", cfg.gamma), p.get("lam", cfg.lam)) for p in psis]
        if idx is None:
            if not self.vf.conditioned:
                gaes = [self.default_gae()]
            self._fit_vf(batch, gaes)
            return self._record(batch, t0, null_update=True, divergences=divergences)
        chosen = candidates[idx]
        if not self.vf.conditioned:
            gaes = [GaeConfig(chosen.psi.get("gamma", cfg.gamma), chosen.psi.get("lam", cfg.lam))]
        self.params = chosen.params
        self._fit_vf(batch, gaes)
        delta = chosen.psi.get("delta", cfg.delta)
        if chosen.sample_kl > 1.5 * delta:
            log.debug("iteration %d: chosen sample KL %.4g exceeds 1.5 * delta", self.iteration, chosen.sample_kl)
        return self._record(batch, t0, delta=delta, gamma=chosen.psi.get("gamma", cfg.gamma),
                            lam=chosen.psi.get("lam", cfg.lam), wis=chosen.wis_score,
                            sample_kl=chosen.sample_kl, divergences=divergences)

