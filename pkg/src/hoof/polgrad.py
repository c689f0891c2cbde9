"""Policy-gradient updaters: A2C, GAE policy gradient, truncated NPG and TRPO.

All gradients are ascent directions on the flat parameter vector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .advantage import GaeConfig, TrajectoryBatch, ValueFunction, batch_advantages, compute_gae
from .nn import (GaussianPolicy, gaussian_entropy, gaussian_kl, gaussian_kl_grads_p, log_prob,
                 log_prob_grads)


class ConjugateGradientError(ArithmeticError):
    def __init__(self, iteration: int):
        super().__init__(f"conjugate gradient broke down at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class A2cCoeffs:
    lr: float = 7e-4
    c1: float = 0.5
    c2: float = 0.01

    def __post_init__(self):
        if self.c1 < 0 or self.c2 < 0:
            raise ValueError("c1 and c2 must be nonnegative")


@dataclass(frozen=True)
class NpgConfig:
    delta: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 1e-3
    fvp_subsample: int = 1

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")


@dataclass
class UpdateResult:
    new_params: np.ndarray
    gradient_norm: float
    quadratic_form: float | None = None
    surrogate_improvement: float | None = None
    sample_kl: float | None = None
    backtracks: int = 0
    accepted: bool = True


def _require(batch: TrajectoryBatch):
    if batch.n_steps == 0:
        raise ValueError("empty trajectory batch")


def standardize(x: np.ndarray) -> np.ndarray:
    return (x - x.mean()) / (x.std() + 1e-8)


def mean_sample_kl(policy: GaussianPolicy, obs, old_params, new_params, old_out=None) -> float:
    """Mean over ``obs`` of KL(new || old)."""
    old = old_out if old_out is not None else policy.forward(old_params, obs)
    new = policy.forward(new_params, obs)
    return float(np.mean(gaussian_kl(new.mean, new.log_std, old.mean, old.log_std)))


def sample_kl_gradient(policy: GaussianPolicy, obs, old_params, new_params) -> np.ndarray:
    """Gradient of :func:`mean_sample_kl` with respect to ``new_params``."""
    old = policy.forward(old_params, obs)
    new = policy.forward(new_params, obs)
    dm, ds = gaussian_kl_grads_p(new.mean, new.log_std, old.mean, old.log_std)
    n = obs.shape[0]
    return policy.backward(new_params, new, d_mean=dm / n, d_log_std=ds / n)


def gae_policy_gradient(policy: GaussianPolicy, params, batch: TrajectoryBatch, advantages, out=None) -> np.ndarray:
    """``mean_t grad log pi(a_t|s_t) * A_t``."""
    _require(batch)
    adv = np.asarray(advantages, dtype=np.float64).reshape(-1)
    obs, act = batch.flat_obs(), batch.flat_actions()
    out = out if out is not None else policy.forward(params, obs)
    dm, ds = log_prob_grads(out.mean, out.log_std, act)
    w = (adv / adv.size)[:, None]
    return policy.backward(params, out, d_mean=dm * w, d_log_std=ds * w)


def a2c_returns(batch: TrajectoryBatch, values, last_values, gamma: float) -> np.ndarray:
    """n-step bootstrapped returns ``R_t = r_t + gamma * R_{t+1}`` with ``R_T = V(s_T)``."""
    return compute_gae(batch.rewards, values, batch.dones, last_values, gamma, 1.0) + values


@dataclass
class A2cGradient:
    """Separate blocks of the A2C ascent direction; ``combine`` is exactly linear."""

    policy: np.ndarray
    value: np.ndarray
    entropy: np.ndarray

    def combine(self, c1: float, c2: float) -> np.ndarray:
        return self.policy + c1 * self.value + c2 * self.entropy


def a2c_objective(policy: GaussianPolicy, params, batch: TrajectoryBatch, returns, coeffs: A2cCoeffs,
                  advantages=None) -> float:
    """``mean[log pi * (R - V)] - c1 * mean[(R - V)^2] + c2 * mean[H]``.

    The advantage in the policy term is held fixed (``advantages``, defaulting
    to ``R - V`` at ``params``).
    """
    out = policy.forward(params, batch.flat_obs())
    R = np.asarray(returns).reshape(-1)
    if advantages is None:
        advantages = R - out.value
    lp = log_prob(out.mean, out.log_std, batch.flat_actions())
    return float(np.mean(lp * advantages) - coeffs.c1 * np.mean((R - out.value) ** 2)
                 + coeffs.c2 * np.mean(gaussian_entropy(out.log_std)))


def a2c_gradient_parts(policy: GaussianPolicy, params, batch: TrajectoryBatch, returns) -> A2cGradient:
    _require(batch)
    if not policy.has_value:
        raise ValueError("A2C needs a policy with a value head")
    obs, act = batch.flat_obs(), batch.flat_actions()
    out = policy.forward(params, obs)
    R = np.asarray(returns, dtype=np.float64).reshape(-1)
    n = R.size
    adv = R - out.value
    g_pg = gae_policy_gradient(policy, params, batch, adv, out=out)
    g_v = policy.backward(params, out, d_value=2.0 * adv / n)
    g_h = np.zeros(policy.n_params)
    g_h[policy.log_std_slice()] = 1.0
    return A2cGradient(g_pg, g_v, g_h)


def a2c_gradient(policy: GaussianPolicy, params, batch: TrajectoryBatch, returns, coeffs: A2cCoeffs) -> np.ndarray:
    return a2c_gradient_parts(policy, params, batch, returns).combine(coeffs.c1, coeffs.c2)


def make_fvp(policy: GaussianPolicy, params, obs, damping: float = 0.0, subsample: int = 1):
    """Damped Fisher-vector product at ``params``.

    The Fisher matrix is the Hessian of ``mean_s KL(pi_old(.|s) || pi(.|s))`` at
    ``pi = pi_old``: ``J^T diag(1/sigma^2) J / N`` for the mean network plus
    ``2 I`` on the log-std block.
    """
    obs = obs[::subsample] if subsample > 1 else obs
    out = policy.forward(params, obs)
    inv_var = np.exp(-2.0 * out.log_std) / obs.shape[0]
    ls = policy.log_std_slice()

    def fvp(v):
        v = np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError("non-finite vector in Fisher-vector product")
        d_mean, d_log_std = policy.jvp_mean(params, out, v)
        res = policy.backward(params, out, d_mean=d_mean * inv_var)
        res[ls] += 2.0 * d_log_std
        return res + damping * v

    return fvp


def fisher_vector_product(policy: GaussianPolicy, params, obs, v, damping: float = 0.0) -> np.ndarray:
    return make_fvp(policy, params, obs, damping)(v)


def conjugate_gradient(avp, b, iters: int = 10, residual_tol: float = 1e-10, callback=None) -> np.ndarray:
    """Approximately solve ``A x = b`` for symmetric positive definite ``A``.

    ``callback(i, x, r)`` is invoked after every iteration.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rr = float(r @ r)
    for i in range(iters):
        if rr <= residual_tol:
            break
        ap = avp(p)
        pap = float(p @ ap)
        if not math.isfinite(pap) or pap <= 0.0:
            raise ConjugateGradientError(i)
        alpha = rr / pap
        x += alpha * p
        r -= alpha * ap
        rr_new = float(r @ r)
        if not math.isfinite(rr_new):
            raise ConjugateGradientError(i)
        if callback is not None:
            callback(i, x, r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def npg_direction(policy: GaussianPolicy, params, obs, g, cfg: NpgConfig):
    """``(x, g^T x)`` with ``x`` the truncated-CG estimate of ``I^-1 g``."""
    if not np.any(g):
        return np.zeros_like(g), 0.0
    fvp = make_fvp(policy, params, obs, cfg.cg_damping, cfg.fvp_subsample)
    x = conjugate_gradient(fvp, g, cfg.cg_iters)
    return x, float(g @ x)


def npg_step(policy: GaussianPolicy, params, obs, g, delta: float, cfg: NpgConfig = NpgConfig(),
             direction=None, measure_kl: bool = True) -> UpdateResult:
    """``params + sqrt(2 delta / g^T x) x``; a nonpositive quadratic form skips the update."""
    x, q = direction if direction is not None else npg_direction(policy, params, obs, g, cfg)
    gnorm = float(np.linalg.norm(g))
    if not q > 0.0:
        return UpdateResult(params.copy(), gnorm, q, sample_kl=0.0, accepted=False)
    new = params + math.sqrt(2.0 * delta / q) * x
    kl = mean_sample_kl(policy, obs, params, new) if measure_kl else None
    return UpdateResult(new, gnorm, q, sample_kl=kl)


def npg_update(policy: GaussianPolicy, params, batch: TrajectoryBatch, vf: ValueFunction, cfg: NpgConfig,
               gae_cfg: GaeConfig, normalize: bool = True) -> UpdateResult:
    _require(batch)
    adv, _ = batch_advantages(vf, batch, gae_cfg)
    adv = standardize(adv) if normalize else adv
    g = gae_policy_gradient(policy, params, batch, adv)
    return npg_step(policy, params, batch.flat_obs(), g, cfg.delta, cfg)


def surrogate(policy: GaussianPolicy, params, batch: TrajectoryBatch, advantages) -> float:
    """``mean[pi'(a|s) / pi_behaviour(a|s) * A]``."""
    out = policy.forward(params, batch.flat_obs())
    lp = log_prob(out.mean, out.log_std, batch.flat_actions())
    ratio = np.exp(lp - batch.log_probs.reshape(-1))
    return float(np.mean(ratio * np.asarray(advantages).reshape(-1)))


def trpo_step(policy: GaussianPolicy, params, batch: TrajectoryBatch, advantages, delta: float,
              cfg: NpgConfig = NpgConfig(), backtrack_coeff: float = 0.8, max_backtracks: int = 10,
              kl_limit: float | None = None) -> UpdateResult:
    """Backtracking line search along the NPG step.

    A point is accepted when its sample KL is at most ``kl_limit`` (``delta``
    by default) and the surrogate strictly improves; otherwise ``params`` are
    returned unchanged.
    """
    obs = batch.flat_obs()
    g = gae_policy_gradient(policy, params, batch, advantages)
    full = npg_step(policy, params, obs, g, delta, cfg, measure_kl=False)
    limit = delta if kl_limit is None else kl_limit
    if not full.accepted:
        return full
    step = full.new_params - params
    old_out = policy.forward(params, obs)
    base = surrogate(policy, params, batch, advantages)
    for i in range(max_backtracks):
        cand = params + backtrack_coeff ** i * step
        kl = mean_sample_kl(policy, obs, params, cand, old_out=old_out)
        improvement = surrogate(policy, cand, batch, advantages) - base
        if kl <= limit and improvement > 0.0:
            return UpdateResult(cand, full.gradient_norm, full.quadratic_form, improvement, kl, i)
    return UpdateResult(params.copy(), full.gradient_norm, full.quadratic_form, 0.0, 0.0, max_backtracks, False)


def trpo_update(policy: GaussianPolicy, params, batch: TrajectoryBatch, vf: ValueFunction, delta: float,
                gae_cfg: GaeConfig, backtrack_coeff: float = 0.8, max_backtracks: int = 10,
                cfg: NpgConfig = NpgConfig(), kl_limit: float | None = None, normalize: bool = True) -> UpdateResult:
    _require(batch)
    adv, _ = batch_advantages(vf, batch, gae_cfg)
    adv = standardize(adv) if normalize else adv
    return trpo_step(policy, params, batch, adv, delta, cfg, backtrack_coeff, max_backtracks, kl_limit)
