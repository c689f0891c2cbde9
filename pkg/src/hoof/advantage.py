"""Trajectory batches, returns, GAE and (gamma, lambda)-conditioned value functions."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import envs
from .nn import GaussianPolicy, Mlp, MlpSpec, OptimizerState, log_prob


@dataclass(frozen=True)
class GaeConfig:
    gamma: float = 0.99
    lam: float = 0.98

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


@dataclass
class TrajectoryBatch:
    """K equal-length trajectories (segments) laid out as ``(K, T, ...)`` arrays.

    ``dones[k, t]`` marks that the episode ended after step ``t`` (the env was
    reset); ``last_obs`` is the observation following the final step of each
    segment and is used for bootstrapping when the segment was truncated.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray
    dones: np.ndarray
    last_obs: np.ndarray
    episode_returns: list = field(default_factory=list)

    def __post_init__(self):
        k, t = self.rewards.shape
        if self.obs.shape[:2] != (k, t) or self.actions.shape[:2] != (k, t):
            raise ValueError("batch arrays are misaligned")
        if self.log_probs.shape != (k, t) or self.dones.shape != (k, t):
            raise ValueError("batch arrays are misaligned")
        if not np.all(np.isfinite(self.log_probs)):
            raise ValueError("behaviour log-probs must be finite")

    @property
    def n_traj(self) -> int:
        return self.rewards.shape[0]

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]

    @property
    def n_steps(self) -> int:
        return self.rewards.size

    @property
    def returns(self) -> np.ndarray:
        """Undiscounted return of each trajectory."""
        return self.rewards.sum(axis=1)

    def flat_obs(self) -> np.ndarray:
        return self.obs.reshape(self.n_steps, -1)

    def flat_actions(self) -> np.ndarray:
        return self.actions.reshape(self.n_steps, -1)

    def to_csv(self, path) -> None:
        """One row per step: traj, t, obs_*, act_*, reward, behavior_log_prob, done."""
        od, ad = self.obs.shape[2], self.actions.shape[2]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["traj", "t", *[f"obs_{i}" for i in range(od)], *[f"act_{i}" for i in range(ad)],
                        "reward", "behavior_log_prob", "done"])
            for k in range(self.n_traj):
                for t in range(self.horizon):
                    w.writerow([k, t, *map(repr, self.obs[k, t].tolist()), *map(repr, self.actions[k, t].tolist()),
                                repr(float(self.rewards[k, t])), repr(float(self.log_probs[k, t])),
                                int(self.dones[k, t])])


class Sampler:
    """Steps ``num_envs`` environment copies for ``nsteps`` per call, keeping
    environment state across calls (A2C style).  With ``nsteps`` equal to the
    horizon every segment is exactly one episode.
    """

    def __init__(self, spec: envs.EnvSpec, num_envs: int, nsteps: int, seed: int):
        if num_envs < 1 or nsteps < 1:
            raise ValueError("num_envs and nsteps must be positive")
        self.spec = spec
        self.num_envs, self.nsteps = num_envs, nsteps
        ss = np.random.SeedSequence(seed)
        reset_ss, act_ss, noise_ss = ss.spawn(3)
        self.reset_rng = np.random.default_rng(reset_ss)
        self.action_rng = np.random.default_rng(act_ss)
        self.noise_rng = np.random.default_rng(noise_ss)
        self.physical = envs.initial_physical(spec, self.reset_rng, num_envs)
        self.t = np.zeros(num_envs, dtype=int)
        self.running = np.zeros(num_envs)
        self.env_steps = 0

    @property
    def batch_size(self) -> int:
        return self.num_envs * self.nsteps

    def collect(self, policy: GaussianPolicy, params: np.ndarray) -> TrajectoryBatch:
        spec, n, T = self.spec, self.num_envs, self.nsteps
        obs = np.empty((n, T, spec.state_dim))
        actions = np.empty((n, T, spec.action_dim))
        rewards = np.empty((n, T))
        logp = np.empty((n, T))
        dones = np.zeros((n, T), dtype=bool)
        finished = []
        for t in range(T):
            o = envs.observe(spec, self.physical)
            out = policy.forward(params, o)
            noise = self.action_rng.standard_normal(out.mean.shape)
            a = out.mean + np.exp(out.log_std) * noise
            obs[:, t], actions[:, t] = o, a
            logp[:, t] = log_prob(out.mean, out.log_std, a)
            self.physical, r = envs.dynamics(spec, self.physical, a, self.noise_rng)
            rewards[:, t] = r
            self.running += r
            self.t += 1
            done = self.t >= spec.horizon
            dones[:, t] = done
            if np.any(done):
                idx = np.flatnonzero(done)
                finished.extend(self.running[idx].tolist())
                self.physical[idx] = envs.initial_physical(spec, self.reset_rng, idx.size)
                self.t[idx] = 0
                self.running[idx] = 0.0
        self.env_steps += n * T
        return TrajectoryBatch(obs, actions, rewards, logp, dones, envs.observe(spec, self.physical), finished)


def collect_batch(policy, params, spec: envs.EnvSpec, num_envs: int, nsteps: int, seed: int) -> TrajectoryBatch:
    return Sampler(spec, num_envs, nsteps, seed).collect(policy, params)


def discounted_return(rewards, gamma: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    rewards = np.asarray(rewards, dtype=np.float64)
    return float(np.sum(rewards * gamma ** np.arange(rewards.size)))


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float) -> np.ndarray:
    """Recursive GAE over the last axis.

    ``delta_t = r_t + gamma * V(s_{t+1}) * (1 - done_t) - V(s_t)`` and
    ``A_t = delta_t + gamma * lam * (1 - done_t) * A_{t+1}``; the value after
    the final step is ``last_values``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    last_values = np.asarray(last_values, dtype=np.float64)
    if values.shape != rewards.shape or dones.shape != rewards.shape:
        raise ValueError("rewards, values and dones must have the same shape")
    if last_values.shape != rewards.shape[:-1]:
        raise ValueError("last_values must have one entry per trajectory")
    T = rewards.shape[-1]
    adv = np.empty_like(rewards)
    running = np.zeros(rewards.shape[:-1])
    next_value = last_values
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[..., t]
        delta = rewards[..., t] + gamma * next_value * nonterminal - values[..., t]
        running = delta + gamma * lam * nonterminal * running
        adv[..., t] = running
        next_value = values[..., t]
    return adv


def _scale_unit(x):
    return 2.0 * np.asarray(x, dtype=np.float64) - 1.0


class ValueFunction:
    """MLP state-value regressor, optionally conditioned on ``(gamma, lambda)``.

    Conditioned inputs are ``(s, 2*gamma - 1, 2*lambda - 1)``.  The network
    predicts standardised targets; when the target statistics move, the output
    layer is rescaled so existing predictions are preserved.
    """

    def __init__(self, obs_dim: int, hidden=(64, 64), conditioned: bool = False, lr: float = 1e-3,
                 train_steps: int = 50, minibatch: int = 256, seed: int = 0):
        self.obs_dim = obs_dim
        self.conditioned = conditioned
        self.net = Mlp(MlpSpec(obs_dim + (2 if conditioned else 0), 1, tuple(hidden)))
        self.rng = np.random.default_rng(seed)
        self.params = self.net.init_params(self.rng, out_scale=1.0)
        self.opt = OptimizerState("adam")
        self.lr, self.train_steps, self.minibatch = lr, train_steps, minibatch
        self.loss_history: list[float] = []
        self.target_mean, self.target_std = 0.0, 1.0
        self.stats_decay = 0.9
        self._fitted = False

    def inputs(self, obs, gamma=None, lam=None) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        if not self.conditioned:
            return obs
        if gamma is None or lam is None:
            raise ValueError("a conditioned value function needs gamma and lambda")
        n = obs.shape[0]
        g = np.broadcast_to(_scale_unit(gamma), (n,))
        l = np.broadcast_to(_scale_unit(lam), (n,))
        return np.column_stack([obs, g, l])

    def predict(self, obs, gamma=None, lam=None) -> np.ndarray:
        out, _ = self.net.forward(self.params, self.inputs(obs, gamma, lam))
        return out[:, 0] * self.target_std + self.target_mean

    def _update_stats(self, y):
        mu, sd = float(np.mean(y)), float(np.std(y)) + 1e-6
        if self._fitted:
            k = self.stats_decay
            mu, sd = k * self.target_mean + (1 - k) * mu, k * self.target_std + (1 - k) * sd
        w, b = list(self.net.layers(self.params))[-1]
        w *= self.target_std / sd
        b[:] = (b * self.target_std + self.target_mean - mu) / sd
        self.target_mean, self.target_std = mu, sd
        self._fitted = True

    def fit(self, x: np.ndarray, y: np.ndarray, steps: int | None = None) -> list[float]:
        """Minimise mean squared error with Adam minibatches; returns per-step losses."""
        if x.shape[0] == 0:
            raise ValueError("cannot fit a value function on an empty batch")
        losses = []
        steps = self.train_steps if steps is None else steps
        n = x.shape[0]
        self._update_stats(y)
        y_norm = (y - self.target_mean) / self.target_std
        for _ in range(steps):
            idx = self.rng.integers(0, n, size=min(self.minibatch, n))
            pred, cache = self.net.forward(self.params, x[idx])
            err = pred[:, 0] - y_norm[idx]
            losses.append(float(np.mean(err * err)))
            grad = self.net.backward(self.params, cache, (-2.0 / idx.size * err)[:, None])
            self.params = self.opt.step(self.params, grad, self.lr)
        self.loss_history.extend(losses)
        return losses

    def loss(self, x, y) -> float:
        """Mean squared error in the original target units."""
        pred, _ = self.net.forward(self.params, x)
        return float(np.mean((pred[:, 0] * self.target_std + self.target_mean - y) ** 2))


def batch_values(vf: ValueFunction, batch: TrajectoryBatch, cfg: GaeConfig):
    """Value predictions ``(K, T)`` and bootstrap values ``(K,)`` for one (gamma, lambda)."""
    v = vf.predict(batch.flat_obs(), cfg.gamma, cfg.lam).reshape(batch.n_traj, batch.horizon)
    last = vf.predict(batch.last_obs, cfg.gamma, cfg.lam)
    return v, last


def batch_advantages(vf: ValueFunction, batch: TrajectoryBatch, cfg: GaeConfig):
    values, last = batch_values(vf, batch, cfg)
    return compute_gae(batch.rewards, values, batch.dones, last, cfg.gamma, cfg.lam), values


def value_targets(vf: ValueFunction, batch: TrajectoryBatch, cfgs) -> tuple[np.ndarray, np.ndarray]:
    """Regression inputs and targets ``V(s) + A^GAE`` for every (gamma, lambda) in ``cfgs``."""
    xs, ys = [], []
    for cfg in cfgs:
        adv, values = batch_advantages(vf, batch, cfg)
        xs.append(vf.inputs(batch.flat_obs(), cfg.gamma, cfg.lam))
        ys.append((values + adv).ravel())
    return np.concatenate(xs), np.concatenate(ys)


def train_conditioned_vf(vf: ValueFunction, batch: TrajectoryBatch, samples, steps: int | None = None) -> ValueFunction:
    if batch.n_steps == 0:
        raise ValueError("cannot train on an empty batch")
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one (gamma, lambda) sample")
    x, y = value_targets(vf, batch, samples)
    vf.fit(x, y, steps)
    return vf


def predict_value(vf: ValueFunction, state, gamma: float, lam: float) -> float:
    GaeConfig(gamma, lam)
    return float(vf.predict(np.atleast_2d(state), gamma, lam)[0])
