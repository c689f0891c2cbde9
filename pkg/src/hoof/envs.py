"""Desk-scale continuous-control environments.

Environments are value objects: ``reset`` and ``step`` are pure functions of
their inputs.  Batched samplers use :func:`dynamics` directly on stacked
physical states.

PointMass
    physical state ``(px, py, vx, vy)``, observation identical.  Force
    ``a`` clipped to ``[-action_bound, action_bound]^2``; ``v' = (1 - damping*dt)*v + dt*a``, ``p' = clip(p + dt*v', -2, 2)``.
    Reward ``-|p|^2 - ctrl_cost*|a|^2`` (per step in ``[-8.02, 0]``).
    Initial position uniform on ``[-1, 1]^2``, zero velocity.
Pendulum
    physical state ``(theta, theta_dot)`` with ``theta = 0`` upright,
    observation ``(cos, sin, theta_dot / max_speed)``.  Torque clipped to ``[-2, 2]``,
    speed clipped to ``[-8, 8]``.  Reward ``-(theta^2 + 0.1 theta_dot^2 + 0.001 u^2)``
    (per step in ``[-16.3, 0]``).  Initial ``theta ~ U[-pi, pi]``,
    ``theta_dot ~ U[-1, 1]``.
Lqr
    ``x' = A x + B u (+ noise)``, reward ``-(x'Qx + u'Ru)``, initial state
    uniform in the unit ball.  Actions clipped to ``[-action_bound, action_bound]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_PARAMS = {
    "pointmass": {"dt": 0.1, "ctrl_cost": 0.01, "wall": 2.0, "action_bound": 1.0, "damping": 0.0},
    "pendulum": {"dt": 0.05, "g": 10.0, "m": 1.0, "l": 1.0, "max_speed": 8.0, "max_torque": 2.0},
    "lqr": {
        "A": [[1.0, 0.1], [0.0, 1.0]],
        "B": [[0.0], [0.1]],
        "Q": [[1.0, 0.0], [0.0, 1.0]],
        "R": [[0.1]],
        "action_bound": 10.0,
        "noise_std": 0.0,
    },
}
DEFAULT_HORIZON = {"pointmass": 100, "pendulum": 200, "lqr": 50}


@dataclass(frozen=True)
class EnvSpec:
    kind: str
    state_dim: int
    action_dim: int
    horizon: int
    reward_scale: float = 1.0
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in DEFAULT_PARAMS:
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.horizon < 1 or self.state_dim < 1 or self.action_dim < 1:
            raise ValueError("horizon and dimensions must be positive")


def make_env(kind: str, horizon: int | None = None, reward_scale: float = 1.0, **overrides) -> EnvSpec:
    kind = kind.lower()
    if kind not in DEFAULT_PARAMS:
        raise ValueError(f"unknown environment kind {kind!r}")
    unknown = set(overrides) - set(DEFAULT_PARAMS[kind])
    if unknown:
        raise ValueError(f"unknown {kind} parameters {sorted(unknown)}")
    params = {**DEFAULT_PARAMS[kind], **overrides}
    if kind == "pointmass":
        obs_dim, act_dim = 4, 2
    elif kind == "pendulum":
        obs_dim, act_dim = 3, 1
    else:
        for key in ("A", "B", "Q", "R"):
            params[key] = np.atleast_2d(np.asarray(params[key], dtype=np.float64))
        obs_dim, act_dim = params["B"].shape
        if params["A"].shape != (obs_dim, obs_dim) or params["Q"].shape != (obs_dim, obs_dim):
            raise ValueError("LQR matrices A and Q must be square with the state dimension of B")
        if params["R"].shape != (act_dim, act_dim):
            raise ValueError("LQR matrix R must match the action dimension of B")
    return EnvSpec(kind, obs_dim, act_dim, horizon or DEFAULT_HORIZON[kind], reward_scale, params)


@dataclass(frozen=True)
class EnvState:
    observation: np.ndarray
    t: int
    physical: np.ndarray
    rng_state: dict | None = None
    done: bool = False


@dataclass(frozen=True)
class Transition:
    state: EnvState
    action: np.ndarray
    reward: float
    next_state: EnvState
    done: bool


def initial_physical(spec: EnvSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    if spec.kind == "pointmass":
        pos = rng.uniform(-1.0, 1.0, size=(n, 2))
        return np.concatenate([pos, np.zeros((n, 2))], axis=1)
    if spec.kind == "pendulum":
        return np.stack([rng.uniform(-math.pi, math.pi, n), rng.uniform(-1.0, 1.0, n)], axis=1)
    d = spec.state_dim
    direction = rng.standard_normal((n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / d)
    return direction * radius


def observe(spec: EnvSpec, physical: np.ndarray) -> np.ndarray:
    if spec.kind == "pendulum":
        th, thdot = physical[..., 0], physical[..., 1]
        return np.stack([np.cos(th), np.sin(th), thdot / spec.params["max_speed"]], axis=-1)
    return physical.copy()


def _angle_normalize(x):
    return ((x + math.pi) % (2 * math.pi)) - math.pi


def dynamics(spec: EnvSpec, physical: np.ndarray, action: np.ndarray, rng: np.random.Generator | None = None):
    """Vectorised transition: ``(N, d), (N, k) -> (next_physical, reward)``."""
    p = spec.params
    action = np.asarray(action, dtype=np.float64)
    if not np.all(np.isfinite(action)):
        raise ValueError("action must be finite")
    if spec.kind == "pointmass":
        a = np.clip(action, -p["action_bound"], p["action_bound"])
        pos, vel = physical[:, :2], physical[:, 2:]
        reward = -np.sum(pos * pos, axis=1) - p["ctrl_cost"] * np.sum(a * a, axis=1)
        vel = (1.0 - p["damping"] * p["dt"]) * vel + p["dt"] * a
        pos = pos + p["dt"] * vel
        hit = np.abs(pos) > p["wall"]
        pos = np.clip(pos, -p["wall"], p["wall"])
        vel = np.where(hit, 0.0, vel)
        nxt = np.concatenate([pos, vel], axis=1)
    elif spec.kind == "pendulum":
        u = np.clip(action[:, 0], -p["max_torque"], p["max_torque"])
        th, thdot = physical[:, 0], physical[:, 1]
        reward = -(_angle_normalize(th) ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2)
        g, m, l, dt = p["g"], p["m"], p["l"], p["dt"]
        thdot = thdot + (3 * g / (2 * l) * np.sin(th) + 3.0 / (m * l ** 2) * u) * dt
        thdot = np.clip(thdot, -p["max_speed"], p["max_speed"])
        nxt = np.stack([th + thdot * dt, thdot], axis=1)
    else:
        u = np.clip(action, -p["action_bound"], p["action_bound"])
        x = physical
        reward = -(np.einsum("ni,ij,nj->n", x, p["Q"], x) + np.einsum("ni,ij,nj->n", u, p["R"], u))
        nxt = x @ p["A"].T + u @ p["B"].T
        if p["noise_std"] > 0:
            if rng is None:
                raise ValueError("noisy LQR requires a random generator")
            nxt = nxt + p["noise_std"] * rng.standard_normal(nxt.shape)
    return nxt, reward * spec.reward_scale


def reset(spec: EnvSpec, seed: int) -> EnvState:
    rng = np.random.default_rng(seed)
    physical = initial_physical(spec, rng, 1)[0]
    return EnvState(observe(spec, physical), 0, physical, rng.bit_generator.state)


def step(spec: EnvSpec, state: EnvState, action) -> Transition:
    if state.done:
        raise RuntimeError("cannot step an environment whose episode is done")
    rng = None
    if state.rng_state is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state
    action = np.asarray(action, dtype=np.float64).reshape(spec.action_dim)
    nxt, reward = dynamics(spec, state.physical[None], action[None], rng)
    t = state.t + 1
    done = t >= spec.horizon
    next_state = EnvState(observe(spec, nxt[0]), t, nxt[0],
                          rng.bit_generator.state if rng is not None else None, done)
    return Transition(state, action, float(reward[0]), next_state, done)


def riccati(spec: EnvSpec, gamma: float, tol: float = 1e-10, max_iter: int = 1_000_000) -> np.ndarray:
    """Fixed point ``P`` of the discounted Riccati recursion (cost-to-go ``x'Px``)."""
    if spec.kind != "lqr":
        raise ValueError("riccati requires an LQR environment")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    A, B, Q, R = (spec.params[k] for k in ("A", "B", "Q", "R"))
    P = Q.copy()
    for _ in range(max_iter):
        with np.errstate(over="ignore", invalid="ignore"):
            BtPA = B.T @ P @ A
            gain = np.linalg.solve(R + gamma * B.T @ P @ B, BtPA)
            P_new = Q + gamma * A.T @ P @ A - gamma ** 2 * BtPA.T @ gain
        if not np.all(np.isfinite(P_new)):
            break
        if np.max(np.abs(P_new - P)) < tol:
            return 0.5 * (P_new + P_new.T)
        P = P_new
    raise ArithmeticError("Riccati iteration did not converge")


def lqr_gain(spec: EnvSpec, gamma: float) -> np.ndarray:
    """Optimal feedback ``u = -K x`` for the discounted problem."""
    P = riccati(spec, gamma)
    A, B, R = spec.params["A"], spec.params["B"], spec.params["R"]
    return gamma * np.linalg.solve(R + gamma * B.T @ P @ B, B.T @ P @ A)


def lqr_optimal_value(spec: EnvSpec, state, gamma: float) -> float:
    x = np.asarray(state.physical if isinstance(state, EnvState) else state, dtype=np.float64)
    P = riccati(spec, gamma)
    return float(-(x @ P @ x)) * spec.reward_scale

