"""Small tanh MLPs with hand-written reverse (and forward) mode differentiation.

Everything works on flat float64 parameter vectors so that learners can form
candidate policies as ``params + step`` without touching network objects.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    layer_widths: tuple[int, ...] = (64, 64)
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if not self.layer_widths:
            raise ValueError("an MLP needs at least one hidden layer")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.layer_widths, self.output_dim)

    @property
    def n_params(self) -> int:
        s = self.sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))


class Mlp:
    """Fully connected tanh network with a linear output layer.

    Layout of the flat vector: for each layer, the weight matrix (fan_in x
    fan_out, row-major) followed by its bias.
    """

    def __init__(self, spec: MlpSpec):
        self.spec = spec
        self._slices = []
        offset = 0
        s = spec.sizes
        for i in range(len(s) - 1):
            nw = s[i] * s[i + 1]
            self._slices.append(((offset, offset + nw), (offset + nw, offset + nw + s[i + 1]), (s[i], s[i + 1])))
            offset += nw + s[i + 1]
        self.n_params = offset

    def layers(self, params):
        for (w0, w1), (b0, b1), shape in self._slices:
            yield params[w0:w1].reshape(shape), params[b0:b1]

    def init_params(self, rng: np.random.Generator, out_scale: float = 0.01) -> np.ndarray:
        params = np.zeros(self.n_params)
        n_layers = len(self._slices)
        for i, ((w0, w1), _, (fan_in, fan_out)) in enumerate(self._slices):
            bound = 1.0 / math.sqrt(fan_in)
            if i == n_layers - 1:
                bound *= out_scale
            params[w0:w1] = rng.uniform(-bound, bound, size=fan_in * fan_out)
        return params

    def forward(self, params: np.ndarray, x: np.ndarray):
        """Return ``(output, cache)``; ``x`` is ``(N, input_dim)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected input of shape (N, {self.spec.input_dim}), got {x.shape}")
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        acts = [x]
        h = x
        layers = list(self.layers(params))
        for i, (w, b) in enumerate(layers):
            z = h @ w + b
            h = np.tanh(z) if i < len(layers) - 1 else z
            acts.append(h)
        return h, acts

    def backward(self, params: np.ndarray, cache, grad_out: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product: d(sum(grad_out * output))/d(params)."""
        grad = np.empty(self.n_params)
        layers = list(self.layers(params))
        delta = np.asarray(grad_out, dtype=np.float64)
        for i in range(len(layers) - 1, -1, -1):
            (w0, w1), (b0, b1), _ = self._slices[i]
            h_in = cache[i]
            grad[w0:w1] = (h_in.T @ delta).ravel()
            grad[b0:b1] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ layers[i][0].T) * (1.0 - cache[i] ** 2)
        return grad

    def jvp(self, params: np.ndarray, cache, tangent: np.ndarray) -> np.ndarray:
        """Jacobian-vector product: directional derivative of the output."""
        layers = list(self.layers(params))
        dh = np.zeros_like(cache[0])
        for i, ((w, _), (dw, db)) in enumerate(zip(layers, self.layers(tangent))):
            dz = dh @ w + cache[i] @ dw + db
            dh = dz * (1.0 - cache[i + 1] ** 2) if i < len(layers) - 1 else dz
        return dh


@dataclass
class PolicyOutput:
    mean: np.ndarray
    log_std: np.ndarray
    value: np.ndarray | None
    caches: dict = field(repr=False, default_factory=dict)


class GaussianPolicy:
    """Diagonal-Gaussian policy, optionally carrying a value head.

    ``value_head`` is ``None`` (policy only), ``"shared"`` (policy mean and
    value are linear heads on one trunk) or ``"separate"`` (independent value
    MLP).  The state-independent log-std vector sits at the end of the flat
    parameter vector.
    """

    def __init__(self, obs_dim: int, act_dim: int, hidden=(64, 64), value_head: str | None = None,
                 init_log_std: float = 0.0):
        if value_head not in (None, "shared", "separate"):
            raise ValueError(f"unknown value_head {value_head!r}")
        self.obs_dim, self.act_dim = int(obs_dim), int(act_dim)
        self.hidden = tuple(hidden)
        self.value_head = value_head
        self.init_log_std = init_log_std
        out = act_dim + 1 if value_head == "shared" else act_dim
        self.pi_net = Mlp(MlpSpec(obs_dim, out, self.hidden))
        self.v_net = Mlp(MlpSpec(obs_dim, 1, self.hidden)) if value_head == "separate" else None
        self.n_pi = self.pi_net.n_params
        self.n_v = self.v_net.n_params if self.v_net else 0
        self.n_params = self.n_pi + self.n_v + act_dim

    @property
    def has_value(self) -> bool:
        return self.value_head is not None

    def split(self, params):
        return params[: self.n_pi], params[self.n_pi: self.n_pi + self.n_v], params[self.n_pi + self.n_v:]

    def log_std_slice(self) -> slice:
        return slice(self.n_pi + self.n_v, self.n_params)

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        parts = [self.pi_net.init_params(rng)]
        if self.v_net is not None:
            parts.append(self.v_net.init_params(rng, out_scale=1.0))
        parts.append(np.full(self.act_dim, self.init_log_std))
        return np.concatenate(parts)

    def forward(self, params: np.ndarray, obs: np.ndarray, value: bool = True) -> PolicyOutput:
        """Policy (and value) outputs; ``value=False`` skips a separate value network."""
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise FloatingPointError("non-finite policy parameters")
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        p_pi, p_v, log_std = self.split(params)
        out, pi_cache = self.pi_net.forward(p_pi, obs)
        caches = {"pi": pi_cache}
        v = None
        if self.value_head == "shared":
            mean, v = out[:, : self.act_dim], out[:, self.act_dim]
        else:
            mean = out
        if self.v_net is not None and value:
            v_out, v_cache = self.v_net.forward(p_v, obs)
            v = v_out[:, 0]
            caches["v"] = v_cache
        return PolicyOutput(mean, np.broadcast_to(log_std, mean.shape), v, caches)

    def backward(self, params, out: PolicyOutput, d_mean=None, d_log_std=None, d_value=None) -> np.ndarray:
        """Gradient of ``sum(d_mean*mean) + sum(d_log_std*log_std) + sum(d_value*value)``."""
        p_pi, p_v, _ = self.split(params)
        n = out.mean.shape[0]
        grad = np.zeros(self.n_params)
        d_mean = np.zeros((n, self.act_dim)) if d_mean is None else np.broadcast_to(d_mean, (n, self.act_dim))
        if self.value_head == "shared":
            dv = np.zeros(n) if d_value is None else np.broadcast_to(d_value, (n,))
            g_out = np.concatenate([d_mean, dv[:, None]], axis=1)
            grad[: self.n_pi] = self.pi_net.backward(p_pi, out.caches["pi"], g_out)
        else:
            grad[: self.n_pi] = self.pi_net.backward(p_pi, out.caches["pi"], d_mean)
            if self.v_net is not None and d_value is not None:
                dv = np.broadcast_to(d_value, (n,))[:, None]
                grad[self.n_pi: self.n_pi + self.n_v] = self.v_net.backward(p_v, out.caches["v"], dv)
        if d_log_std is not None:
            grad[self.log_std_slice()] = np.broadcast_to(d_log_std, (n, self.act_dim)).sum(axis=0)
        return grad

    def jvp_mean(self, params, out: PolicyOutput, tangent: np.ndarray):
        """Directional derivatives of (mean, log_std) along ``tangent``."""
        p_pi, _, _ = self.split(params)
        t_pi, _, t_log_std = self.split(tangent)
        d_out = self.pi_net.jvp(p_pi, out.caches["pi"], t_pi)
        return d_out[:, : self.act_dim], t_log_std

    def value_params_mask(self) -> np.ndarray:
        """Boolean mask over the flat vector for parameters owned only by the value head."""
        mask = np.zeros(self.n_params, dtype=bool)
        if self.v_net is not None:
            mask[self.n_pi: self.n_pi + self.n_v] = True
        return mask


def forward_policy(policy: GaussianPolicy, params, state):
    out = policy.forward(params, np.atleast_2d(state))
    return out.mean[0], out.log_std[0]


def log_prob(mean, log_std, action) -> np.ndarray:
    """Diagonal-Gaussian log density, summed over the last axis."""
    mean, log_std, action = (np.asarray(a, dtype=np.float64) for a in (mean, log_std, action))
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_std)) and np.all(np.isfinite(action))):
        raise ValueError("log_prob received non-finite input")
    z = (action - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std, axis=-1) - 0.5 * mean.shape[-1] * LOG_2PI


def log_prob_grads(mean, log_std, action):
    """Partial derivatives of ``log_prob`` w.r.t. mean and log_std."""
    inv_var = np.exp(-2.0 * log_std)
    diff = action - mean
    return diff * inv_var, diff * diff * inv_var - 1.0


def gaussian_kl(mean_p, log_std_p, mean_q, log_std_q) -> np.ndarray:
    """KL(p || q) between diagonal Gaussians, summed over the last axis."""
    # expm1(x) - x >= 0 holds in floating point too, so the result is never negative
    d = 2.0 * (log_std_p - log_std_q)
    maha = (mean_p - mean_q) ** 2 * np.exp(-2.0 * log_std_q)
    return np.sum(0.5 * (np.expm1(d) - d + maha), axis=-1)


def gaussian_kl_grads_p(mean_p, log_std_p, mean_q, log_std_q):
    """Partial derivatives of KL(p||q) w.r.t. p's mean and log_std."""
    inv_var_q = np.exp(-2.0 * log_std_q)
    return (mean_p - mean_q) * inv_var_q, np.exp(2.0 * log_std_p) * inv_var_q - 1.0


def analytic_gaussian_kl(p, q) -> float:
    (mp, sp), (mq, sq) = p, q
    mp, sp, mq, sq = (np.asarray(a, dtype=np.float64) for a in (mp, sp, mq, sq))
    if mp.shape != mq.shape or sp.shape != sq.shape:
        raise ValueError("KL arguments must have matching dimensions")
    return float(np.sum(gaussian_kl(mp, sp, mq, sq)))


def gaussian_entropy(log_std) -> np.ndarray:
    log_std = np.asarray(log_std, dtype=np.float64)
    return np.sum(log_std + 0.5 * (LOG_2PI + 1.0), axis=-1)


def clip_by_global_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grad
    return grad * (max_norm / norm)


@dataclass
class OptimizerState:
    """First-order optimiser; every ``step`` is an ascent step ``params + lr * direction``.

    RMSProp follows the TF convention (epsilon inside the square root).  Adam
    is only used for value-function regression.
    """

    kind: str = "rmsprop"
    rmsprop_decay: float = 0.99
    rmsprop_epsilon: float = 1e-5
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_epsilon: float = 1e-8
    accumulators: np.ndarray | None = None
    first_moment: np.ndarray | None = None
    t: int = 0

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("sgd", "rmsprop", "adam"):
            raise ValueError(f"unknown optimiser {self.kind!r}")

    def preview(self, grad: np.ndarray):
        """Return ``(direction, pending_state)`` without mutating the optimiser."""
        grad = np.asarray(grad, dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient passed to optimiser")
        if self.kind == "sgd":
            return grad, None
        if self.kind == "rmsprop":
            acc = self.accumulators if self.accumulators is not None else np.zeros_like(grad)
            if acc.shape != grad.shape:
                raise ValueError("accumulator dimension does not match gradient")
            acc = self.rmsprop_decay * acc + (1.0 - self.rmsprop_decay) * grad * grad
            return grad / np.sqrt(acc + self.rmsprop_epsilon), (acc,)
        b1, b2 = self.adam_betas
        m = self.first_moment if self.first_moment is not None else np.zeros_like(grad)
        v = self.accumulators if self.accumulators is not None else np.zeros_like(grad)
        t = self.t + 1
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        return m_hat / (np.sqrt(v_hat) + self.adam_epsilon), (v, m, t)

    def commit(self, pending):
        if pending is None:
            return
        if self.kind == "rmsprop":
            (self.accumulators,) = pending
        else:
            self.accumulators, self.first_moment, self.t = pending

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        direction, pending = self.preview(grad)
        self.commit(pending)
        return params + lr * direction


def optimizer_step(state: OptimizerState, params, gradient, lr):
    return state.step(np.asarray(params, dtype=np.float64), gradient, lr)


# Checkpoint layout (little-endian):
#   8 bytes   magic b"HOOFPRM1"
#   4 bytes   uint32 header length H
#   H bytes   UTF-8 JSON header {"policy": {...}, "n_params": P}
#   8*P bytes float64 parameters
_MAGIC = b"HOOFPRM1"


def save_params(path, policy: GaussianPolicy, params: np.ndarray) -> None:
    header = {
        "policy": {
            "obs_dim": policy.obs_dim,
            "act_dim": policy.act_dim,
            "hidden": list(policy.hidden),
            "value_head": policy.value_head,
            "pi_spec": asdict(policy.pi_net.spec),
        },
        "n_params": int(policy.n_params),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.asarray(params, dtype="<f8").tobytes())


def load_params(path):
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path} is not a parameter checkpoint")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12: 12 + hlen])
    params = np.frombuffer(data[12 + hlen:], dtype="<f8").astype(np.float64)
    if params.size != header["n_params"]:
        raise ValueError("checkpoint truncated")
    p = header["policy"]
    policy = GaussianPolicy(p["obs_dim"], p["act_dim"], tuple(p["hidden"]), p["value_head"])
    return policy, params
