"""HOOF building blocks: candidate generation, weighted importance sampling,
KL-constrained greedy selection and dynamic search bounds.

The per-iteration loop that ties these together lives in :mod:`hoof.learners`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .nn import GaussianPolicy, gaussian_kl

HYPERPARAMETERS = ("lr", "c2", "delta", "gamma", "lam")


class WisDegeneracyError(ArithmeticError):
    """Importance weights collapsed (non-finite or all zero)."""


@dataclass(frozen=True)
class SearchSpace:
    """Closed intervals per tuned hyperparameter.

    Only the upper bound of ``lr`` is dynamic: multiplied by ``nu`` when no
    candidate violates the KL constraint and divided by ``nu`` when more than
    ``violation_threshold`` of them do.
    """

    bounds: dict
    nu: float = 1.25
    violation_threshold: float = 0.8

    def __post_init__(self):
        b = {}
        for name, (lo, hi) in dict(self.bounds).items():
            if name not in HYPERPARAMETERS:
                raise ValueError(f"unknown hyperparameter {name!r}")
            lo, hi = float(lo), float(hi)
            if lo > hi:
                raise ValueError(f"empty interval for {name}: [{lo}, {hi}]")
            b[name] = (lo, hi)
        if not b:
            raise ValueError("search space must tune at least one hyperparameter")
        if self.nu <= 1.0:
            raise ValueError("nu must exceed 1")
        object.__setattr__(self, "bounds", b)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n in HYPERPARAMETERS if n in self.bounds)

    @property
    def lr_upper(self) -> float | None:
        return self.bounds["lr"][1] if "lr" in self.bounds else None

    @classmethod
    def a2c_lr(cls, upper: float = 1e-2):
        return cls({"lr": (0.0, upper)})

    @classmethod
    def a2c_lr_c2(cls, upper: float = 1e-2, c2_upper: float = 0.2):
        return cls({"lr": (0.0, upper), "c2": (0.0, c2_upper)})

    @classmethod
    def tnpg(cls):
        return cls({"delta": (0.001, 0.1), "gamma": (0.85, 1.0), "lam": (0.85, 1.0)})


@dataclass(frozen=True)
class HoofConfig:
    mode: str = "first_order"
    n_candidates: int = 100
    kl_constraint: float | None = 0.03
    dynamic_bounds: bool = True

    def __post_init__(self):
        if self.mode not in ("first_order", "natural"):
            raise ValueError(f"unknown HOOF mode {self.mode!r}")
        if self.n_candidates < 1:
            raise ValueError("need at least one candidate")
        if self.kl_constraint is not None and self.kl_constraint <= 0:
            raise ValueError("KL constraint must be positive")

    @property
    def constrained(self) -> bool:
        return self.mode == "first_order" and self.kl_constraint is not None


@dataclass
class HyperCandidate:
    psi: dict
    params: np.ndarray | None = None
    wis_score: float = -math.inf
    sample_kl: float = math.inf
    feasible: bool = False
    extra: dict = field(default_factory=dict, repr=False)


def generate_candidates(space: SearchSpace, n: int, rng: np.random.Generator) -> list[dict]:
    """``n`` settings drawn uniformly from the current intervals, sampled in a fixed key order."""
    if n < 1:
        raise ValueError("need at least one candidate")
    draws = {name: rng.uniform(*space.bounds[name], size=n) for name in space.names}
    return [{name: float(draws[name][i]) for name in space.names} for i in range(n)]


def log_importance_weights(behavior_log_probs, candidate_log_probs) -> np.ndarray:
    """Per-trajectory ``sum_t log pi_new(a_t|s_t) - log pi_old(a_t|s_t)``."""
    b = np.atleast_2d(np.asarray(behavior_log_probs, dtype=np.float64))
    c = np.atleast_2d(np.asarray(candidate_log_probs, dtype=np.float64))
    if b.shape != c.shape:
        raise ValueError("candidate log-probs are not aligned with the batch")
    return np.sum(c - b, axis=1)


def wis_from_log_weights(log_w, returns) -> float:
    """Self-normalised importance-sampling estimate from per-trajectory log weights."""
    log_w = np.asarray(log_w, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    if log_w.shape != returns.shape:
        raise ValueError("one log weight per return is required")
    if np.any(np.isnan(log_w)) or not np.any(np.isfinite(log_w)):
        raise WisDegeneracyError("importance weights are degenerate")
    w = np.exp(log_w - np.max(log_w))
    total = np.sum(w)
    if not total > 0.0 or not math.isfinite(total):
        raise WisDegeneracyError("importance weights are degenerate")
    est = float(np.sum(w * returns) / total)
    return min(max(est, float(returns.min())), float(returns.max()))


def wis_estimate(batch, candidate_log_probs) -> float:
    """WIS value estimate of a candidate policy over the batch's trajectories."""
    log_w = log_importance_weights(batch.log_probs, np.reshape(candidate_log_probs, batch.log_probs.shape))
    return wis_from_log_weights(log_w, batch.returns)


def effective_sample_size(log_w) -> float:
    w = np.exp(np.asarray(log_w) - np.max(log_w))
    return float(w.sum() ** 2 / np.sum(w * w))


def trajectory_sample_kl(policy: GaussianPolicy, batch, old_params, candidate_params, old_out=None,
                         new_out=None) -> float:
    """Mean over batch states of KL(candidate || old)."""
    obs = batch.flat_obs()
    old = old_out if old_out is not None else policy.forward(old_params, obs)
    new = new_out if new_out is not None else policy.forward(candidate_params, obs)
    return float(np.mean(gaussian_kl(new.mean, new.log_std, old.mean, old.log_std)))


def select_candidate(candidates: list[HyperCandidate], kl_constraint: float | None = None) -> int | None:
    """Index of the feasible candidate with the largest WIS score.

    Feasibility is ``sample_kl < kl_constraint`` when a constraint is given
    and ``candidate.feasible`` otherwise; candidates without a finite score
    are never chosen.  Ties go to the smaller sample KL,
    then the smaller index.  Returns ``None`` when nothing is feasible (null
    update).
    """
    if not candidates:
        raise ValueError("no candidates to select from")
    best, best_key = None, None
    for i, c in enumerate(candidates):
        ok = c.feasible if kl_constraint is None else c.sample_kl < kl_constraint
        if not ok or not math.isfinite(c.wis_score):
            continue
        key = (-c.wis_score, c.sample_kl, i)
        if best_key is None or key < best_key:
            best, best_key = i, key
    return best


def update_bounds(space: SearchSpace, violation_fraction: float) -> SearchSpace:
    if not 0.0 <= violation_fraction <= 1.0:
        raise ValueError("violation fraction must lie in [0, 1]")
    if "lr" not in space.bounds:
        return space
    lo, hi = space.bounds["lr"]
    if violation_fraction == 0.0:
        hi = hi * space.nu
    elif violation_fraction > space.violation_threshold:
        hi = max(hi / space.nu, lo)
    else:
        return space
    return SearchSpace({**space.bounds, "lr": (lo, hi)}, space.nu, space.violation_threshold)


@dataclass
class RunRecord:
    """One learner iteration.  ``next_return`` is filled in once the following
    batch has been sampled; ``wall_time`` is never written to CSV."""

    iteration: int
    env_steps: int
    mean_return: float
    batch_return: float
    lr: float = math.nan
    c2: float = math.nan
    delta: float = math.nan
    gamma: float = math.nan
    lam: float = math.nan
    wis: float = math.nan
    sample_kl: float = math.nan
    violation_fraction: float = math.nan
    lr_upper: float = math.nan
    null_update: bool = False
    divergences: int = 0
    next_return: float = math.nan
    wall_time: float = 0.0

    CSV_EXCLUDE = ("wall_time",)

    @classmethod
    def csv_fields(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name not in cls.CSV_EXCLUDE]

    def csv_row(self) -> list[str]:
        row = []
        for name in self.csv_fields():
            v = getattr(self, name)
            if isinstance(v, bool):
                row.append(str(int(v)))
            elif isinstance(v, float):
                row.append(repr(v))
            else:
                row.append(str(v))
        return row

    @classmethod
    def from_row(cls, row: dict) -> "RunRecord":
        kwargs = {}
        for f in fields(cls):
            if f.name not in row:
                continue
            raw = row[f.name]
            if f.name in ("iteration", "env_steps", "divergences"):
                kwargs[f.name] = int(raw)
            elif f.name == "null_update":
                kwargs[f.name] = bool(int(raw))
            else:
                kwargs[f.name] = float(raw)
        return cls(**kwargs)
