"""Comparators for HOOF: meta-gradient learning-rate adaptation and grid search."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import envs
from .core import RunRecord
from .learners import A2CConfig, A2CLearner
from .nn import clip_by_global_norm
from .polgrad import a2c_gradient_parts, gae_policy_gradient


@dataclass(frozen=True)
class MetaGradState:
    """Learning rate held in log space so that it stays positive."""

    log_lr: float
    beta: float
    lr0: float

    @classmethod
    def start(cls, lr0: float, beta: float) -> "MetaGradState":
        if lr0 <= 0:
            raise ValueError("initial learning rate must be positive")
        return cls(math.log(lr0), beta, lr0)

    @property
    def lr(self) -> float:
        return math.exp(self.log_lr)


def meta_gradient_step(state: MetaGradState, meta_grad: np.ndarray, update: np.ndarray) -> MetaGradState:
    """One meta-update of ``log lr``.

    ``update`` is the parameter change ``f(lr) = lr * d`` of the inner step and
    ``meta_grad`` the gradient of the meta-objective at the updated parameters.
    Since ``df/dlr = f / lr`` and ``dlr/dlog_lr = lr``, the chain rule gives
    ``log_lr += beta * <meta_grad, f>``.
    """
    inner = float(np.dot(meta_grad, update))
    if not math.isfinite(inner):
        raise FloatingPointError("non-finite meta-gradient")
    return replace(state, log_lr=state.log_lr + state.beta * inner)


class MetaGradA2C(A2CLearner):
    """A2C whose learning rate follows the meta-gradient.

    Each iteration samples two batches: one for the inner update and one from
    the updated policy for the meta-objective ``mean[log pi(a|s) (R - V(s))]``.
    """

    batches_per_iteration = 2

    def __init__(self, env_spec: envs.EnvSpec, cfg: A2CConfig = A2CConfig(), seed: int = 0,
                 lr0: float = 7e-4, beta: float = 1e-3):
        super().__init__(env_spec, replace(cfg, lr_schedule="constant"), seed)
        self.meta = MetaGradState.start(lr0, beta)

    def iterate(self) -> RunRecord:
        t0 = time.perf_counter()
        lr = self.meta.lr
        batch = self._sample(self.params)
        parts = a2c_gradient_parts(self.policy, self.params, batch, self.returns(batch))
        g = clip_by_global_norm(parts.combine(self.cfg.c1, self.cfg.c2), self.cfg.max_grad_norm)
        new_params = self.opt.step(self.params, g, lr)
        update = new_params - self.params
        self.params = new_params
        batch_new = self._sample(self.params)
        out = self.policy.forward(self.params, batch_new.flat_obs())
        adv = self.returns(batch_new).reshape(-1) - out.value
        meta_grad = gae_policy_gradient(self.policy, self.params, batch_new, adv, out=out)
        self.meta = meta_gradient_step(self.meta, meta_grad, update)
        return self._record(batch_new, t0, lr=lr, c2=self.cfg.c2)


@dataclass(frozen=True)
class GridSpec:
    lrs: tuple
    c2s: tuple

    def __post_init__(self):
        object.__setattr__(self, "lrs", tuple(sorted(float(x) for x in self.lrs)))
        object.__setattr__(self, "c2s", tuple(sorted(float(x) for x in self.c2s)))
        if not self.lrs or not self.c2s:
            raise ValueError("grid axes must be nonempty")

    @classmethod
    def full(cls) -> "GridSpec":
        return cls.scaled(11)

    @classmethod
    def scaled(cls, n: int) -> "GridSpec":
        """``n`` points per axis spanning the same range as the 11 x 11 grid:
        lr in ``0.01 * 10^[-5, 0]`` and c2 in ``0.05 * [0, 1]``."""
        u = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
        return cls(tuple(0.01 * 10.0 ** (-5.0 * u)), tuple(0.05 * u))

    def cells(self):
        return [(lr, c2) for lr in self.lrs for c2 in self.c2s]


@dataclass
class GridResult:
    lr: float
    c2: float
    seed: int
    final_return: float
    env_steps: int


def final_return(records: list[RunRecord], tail: int = 5) -> float:
    vals = [r.mean_return for r in records[-tail:] if not math.isnan(r.mean_return)]
    return float(np.mean(vals)) if vals else math.nan


def grid_search_run(grid: GridSpec, env_spec: envs.EnvSpec, budget_per_cell: int, seeds,
                    cfg: A2CConfig = A2CConfig()) -> list[GridResult]:
    """One plain A2C run per (cell, seed)."""
    results = []
    for lr, c2 in grid.cells():
        for seed in seeds:
            learner = A2CLearner(env_spec, replace(cfg, lr=lr, c2=c2), seed)
            records = learner.train(budget_per_cell)
            results.append(GridResult(lr, c2, int(seed), final_return(records), learner.env_steps))
    return results


GRID_FIELDS = ["lr", "c2", "seed", "final_return", "env_steps"]


def write_grid_csv(results: list[GridResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GRID_FIELDS)
        for r in results:
            w.writerow([repr(r.lr), repr(r.c2), r.seed, repr(r.final_return), r.env_steps])


def read_grid_csv(path) -> list[GridResult]:
    with open(path, newline="") as fh:
        return [GridResult(float(row["lr"]), float(row["c2"]), int(row["seed"]), float(row["final_return"]),
                           int(row["env_steps"])) for row in csv.DictReader(fh)]


def expected_best_of_subsample(returns, n: int, repeats: int = 1000, rng: np.random.Generator | None = None) -> float:
    """Monte-Carlo mean of the best return among ``n`` grid points drawn without replacement."""
    returns = np.asarray(returns, dtype=np.float64)
    if not 1 <= n <= returns.size:
        raise ValueError(f"subsample size must lie in [1, {returns.size}], got {n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    best = np.empty(repeats)
    for i in range(repeats):
        best[i] = returns[rng.choice(returns.size, size=n, replace=False)].max()
    return float(best.mean())
