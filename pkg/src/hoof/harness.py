"""Experiment orchestration: YAML run configs, seeded runs, CSV output and
median/quartile aggregation.

Config keys (all sections optional except ``env``, ``learner``,
``total_env_steps``, ``seeds``)::

    env:        {kind, horizon, reward_scale, params: {...}}
    learner:    a2c | tnpg | trpo
    total_env_steps: int
    seeds:      [int, ...]
    output_dir: path
    a2c:        fields of A2CConfig
    npg:        fields of NPGConfig
    hoof:       {mode, n_candidates, kl_constraint, dynamic_bounds,
                 search_space: {name: [lo, hi]}, nu, violation_threshold}
    baseline:   {kind: meta_grad, lr0, beta} | {kind: grid, size | lrs + c2s}

At most one of ``hoof`` and ``baseline`` may be present.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import envs
from .baselines import GridResult, GridSpec, MetaGradA2C, final_return, grid_search_run, write_grid_csv
from .core import HoofConfig, RunRecord, SearchSpace, wis_from_log_weights
from .learners import A2CConfig, A2CLearner, NPGConfig, NPGLearner


class ConfigError(ValueError):
    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where
        self.message = message


@dataclass(frozen=True)
class BaselineConfig:
    kind: str
    lr0: float = 7e-4
    beta: float = 1e-3
    grid: GridSpec | None = None


@dataclass(frozen=True)
class RunConfig:
    env: envs.EnvSpec
    learner: str
    total_env_steps: int
    seeds: tuple
    output_dir: str = "runs"
    a2c: A2CConfig = A2CConfig()
    npg: NPGConfig = NPGConfig()
    hoof: HoofConfig | None = None
    space: SearchSpace | None = None
    baseline: BaselineConfig | None = None

    @property
    def mode(self) -> str:
        if self.hoof is not None:
            return "hoof"
        return self.baseline.kind if self.baseline is not None else "plain"


def _section(cls, raw, where: str, tuples=("hidden", "vf_hidden")):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(where, "expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(where, f"unknown keys {sorted(unknown)}")
    kw = {k: tuple(v) if k in tuples and v is not None else v for k, v in raw.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from None


def _check_keys(raw: dict, allowed, where: str):
    unknown = set(raw) - set(allowed)
    if unknown:
        raise ConfigError(where, f"unknown keys {sorted(unknown)}")


def parse_config(raw: dict) -> RunConfig:
    """Validate a config mapping; nothing touches an environment here."""
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a mapping")
    _check_keys(raw, ("env", "learner", "total_env_steps", "seeds", "output_dir", "a2c", "npg", "hoof",
                      "baseline"), "config")
    for key in ("env", "learner", "total_env_steps", "seeds"):
        if key not in raw:
            raise ConfigError(key, "missing")

    env_raw = raw["env"]
    if isinstance(env_raw, str):
        env_raw = {"kind": env_raw}
    if not isinstance(env_raw, dict) or "kind" not in env_raw:
        raise ConfigError("env", "needs a kind")
    _check_keys(env_raw, ("kind", "horizon", "reward_scale", "params"), "env")
    try:
        env = envs.make_env(env_raw["kind"], env_raw.get("horizon"), env_raw.get("reward_scale", 1.0),
                            **(env_raw.get("params") or {}))
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError("env", str(exc)) from None

    learner = raw["learner"]
    if learner not in ("a2c", "tnpg", "trpo"):
        raise ConfigError("learner", f"expected a2c, tnpg or trpo, got {learner!r}")
    total = raw["total_env_steps"]
    if not isinstance(total, int) or isinstance(total, bool) or total <= 0:
        raise ConfigError("total_env_steps", "must be a positive integer")
    seeds = raw["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds", "must be a nonempty list of nonnegative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds", "duplicate seeds")

    a2c = _section(A2CConfig, raw.get("a2c"), "a2c")
    npg_raw = dict(raw.get("npg") or {})
    if learner in ("tnpg", "trpo"):
        npg_raw.setdefault("method", learner)
    npg = _section(NPGConfig, npg_raw, "npg")
    if learner in ("tnpg", "trpo") and npg.method != learner:
        raise ConfigError("npg.method", f"conflicts with learner {learner!r}")

    if raw.get("hoof") is not None and raw.get("baseline") is not None:
        raise ConfigError("config", "hoof and baseline are mutually exclusive")

    hoof = space = None
    if raw.get("hoof") is not None:
        h = dict(raw["hoof"])
        _check_keys(h, ("mode", "n_candidates", "kl_constraint", "dynamic_bounds", "search_space", "nu",
                        "violation_threshold"), "hoof")
        bounds = h.pop("search_space", None)
        nu = h.pop("nu", 1.25)
        thr = h.pop("violation_threshold", 0.8)
        h.setdefault("mode", "first_order" if learner == "a2c" else "natural")
        hoof = _section(HoofConfig, h, "hoof")
        if learner == "a2c" and hoof.mode != "first_order":
            raise ConfigError("hoof.mode", "A2C uses first_order")
        if learner == "trpo":
            raise ConfigError("hoof", "HOOF wraps A2C or TNPG")
        if bounds is None:
            bounds = {"lr": [0.0, 1e-2]} if learner == "a2c" else {"delta": [0.001, 0.1], "gamma": [0.85, 1.0],
                                                                   "lam": [0.85, 1.0]}
        try:
            space = SearchSpace({k: tuple(v) for k, v in bounds.items()}, nu, thr)
        except (TypeError, ValueError) as exc:
            raise ConfigError("hoof.search_space", str(exc)) from None
        allowed = {"lr", "c2"} if learner == "a2c" else {"delta", "gamma", "lam"}
        if set(space.names) - allowed:
            raise ConfigError("hoof.search_space", f"{learner} tunes only {sorted(allowed)}")

    baseline = None
    if raw.get("baseline") is not None:
        b = dict(raw["baseline"])
        kind = b.pop("kind", None)
        if learner != "a2c":
            raise ConfigError("baseline", "baselines run on A2C")
        if kind == "meta_grad":
            _check_keys(b, ("lr0", "beta"), "baseline")
            lr0, beta = float(b.get("lr0", 7e-4)), float(b.get("beta", 1e-3))
            if lr0 <= 0 or beta < 0:
                raise ConfigError("baseline", "lr0 must be positive and beta nonnegative")
            baseline = BaselineConfig("meta_grad", lr0, beta)
        elif kind == "grid":
            _check_keys(b, ("size", "lrs", "c2s"), "baseline")
            if "size" in b:
                if "lrs" in b or "c2s" in b:
                    raise ConfigError("baseline", "give either size or explicit axes")
                if not isinstance(b["size"], int) or b["size"] < 1:
                    raise ConfigError("baseline.size", "must be a positive integer")
                grid = GridSpec.scaled(b["size"])
            else:
                try:
                    grid = GridSpec(tuple(b["lrs"]), tuple(b["c2s"]))
                except (KeyError, TypeError, ValueError) as exc:
                    raise ConfigError("baseline", f"bad grid axes: {exc}") from None
            baseline = BaselineConfig("grid", grid=grid)
        else:
            raise ConfigError("baseline.kind", f"expected meta_grad or grid, got {kind!r}")

    out = raw.get("output_dir", "runs")
    if not isinstance(out, str):
        raise ConfigError("output_dir", "must be a string")
    return RunConfig(env, learner, total, tuple(seeds), out, a2c, npg, hoof, space, baseline)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"invalid YAML: {exc}") from None
    return parse_config(raw)


def make_learner(cfg: RunConfig, seed: int):
    if cfg.learner == "a2c":
        if cfg.baseline is not None and cfg.baseline.kind == "meta_grad":
            return MetaGradA2C(cfg.env, cfg.a2c, seed, cfg.baseline.lr0, cfg.baseline.beta)
        return A2CLearner(cfg.env, cfg.a2c, seed, cfg.hoof, cfg.space, cfg.total_env_steps)
    return NPGLearner(cfg.env, cfg.npg, seed, cfg.hoof, cfg.space)


def traced_names(cfg: RunConfig) -> tuple[str, ...]:
    if cfg.hoof is not None:
        return cfg.space.names
    return ("lr",) if cfg.learner == "a2c" else ("delta", "gamma", "lam")


def write_records(records: list[RunRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RunRecord.csv_fields())
        w.writerows(r.csv_row() for r in records)


def read_records(path) -> list[RunRecord]:
    with open(path, newline="") as fh:
        return [RunRecord.from_row(row) for row in csv.DictReader(fh)]


def emit_trace(records: list[RunRecord], names, path) -> None:
    """Per-iteration hyperparameter trace: ``iteration`` plus one column per name."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", *names])
        for r in records:
            w.writerow([r.iteration, *(repr(float(getattr(r, n))) for n in names)])


def run_experiment(cfg: RunConfig, output_dir=None, write: bool = True) -> dict[int, list[RunRecord]]:
    """One record stream per seed.  Writes ``seed_<s>.csv``, ``trace_seed_<s>.csv``
    and ``summary.csv`` (seed, iterations, env_steps, final_return) when ``write``."""
    if cfg.baseline is not None and cfg.baseline.kind == "grid":
        raise ConfigError("baseline", "grid configs run through run_grid")
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
    streams = {}
    for seed in cfg.seeds:
        learner = make_learner(cfg, seed)
        records = learner.train(cfg.total_env_steps)
        streams[seed] = records
        if write:
            write_records(records, out / f"seed_{seed}.csv")
            emit_trace(records, traced_names(cfg), out / f"trace_seed_{seed}.csv")
    if write:
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "iterations", "env_steps", "final_return"])
            for seed, recs in streams.items():
                w.writerow([seed, len(recs), recs[-1].env_steps if recs else 0, repr(final_return(recs))])
    return streams


def run_grid(cfg: RunConfig, output_dir=None, write: bool = True) -> list[GridResult]:
    if cfg.baseline is None or cfg.baseline.kind != "grid":
        raise ConfigError("baseline", "run_grid needs a grid baseline")
    results = grid_search_run(cfg.baseline.grid, cfg.env, cfg.total_env_steps, cfg.seeds, cfg.a2c)
    if write:
        out = Path(output_dir if output_dir is not None else cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_grid_csv(results, out / "grid.csv")
    return results


@dataclass
class AggregateCurve:
    checkpoints: np.ndarray
    median: np.ndarray
    q25: np.ndarray
    q75: np.ndarray

    def __post_init__(self):
        n = len(self.checkpoints)
        if not (len(self.median) == len(self.q25) == len(self.q75) == n):
            raise ValueError("curve columns differ in length")
        ok = np.isnan(self.median) | ((self.q25 <= self.median) & (self.median <= self.q75))
        if not np.all(ok):
            raise ValueError("quartiles do not bracket the median")


def _xy(stream):
    if isinstance(stream, tuple):
        x, y = (np.asarray(a, dtype=np.float64) for a in stream)
    else:
        x = np.array([r.env_steps for r in stream], dtype=np.float64)
        y = np.array([r.mean_return for r in stream], dtype=np.float64)
    keep = ~np.isnan(y)
    return x[keep], y[keep]


def default_checkpoints(streams, n: int = 20) -> np.ndarray:
    """``n`` evenly spaced env-step counts covered by every stream."""
    xs = [_xy(s)[0] for s in streams]
    if any(x.size == 0 for x in xs):
        raise ValueError("a stream has no logged returns")
    return np.linspace(max(x[0] for x in xs), min(x[-1] for x in xs), n)


def aggregate(streams, checkpoints=None) -> AggregateCurve:
    """Median and quartiles across streams, linearly interpolated at ``checkpoints``.

    A stream is a list of :class:`RunRecord` (x = env steps, y = mean return)
    or an ``(x, y)`` tuple.
    """
    streams = list(streams.values()) if isinstance(streams, dict) else list(streams)
    if not streams:
        raise ValueError("nothing to aggregate")
    cp = default_checkpoints(streams) if checkpoints is None else np.asarray(checkpoints, dtype=np.float64)
    if cp.ndim == 0:
        cp = default_checkpoints(streams, int(cp))
    ys = []
    for s in streams:
        x, y = _xy(s)
        if x.size == 0:
            raise ValueError("a stream has no logged returns")
        ys.append(np.interp(cp, x, y))
    ys = np.array(ys)
    q25, med, q75 = np.percentile(ys, [25, 50, 75], axis=0)
    return AggregateCurve(cp, med, q25, q75)


CURVE_FIELDS = ["checkpoint", "median", "q25", "q75"]


def emit_plot_data(curve: AggregateCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_FIELDS)
        for row in zip(curve.checkpoints, curve.median, curve.q25, curve.q75):
            w.writerow([repr(float(v)) for v in row])


def read_curve(path) -> AggregateCurve:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = {k: np.array([float(r[k]) for r in rows]) for k in CURVE_FIELDS}
    return AggregateCurve(cols["checkpoint"], cols["median"], cols["q25"], cols["q75"])


def load_streams(run_dir) -> dict[int, list[RunRecord]]:
    paths = sorted(Path(run_dir).glob("seed_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise FileNotFoundError(f"no seed_*.csv files in {run_dir}")
    return {int(p.stem.split("_")[1]): read_records(p) for p in paths}


@dataclass
class WisOracleResult:
    mus: np.ndarray
    estimates: np.ndarray = field(repr=False)

    @property
    def truths(self) -> np.ndarray:
        return 1.0 + self.mus ** 2

    def medians(self) -> np.ndarray:
        return np.median(self.estimates, axis=0)

    def ordering(self) -> dict:
        """``(i, j) -> `` fraction of repeats where estimate j exceeds estimate i, for i < j."""
        e = self.estimates
        m = len(self.mus)
        return {(i, j): float(np.mean(e[:, j] > e[:, i])) for i in range(m) for j in range(i + 1, m)}


def wis_oracle_experiment(mus=(0, 1, 2, 3, 4, 5), n_samples: int = 10, repeats: int = 1000,
                          seed: int = 0) -> WisOracleResult:
    """WIS estimates of ``E[X^2]`` under ``N(mu, 1)`` from ``N(0, 1)`` samples.

    Each repeat draws one sample set shared by every target, as when HOOF
    ranks candidates on a single batch.  The true values are ``1 + mu^2``.
    """
    mus = np.asarray(mus, dtype=np.float64)
    rng = np.random.default_rng(seed)
    est = np.empty((repeats, mus.size))
    for r in range(repeats):
        x = rng.standard_normal(n_samples)
        for j, mu in enumerate(mus):
            est[r, j] = wis_from_log_weights(mu * x - 0.5 * mu * mu, x * x)
    return WisOracleResult(mus, est)


def write_wis_oracle(res: WisOracleResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    q25, med, q75 = np.percentile(res.estimates, [25, 50, 75], axis=0)
    with open(out / "wis_estimates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mu", "true_value", "median", "q25", "q75"])
        for row in zip(res.mus, res.truths, med, q25, q75):
            w.writerow([repr(float(v)) for v in row])
    with open(out / "wis_ordering.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mu_low", "mu_high", "fraction_correct"])
        for (i, j), frac in res.ordering().items():
            w.writerow([repr(float(res.mus[i])), repr(float(res.mus[j])), repr(frac)])

