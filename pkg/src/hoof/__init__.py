"""Hyperparameter optimisation on the fly for policy-gradient learners."""
from .core import HoofConfig, RunRecord, SearchSpace
from .envs import make_env
from .harness import RunConfig, aggregate, load_config, run_experiment
from .learners import A2CConfig, A2CLearner, NPGConfig, NPGLearner

__all__ = ["A2CConfig", "A2CLearner", "HoofConfig", "NPGConfig", "NPGLearner", "RunConfig", "RunRecord",
           "SearchSpace", "aggregate", "load_config", "make_env", "run_experiment"]
