"""Uncertainty-aware pushing: simulator, conditioned policies, online fusion."""

from .env import PushingEnv, TaskConfig, batch_rollout
from .errors import PushFuseError
from .estimator import (
    AdaptationEnsemble,
    HistoryWindow,
    OnlineEstimator,
    ParamEstimate,
    aggregate_prior,
    fuse,
)
from .geometry import RigidObjectSpec, make_hammer, make_tblock, realize_com, tblock_with_weight
from .pipeline import RunConfig, config_hash, load_config
from .ppo import GaussianActor, PpoConfig, PpoTrainer
from .sim import SimParams, SimState, SimulatorBatch, step_physics

__version__ = "0.1.0"

__all__ = [
    "AdaptationEnsemble",
    "GaussianActor",
    "HistoryWindow",
    "OnlineEstimator",
    "ParamEstimate",
    "PpoConfig",
    "PpoTrainer",
    "PushFuseError",
    "PushingEnv",
    "RigidObjectSpec",
    "RunConfig",
    "SimParams",
    "SimState",
    "SimulatorBatch",
    "TaskConfig",
    "aggregate_prior",
    "batch_rollout",
    "config_hash",
    "fuse",
    "load_config",
    "make_hammer",
    "make_tblock",
    "realize_com",
    "step_physics",
    "tblock_with_weight",
    "__version__",
]
