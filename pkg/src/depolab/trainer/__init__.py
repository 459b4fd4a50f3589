from depolab.trainer.buffer import Batch, ReplayBuffer
from depolab.trainer.config import ConfigError, ExperimentConfig, config_hash, load_config, with_overrides
from depolab.trainer.evaluation import environment_rollout, multi_step_rollout, planner_mse
from depolab.trainer.metrics import MetricsLog, read_metrics
from depolab.trainer.runners import (
    RunResult,
    cotrain_run,
    rl_mode_run,
    run_algorithm1,
    run_from_config,
    train,
    transfer_run,
)
from depolab.trainer.sac import soft_q_update

__all__ = [
    "Batch",
    "ConfigError",
    "ExperimentConfig",
    "MetricsLog",
    "ReplayBuffer",
    "RunResult",
    "config_hash",
    "cotrain_run",
    "environment_rollout",
    "load_config",
    "multi_step_rollout",
    "planner_mse",
    "read_metrics",
    "rl_mode_run",
    "run_algorithm1",
    "run_from_config",
    "soft_q_update",
    "train",
    "transfer_run",
    "with_overrides",
]
