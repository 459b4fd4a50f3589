"""Experiment configuration: nested dataclasses loaded strictly from YAML.

Unknown keys are errors so a typo never silently falls back to a default.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

VARIANTS = ("depo", "depo_supervised", "agnostic_depg", "gaifo", "gaifo_dp", "bco")
KINDS = ("algorithm1", "transfer", "cotrain", "rl")
DECOUPLED = ("depo", "depo_supervised", "agnostic_depg", "gaifo_dp")


class ConfigError(ValueError):
    pass


@dataclass
class EnvConfig:
    name: str = "gridworld"
    # grid world
    k: int = 1
    goal: tuple = (5, 5)
    shaded_zone: tuple = ((4, 4), (4, 5), (5, 4), (5, 5))
    expert_moves: str = "RRRRRUUUUU"
    # point mass
    dim: int = 2
    dt: float = 0.05
    v_max: float = 2.0
    goal_radius: float = 0.1
    start_box: float = 1.0
    transform: str = "normal"
    expert_kp: float = 1.0
    expert_kd: float = 2.0
    # shared
    horizon: Optional[int] = None

    def __post_init__(self):
        if self.name not in ("gridworld", "pointmass"):
            raise ConfigError(f"unknown env {self.name!r}")
        self.goal = tuple(self.goal)
        self.shaded_zone = tuple(tuple(c) for c in self.shaded_zone)


@dataclass
class TrainingConfig:
    epochs: int = 100
    steps_per_epoch: int = 1000
    grad_steps_per_epoch: int = 1000
    pretrain_steps: int = 10_000
    batch_size: int = 256
    buffer_capacity: int = 200_000
    eval_every: int = 5
    eval_episodes: int = 20
    invdyn_interval: int = 10
    invdyn_steps_per_epoch: int = 10
    invdyn_tol: float = 1e-5
    invdyn_patience: int = 5
    invdyn_max_epochs: int = 200
    demo_trajectories: int = 4

    def __post_init__(self):
        for name in ("epochs", "steps_per_epoch", "grad_steps_per_epoch", "pretrain_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_size", "buffer_capacity", "eval_every", "eval_episodes",
                     "invdyn_interval", "invdyn_steps_per_epoch"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")


@dataclass
class AlgoConfig:
    lambda_h: float = 1.0
    gamma: float = 0.99
    lr_q: float = 3e-4
    lr_policy: float = 3e-4
    lr_disc: float = 3e-4
    lr_invdyn: float = 1e-4
    entropy_weight: float = 0.2
    tau: float = 0.005
    reward_scale: float = 2.0
    gp_weight: float = 4.0
    swap_discriminator_labels: bool = True
    weight_clip: float = 50.0
    depg_estimator: str = "expected"
    normalize_advantage: bool = True
    n_mc: int = 16

    def __post_init__(self):
        for name in ("lr_q", "lr_policy", "lr_disc", "lr_invdyn"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.lambda_h < 0 or self.entropy_weight < 0 or self.gp_weight < 0:
            raise ConfigError("lambda_h, entropy_weight and gp_weight must be >= 0")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must lie in (0, 1]")
        if self.depg_estimator not in ("expected", "sampled", "pathwise"):
            raise ConfigError(f"unknown depg_estimator {self.depg_estimator!r}")
        if self.n_mc < 1:
            raise ConfigError("n_mc must be >= 1")


@dataclass
class NetworkConfig:
    planner_hidden: tuple = (256, 256)
    invdyn_hidden: tuple = (512, 512, 512)
    q_hidden: tuple = (256, 256)
    disc_hidden: tuple = (256, 256)
    actor_hidden: tuple = (256, 256)
    planner_log_std_min: float = -20.0
    invdyn_log_std_min: float = -20.0
    actor_log_std_min: float = -20.0
    init_log_std: float = 0.0
    table_init_scale: float = 0.01

    def __post_init__(self):
        for name in ("planner_hidden", "invdyn_hidden", "q_hidden", "disc_hidden", "actor_hidden"):
            setattr(self, name, tuple(int(h) for h in getattr(self, name)))


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    kind: str = "algorithm1"
    variant: str = "depo"
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    algo: AlgoConfig = field(default_factory=AlgoConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    # transfer: checkpoint whose planner slice is loaded and frozen
    pretrained_checkpoint: Optional[str] = None
    # co-training: one action transform per agent (point mass) or one k per agent (grid)
    agent_transforms: tuple = ()
    agent_ks: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown run kind {self.kind!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.kind in ("transfer", "rl", "cotrain") and self.variant != "depo":
            raise ConfigError(f"{self.kind} runs need the depo variant")
        self.agent_transforms = tuple(self.agent_transforms)
        self.agent_ks = tuple(int(k) for k in self.agent_ks)

    @property
    def decoupled(self) -> bool:
        return self.variant in DECOUPLED


_SECTIONS = {"env": EnvConfig, "training": TrainingConfig, "algo": AlgoConfig, "network": NetworkConfig}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if cls is ExperimentConfig and key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value or {}, key)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "config")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(x):
        if isinstance(x, tuple):
            return [plain(v) for v in x]
        return x
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = {g.name: plain(getattr(v, g.name)) for g in dataclasses.fields(v)}
        else:
            out[f.name] = plain(v)
    return out


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    return config_from_dict(data)


def config_hash(cfg_or_bytes) -> str:
    """sha256 of the config file bytes, or of the canonical dump of a config object."""
    if isinstance(cfg_or_bytes, (bytes, bytearray)):
        payload = bytes(cfg_or_bytes)
    else:
        payload = yaml.safe_dump(config_to_dict(cfg_or_bytes), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def with_overrides(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """Copy of ``cfg`` with top-level fields or ``section={key: value}`` replaced."""
    data = config_to_dict(cfg)
    for key, value in sections.items():
        if key in _SECTIONS and isinstance(value, dict):
            data[key].update(value)
        else:
            data[key] = value
    return config_from_dict(data)
