"""Run checkpoints: parameter sections named after the module they restore.

The planner is stored once under ``planner``. Agent-specific modules use the
bare name for agent 0 and ``name@i`` for agent ``i`` of a co-training run.
The manifest carries the full config so a policy can be rebuilt from the file.
"""
from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

from depolab.approx import ParamVector, load_checkpoint, save_checkpoint, set_params
from depolab.depo.policy import DecoupledPolicy, GaussianInverseDynamics, GridInverseDynamics
from depolab.trainer.agent import build_planner, make_env
from depolab.trainer.config import ExperimentConfig, config_from_dict, config_to_dict
from depolab.trainer.runners import RunResult


def section_name(name: str, agent: int) -> str:
    return name if agent == 0 else f"{name}@{agent}"


def run_sections(result: RunResult) -> dict[str, ParamVector]:
    out: dict[str, ParamVector] = {}
    for i, agent in enumerate(result.agents):
        for name, pv in agent.param_sections().items():
            if name == "planner":
                out.setdefault("planner", pv)
            else:
                out[section_name(name, i)] = pv
    return out


def save_run_checkpoint(result: RunResult, cfg: ExperimentConfig, path: Union[str, Path]) -> None:
    manifest = {"config": config_to_dict(cfg), "n_agents": len(result.agents), **result.meta}
    save_checkpoint(path, run_sections(result), manifest)


def policy_from_checkpoint(path: Union[str, Path], agent: int = 0) -> tuple[DecoupledPolicy, object]:
    """Rebuild the decoupled policy of one agent together with its environment."""
    sections, manifest = load_checkpoint(path)
    if "config" not in manifest:
        raise ValueError(f"{path}: checkpoint manifest has no config")
    cfg = config_from_dict(manifest["config"])
    if not cfg.decoupled:
        raise ValueError(f"{path}: variant {cfg.variant!r} has no planner")
    if cfg.agent_transforms:
        env = make_env(cfg.env, 0, transform=cfg.agent_transforms[agent])
    elif cfg.agent_ks:
        env = make_env(cfg.env, 0, k=cfg.agent_ks[agent])
    else:
        env = make_env(cfg.env, 0)
    rng = np.random.default_rng(0)
    planner = build_planner(cfg, env, rng)
    net = cfg.network
    if cfg.env.name == "gridworld":
        inv = GridInverseDynamics(env.coord_array(), env.n_actions, net.invdyn_hidden, rng)
    else:
        inv = GaussianInverseDynamics(env.state_dim, env.action_dim, net.invdyn_hidden, rng,
                                      delta_scale=env.dt, log_std_min=net.invdyn_log_std_min,
                                      init_log_std=net.init_log_std)
    set_params(planner, sections["planner"])
    set_params(inv, sections[section_name("inverse_dynamics", agent)])
    policy = DecoupledPolicy(planner, inv, n_mc=cfg.algo.n_mc)
    return policy, env
