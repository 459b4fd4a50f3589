"""Run drivers: plain runs, transfer with a frozen planner, shared-planner
co-training and reward-driven (non-imitation) runs."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

from depolab.approx import ParamVector, apply_gradient, get_params, load_checkpoint, set_params
from depolab.depo.losses import mean_gradient
from depolab.trainer.agent import Agent, TrainingAborted, build_planner, expert_demonstrations, make_env
from depolab.trainer.config import ExperimentConfig, config_hash
from depolab.trainer.metrics import MetricsLog, empty_row

PlannerHook = Callable[[list[ParamVector], ParamVector], None]


@dataclass
class RunResult:
    logs: list[MetricsLog]
    agents: list[Agent]
    planner: Optional[torch.nn.Module] = None
    meta: dict = field(default_factory=dict)

    @property
    def log(self) -> MetricsLog:
        return self.logs[0]


def _record(agent: Agent, log: MetricsLog, epoch: int) -> None:
    ev = agent.evaluate()
    losses = agent.drain_losses()
    row = empty_row(agent.env_steps, epoch, agent.counters)
    row.update(mean_return=ev.mean_return, success_rate=ev.success_rate, planner_mse=ev.planner_mse)
    for key, col in (("disc", "disc_loss"), ("q", "q_loss"), ("depg", "depg_loss"),
                     ("cdepg", "cdepg_loss"), ("supervised", "supervised_loss"),
                     ("invdyn", "invdyn_loss"), ("actor", "actor_loss")):
        if key in losses:
            row[col] = losses[key]
    log.append(row)


def _agent_envs(cfg: ExperimentConfig, seqs: Sequence[np.random.SeedSequence]) -> list:
    envs = []
    for i, seq in enumerate(seqs):
        env_seed = int(seq.generate_state(1)[0])
        if cfg.agent_transforms:
            envs.append(make_env(cfg.env, env_seed, transform=cfg.agent_transforms[i]))
        elif cfg.agent_ks:
            envs.append(make_env(cfg.env, env_seed, k=cfg.agent_ks[i]))
        else:
            envs.append(make_env(cfg.env, env_seed))
    return envs


def train(cfg: ExperimentConfig, n_agents: int = 1, planner_params: Optional[ParamVector] = None,
          freeze_planner: bool = False, rl_mode: bool = False,
          planner_hook: Optional[PlannerHook] = None) -> RunResult:
    """Pre-training stage then the online loop, for one or more agents sharing a planner."""
    tr = cfg.training
    root = np.random.SeedSequence(cfg.seed)
    shared_seq, *agent_seqs = root.spawn(1 + n_agents)
    demos = expert_demonstrations(cfg.env, tr.demo_trajectories, cfg.seed)
    envs = _agent_envs(cfg, agent_seqs)

    planner = None
    if cfg.decoupled:
        planner = build_planner(cfg, envs[0], np.random.default_rng(shared_seq))
        if planner_params is not None:
            try:
                set_params(planner, planner_params)
            except (ValueError, KeyError) as exc:
                raise ValueError(f"incompatible planner checkpoint: {exc}") from exc
    agents = [Agent(cfg, env, demos, seq, planner=planner, rl_mode=rl_mode, freeze_planner=freeze_planner)
              for env, seq in zip(envs, agent_seqs)]
    meta = {"seed": cfg.seed, "config_hash": config_hash(cfg), "variant": cfg.variant, "kind": cfg.kind}
    logs = [MetricsLog(meta=dict(meta, agent=i)) for i in range(n_agents)]
    result = RunResult(logs, agents, planner, meta)
    if tr.pretrain_steps == 0 and (tr.epochs == 0 or tr.steps_per_epoch == 0):
        return result

    planner_opt = None
    if planner is not None and not freeze_planner:
        planner_opt = torch.optim.Adam(planner.parameters(), lr=cfg.algo.lr_policy)
    learns_inverse = cfg.variant in ("depo", "depo_supervised", "agnostic_depg")

    try:
        for ag, log in zip(agents, logs):
            _record(ag, log, 0)
        if tr.pretrain_steps > 0:
            for ag, log in zip(agents, logs):
                ag.collect(tr.pretrain_steps, random=True)
                if learns_inverse:
                    ag.retrain_inverse_dynamics()
                _record(ag, log, 0)
        for epoch in range(1, tr.epochs + 1):
            for ag in agents:
                ag.collect(tr.steps_per_epoch)
                if cfg.variant == "bco":
                    ag.bco_round()
                elif learns_inverse and epoch % tr.invdyn_interval == 0:
                    ag.retrain_inverse_dynamics()
            if cfg.variant != "bco" and len(agents[0].buffer) > 0:
                for _ in range(tr.grad_steps_per_epoch):
                    reports = [ag.gradient_step() for ag in agents]
                    if planner_opt is None or reports[0] is None:
                        continue
                    grads = [r.combined for r in reports]
                    g = mean_gradient(grads)
                    apply_gradient(planner, planner_opt, g)
                    for ag in agents:
                        ag.counters["planner_updates"] += 1
                    if planner_hook is not None:
                        planner_hook(grads, g)
            if epoch % tr.eval_every == 0 or epoch == tr.epochs:
                for ag, log in zip(agents, logs):
                    _record(ag, log, epoch)
    except (FloatingPointError, ValueError) as exc:
        if isinstance(exc, ValueError) and "non-finite" not in str(exc):
            raise
        raise TrainingAborted(f"run aborted: {exc}") from exc
    return result


def run_algorithm1(cfg: ExperimentConfig) -> MetricsLog:
    return train(cfg).log


def transfer_run(checkpoint: Union[str, Path, ParamVector], cfg: ExperimentConfig) -> RunResult:
    """Load a planner, freeze it, and learn fresh inverse dynamics / critic under ``cfg``'s dynamics."""
    if isinstance(checkpoint, ParamVector):
        params = checkpoint
    else:
        sections, _ = load_checkpoint(checkpoint, only=["planner"])
        params = sections["planner"]
    return train(cfg, planner_params=params, freeze_planner=True)


def cotrain_run(cfg: ExperimentConfig, planner_hook: Optional[PlannerHook] = None) -> RunResult:
    n = len(cfg.agent_transforms) or len(cfg.agent_ks) or 1
    if cfg.agent_transforms and cfg.env.name != "pointmass":
        raise ValueError("action transforms apply to the point mass only")
    return train(cfg, n_agents=n, planner_hook=planner_hook)


def rl_mode_run(cfg: ExperimentConfig) -> RunResult:
    env = make_env(cfg.env, 0)
    if not hasattr(env, "step"):
        raise ValueError("environment exposes no reward")
    return train(cfg, rl_mode=True)


def run_from_config(cfg: ExperimentConfig) -> RunResult:
    if cfg.kind == "algorithm1":
        return train(cfg)
    if cfg.kind == "transfer":
        if not cfg.pretrained_checkpoint:
            raise ValueError("transfer runs need pretrained_checkpoint")
        return transfer_run(cfg.pretrained_checkpoint, cfg)
    if cfg.kind == "cotrain":
        return cotrain_run(cfg)
    return rl_mode_run(cfg)


def planner_snapshot(result: RunResult) -> Optional[ParamVector]:
    return None if result.planner is None else get_params(result.planner)
