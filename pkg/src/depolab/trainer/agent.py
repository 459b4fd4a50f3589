"""One learning agent: environment, modules, optimizers, buffer and counters.

Co-training runs hold several agents that share one planner module; a plain
run is the one-agent case of the same machinery.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from depolab.adversarial import MLPDiscriminator, TabularDiscriminator, discriminator_loss, reward
from depolab.approx import ParamVector, get_params
from depolab.depo.baselines import bco_update
from depolab.depo.fit import fit_until_converged
from depolab.depo.losses import (
    GradientReport,
    cdepg_loss,
    combined_gradient,
    depg_expected_loss,
    depg_loss,
    depg_pathwise_loss,
    inverse_dynamics_loss,
    supervised_planner_loss,
)
from depolab.depo.policy import (
    DecoupledPolicy,
    GaussianActor,
    GaussianInverseDynamics,
    GaussianPlanner,
    GridInverseDynamics,
    TabularActor,
    TabularPlanner,
    TabularQ,
    TwinQ,
)
from depolab.envs.demos import Demonstration, collect_demonstrations
from depolab.envs.gridworld import GridWorld, gridworld_expert
from depolab.envs.pointmass import PointMass, pointmass_expert
from depolab.trainer.buffer import ReplayBuffer
from depolab.trainer.config import EnvConfig, ExperimentConfig
from depolab.trainer.metrics import COUNTERS
from depolab.trainer.sac import soft_q_update


class TrainingAborted(RuntimeError):
    """A loss or gradient went non-finite; the message says which."""


def make_env(env_cfg: EnvConfig, seed: int, k: Optional[int] = None,
             transform: Optional[str] = None):
    if env_cfg.name == "gridworld":
        kw = {} if env_cfg.horizon is None else {"horizon": env_cfg.horizon}
        return GridWorld(k=env_cfg.k if k is None else k, goal=env_cfg.goal,
                         shaded_zone=env_cfg.shaded_zone, expert_moves=env_cfg.expert_moves,
                         seed=seed, **kw)
    kw = {} if env_cfg.horizon is None else {"horizon": env_cfg.horizon}
    return PointMass(dim=env_cfg.dim, dt=env_cfg.dt, v_max=env_cfg.v_max,
                     goal_radius=env_cfg.goal_radius, start_box=env_cfg.start_box,
                     transform=env_cfg.transform if transform is None else transform,
                     seed=seed, **kw)


def expert_demonstrations(env_cfg: EnvConfig, n_traj: int, seed: int) -> Demonstration:
    """State-only demonstrations from the scripted expert of the *base* dynamics."""
    if env_cfg.name == "gridworld":
        gw = make_env(env_cfg, seed, k=1)
        return collect_demonstrations(gw, gridworld_expert(gw), n_traj, seed)
    pm = make_env(env_cfg, seed, transform="normal")
    return collect_demonstrations(pm, pointmass_expert(pm, env_cfg.expert_kp, env_cfg.expert_kd),
                                  n_traj, seed)


def build_planner(cfg: ExperimentConfig, env, rng: np.random.Generator) -> nn.Module:
    net = cfg.network
    if isinstance(env, GridWorld):
        return TabularPlanner(env.n_states, rng, net.table_init_scale)
    return GaussianPlanner(env.state_dim, net.planner_hidden, rng, delta_scale=env.dt,
                           log_std_min=net.planner_log_std_min, init_log_std=net.init_log_std)


@dataclass
class EvalResult:
    mean_return: float
    success_rate: float
    planner_mse: float


class Agent:
    def __init__(self, cfg: ExperimentConfig, env, demos: Demonstration, seed_seq: np.random.SeedSequence,
                 planner: Optional[nn.Module] = None, rl_mode: bool = False,
                 freeze_planner: bool = False):
        self.cfg, self.env = cfg, env
        self.tabular = isinstance(env, GridWorld)
        self.rl_mode = rl_mode
        self.freeze_planner = freeze_planner
        self.variant = cfg.variant
        init_seq, act_seq, batch_seq, eval_seq = seed_seq.spawn(4)
        init_rng = np.random.default_rng(init_seq)
        self.act_rng = np.random.default_rng(act_seq)
        self.batch_rng = np.random.default_rng(batch_seq)
        self.counters = {c: 0 for c in COUNTERS}
        self.loss_acc: dict[str, list[float]] = {}
        self.env_steps = 0
        net, algo = cfg.network, cfg.algo

        # expert pairs in model representation
        s_e, s_e_next = demos.pairs()
        if self.tabular:
            self.expert_s = torch.as_tensor([env.index(*p) for p in s_e.astype(int)], dtype=torch.int64)
            self.expert_s_next = torch.as_tensor([env.index(*p) for p in s_e_next.astype(int)], dtype=torch.int64)
        else:
            self.expert_s, self.expert_s_next = torch.from_numpy(s_e), torch.from_numpy(s_e_next)

        self.policy: Optional[DecoupledPolicy] = None
        self.actor: Optional[nn.Module] = None
        if cfg.decoupled:
            if planner is None:
                planner = build_planner(cfg, env, init_rng)
            if self.tabular:
                inv = GridInverseDynamics(env.coord_array(), env.n_actions, net.invdyn_hidden, init_rng)
            else:
                inv = GaussianInverseDynamics(env.state_dim, env.action_dim, net.invdyn_hidden, init_rng,
                                              delta_scale=env.dt, log_std_min=net.invdyn_log_std_min,
                                              init_log_std=net.init_log_std)
            self.policy = DecoupledPolicy(planner, inv, n_mc=algo.n_mc)
            self.inv_opt = torch.optim.Adam(inv.parameters(), lr=algo.lr_invdyn)
        else:
            if self.tabular:
                self.actor = TabularActor(env.n_states, env.n_actions, init_rng, net.table_init_scale)
            else:
                self.actor = GaussianActor(env.state_dim, env.action_dim, net.actor_hidden, init_rng,
                                           log_std_min=net.actor_log_std_min, init_log_std=net.init_log_std)
            self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=algo.lr_policy)
            if self.variant == "bco":
                if self.tabular:
                    self.bco_inv = GridInverseDynamics(env.coord_array(), env.n_actions, net.invdyn_hidden, init_rng)
                else:
                    self.bco_inv = GaussianInverseDynamics(env.state_dim, env.action_dim, net.invdyn_hidden,
                                                           init_rng, delta_scale=env.dt,
                                                           log_std_min=net.invdyn_log_std_min)
                self.inv_opt = torch.optim.Adam(self.bco_inv.parameters(), lr=algo.lr_invdyn)

        self.uses_q = self.variant not in ("depo_supervised", "bco")
        self.uses_disc = self.uses_q and not rl_mode
        if self.uses_q:
            self.q = TabularQ(env.n_states, env.n_actions) if self.tabular else \
                TwinQ(env.state_dim, env.action_dim, net.q_hidden, init_rng)
            self.q_target = copy.deepcopy(self.q)
            self.q_opt = torch.optim.Adam(self.q.parameters(), lr=algo.lr_q)
        if self.uses_disc:
            self.disc = TabularDiscriminator(env.n_states) if self.tabular else \
                MLPDiscriminator(env.state_dim, net.disc_hidden, init_rng, delta_scale=env.dt)
            self.d_opt = torch.optim.Adam(self.disc.parameters(), lr=algo.lr_disc)

        if self.tabular:
            self.buffer = ReplayBuffer(cfg.training.buffer_capacity, (), (), np.int64, np.int64)
        else:
            self.buffer = ReplayBuffer(cfg.training.buffer_capacity, (env.state_dim,), (env.action_dim,))
        self.eval_starts = self._eval_starts(np.random.default_rng(eval_seq))
        self._state = env.reset()

    # ---- helpers ---------------------------------------------------------------------
    @property
    def planner(self) -> Optional[nn.Module]:
        return None if self.policy is None else self.policy.planner

    def _eval_starts(self, rng: np.random.Generator) -> np.ndarray:
        n = self.cfg.training.eval_episodes
        if self.tabular:
            return rng.choice(self.env.start_cells, size=n)
        return np.stack([self.env.sample_start(rng) for _ in range(n)])

    def _log(self, name: str, value: float) -> None:
        if not math.isfinite(value):
            raise TrainingAborted(f"{name} loss became non-finite at env step {self.env_steps}")
        self.loss_acc.setdefault(name, []).append(value)

    def drain_losses(self) -> dict[str, float]:
        out = {k: float(np.mean(v)) for k, v in self.loss_acc.items() if v}
        self.loss_acc = {}
        return out

    def _t(self, x, index: bool = False) -> torch.Tensor:
        if index:
            return torch.from_numpy(np.asarray(x, dtype=np.int64))
        return torch.from_numpy(np.asarray(x, dtype=np.float64))

    # ---- acting ----------------------------------------------------------------------
    def _policy_table(self) -> np.ndarray:
        with torch.no_grad():
            if self.policy is not None:
                return self.policy.policy_table()
            return torch.softmax(self.actor.table, dim=-1).numpy()

    def _sample_action(self, s, table: Optional[np.ndarray]):
        rng = self.act_rng
        if self.tabular:
            p = table[int(s)]
            return int(rng.choice(len(p), p=p / p.sum()))
        if self.policy is not None:
            a = self.policy.act(s, rng).action
        else:
            with torch.no_grad():
                mean, log_std = self.actor(self._t(s))
                a = (mean + torch.exp(log_std) * torch.from_numpy(rng.standard_normal(mean.shape))).numpy()
        return np.clip(a, -1.0, 1.0)

    def collect(self, n_steps: int, random: bool = False) -> None:
        env = self.env
        table = None if (random or not self.tabular) else self._policy_table()
        for _ in range(n_steps):
            s = self._state
            if random:
                a = int(self.act_rng.integers(env.n_actions)) if self.tabular else \
                    self.act_rng.uniform(-1.0, 1.0, size=env.action_dim)
            else:
                a = self._sample_action(s, table)
            s_next, r, done, truncated = env.step(a)
            self.buffer.add(s, a, s_next, r, done)
            self.env_steps += 1
            self._state = env.reset() if (done or truncated) else s_next

    # ---- inverse dynamics ------------------------------------------------------------
    def retrain_inverse_dynamics(self) -> None:
        inv = self.policy.inverse_dynamics if self.policy is not None else self.bco_inv
        data = self.buffer.ordered()
        idx_mode = self.tabular
        s, a, s_next = self._t(data.s, idx_mode), self._t(data.a, idx_mode), self._t(data.s_next, idx_mode)
        n = len(data)
        tr = self.cfg.training
        bs = self.cfg.training.batch_size
        eval_idx = torch.from_numpy(self.batch_rng.choice(n, size=min(n, 4 * bs), replace=False))
        rng = self.batch_rng

        def step():
            self.counters["invdyn_updates"] += 1
            idx = torch.from_numpy(rng.choice(n, size=min(n, bs), replace=False))
            return inverse_dynamics_loss(inv, s[idx], a[idx], s_next[idx])

        def evaluate():
            with torch.no_grad():
                return float(inverse_dynamics_loss(inv, s[eval_idx], a[eval_idx], s_next[eval_idx]))

        res = fit_until_converged(step, evaluate, self.inv_opt, tr.invdyn_steps_per_epoch,
                                  tr.invdyn_tol, tr.invdyn_patience, tr.invdyn_max_epochs)
        self._log("invdyn", res.final_loss)
        if self.policy is not None and self.tabular:
            self.policy.refresh_inverse_cache()

    def bco_round(self) -> None:
        data = self.buffer.ordered()
        tr = self.cfg.training
        idx_mode = self.tabular
        res = bco_update(self.bco_inv, self.inv_opt, self.actor, self.actor_opt,
                         self.expert_s, self.expert_s_next,
                         self._t(data.s, idx_mode), self._t(data.a, idx_mode), self._t(data.s_next, idx_mode),
                         self.batch_rng, tr.batch_size, steps_per_epoch=tr.invdyn_steps_per_epoch,
                         tol=tr.invdyn_tol, patience=tr.invdyn_patience, max_epochs=tr.invdyn_max_epochs)
        self.counters["invdyn_updates"] += res.inverse_fit.inner_epochs * tr.invdyn_steps_per_epoch
        self.counters["actor_updates"] += res.clone_fit.inner_epochs * tr.invdyn_steps_per_epoch
        self._log("invdyn", res.inverse_fit.final_loss)
        self._log("actor", res.clone_fit.final_loss)

    # ---- one gradient step -----------------------------------------------------------
    def _expert_batch(self, n: int):
        m = len(self.expert_s)
        idx = torch.from_numpy(self.batch_rng.choice(m, size=min(n, m), replace=m < n))
        return self.expert_s[idx], self.expert_s_next[idx]

    def _next_sampler(self):
        M = self.cfg.algo.n_mc
        rng = self.batch_rng

        def sample(s_next):
            B = s_next.shape[0]
            if self.policy is not None:
                pl, inv = self.policy.planner, self.policy.inverse_dynamics
                planned = pl.plan(s_next, torch.from_numpy(rng.standard_normal(s_next.shape)))
                mean, log_std = inv(s_next, planned)
                a = mean + torch.exp(log_std) * torch.from_numpy(rng.standard_normal(mean.shape))
                a = torch.clamp(a, -1.0, 1.0)
                eps = torch.from_numpy(rng.standard_normal((M, B, s_next.shape[-1])))
                return a, self.policy.log_prob(s_next, a, eps)
            mean, log_std = self.actor(s_next)
            a = torch.clamp(mean + torch.exp(log_std) * torch.from_numpy(rng.standard_normal(mean.shape)), -1, 1)
            return a, self.actor.log_prob(s_next, a)
        return sample

    def gradient_step(self) -> Optional[GradientReport]:
        """Discriminator, critic and actor/inverse updates for one batch.

        Returns the planner gradient report (applied by the caller, which may
        average it with other agents) or ``None`` when the planner is untouched.
        """
        cfg, algo = self.cfg, self.cfg.algo
        batch = self.buffer.sample(cfg.training.batch_size, self.batch_rng)
        idx_mode = self.tabular
        s, a = self._t(batch.s, idx_mode), self._t(batch.a, idx_mode)
        s_next = self._t(batch.s_next, idx_mode)
        done = self._t(batch.done)

        if self.uses_disc:
            e_s, e_next = self._expert_batch(len(batch))
            total, _ = discriminator_loss(self.disc, (s, s_next), (e_s, e_next), algo.gp_weight,
                                          algo.swap_discriminator_labels, self.batch_rng)
            self.d_opt.zero_grad(set_to_none=True)
            total.backward()
            self.d_opt.step()
            self.counters["disc_updates"] += 1
            self._log("disc", float(total.detach()))

        if self.uses_q:
            r = reward(self.disc, s, s_next, algo.reward_scale) if self.uses_disc else self._t(batch.r)
            if self.tabular:
                with torch.no_grad():
                    if self.policy is not None:
                        next_probs = self.policy.action_probs(s_next)
                    else:
                        next_probs = torch.softmax(self.actor.table[s_next], dim=-1)
                q_loss = soft_q_update(self.q, self.q_target, self.q_opt, s, a, r, s_next, done,
                                       algo.gamma, algo.entropy_weight, algo.tau, next_probs=next_probs)
            else:
                q_loss = soft_q_update(self.q, self.q_target, self.q_opt, s, a, r, s_next, done,
                                       algo.gamma, algo.entropy_weight, algo.tau,
                                       sample_next=self._next_sampler())
            self.counters["q_updates"] += 1
            self._log("q", q_loss)

        if self.policy is None:
            if self.variant == "gaifo":
                self._actor_step(s)
            return None
        if self.freeze_planner:
            return None
        return self._planner_report(s, a, s_next)

    def _actor_step(self, s) -> None:
        alpha = self.cfg.algo.entropy_weight
        if self.tabular:
            logp = self.actor.log_probs(s)
            with torch.no_grad():
                q = self.q(s)
            loss = (torch.exp(logp) * (alpha * logp - q)).sum(-1).mean()
        else:
            mean, log_std = self.actor(s)
            eps = torch.from_numpy(self.batch_rng.standard_normal(mean.shape))
            a = mean + torch.exp(log_std) * eps
            logp = self.actor.log_prob(s, a)
            loss = (alpha * logp - self.q(s, torch.clamp(a, -1.0, 1.0))).mean()
        self.actor_opt.zero_grad(set_to_none=True)
        loss.backward()
        for p in self.q.parameters():
            p.grad = None
        self.actor_opt.step()
        self.counters["actor_updates"] += 1
        self._log("actor", float(loss.detach()))

    def _advantage(self, q: torch.Tensor) -> torch.Tensor:
        if not self.cfg.algo.normalize_advantage:
            return q
        return (q - q.mean()) / (q.std(unbiased=False) + 1e-8)

    def _planner_report(self, s, a, s_next) -> GradientReport:
        algo = self.cfg.algo
        planner = self.policy.planner
        variant = self.variant
        if variant == "depo_supervised":
            e_s, e_next = self._expert_batch(self.cfg.training.batch_size)
            sup = supervised_planner_loss(planner, e_s, e_next)
            self._log("supervised", float(sup.detach()))
            return combined_gradient(planner, None, None, sup, 1.0)

        if self.tabular:
            with torch.no_grad():
                q_rows = self.q(s)
            q_sa = q_rows.gather(-1, a.reshape(-1, 1)).squeeze(-1)
            if variant == "gaifo_dp" or algo.depg_estimator == "expected":
                depg = depg_expected_loss(self.policy, s, q_rows, algo.entropy_weight,
                                          inverse_grad=variant == "gaifo_dp")
            else:
                depg = depg_loss(self.policy, s, a, q_sa, clip=algo.weight_clip)
        else:
            with torch.no_grad():
                q_sa = self.q(s, a)
            rng = self.batch_rng
            eps = torch.from_numpy(rng.standard_normal((algo.n_mc, len(s), s.shape[-1])))
            if algo.depg_estimator == "pathwise":
                eps_plan = torch.from_numpy(rng.standard_normal(s.shape))
                eps_act = torch.from_numpy(rng.standard_normal(a.shape))
                depg = depg_pathwise_loss(self.policy, self.q, s, eps_plan, eps_act, eps, algo.entropy_weight)
            else:
                depg = depg_loss(self.policy, s, a, self._advantage(q_sa), eps, clip=algo.weight_clip)
        self._log("depg", float(depg.detach()))

        if variant == "gaifo_dp":
            inv = self.policy.inverse_dynamics
            self.inv_opt.zero_grad(set_to_none=True)
            g_inv = torch.autograd.grad(depg, list(inv.parameters()), retain_graph=True, allow_unused=True)
            for p, g in zip(inv.parameters(), g_inv):
                p.grad = None if g is None else g.detach()
            self.inv_opt.step()
            self.counters["invdyn_updates"] += 1
            if self.tabular:
                self.policy.refresh_inverse_cache()
            return combined_gradient(planner, depg, None, None, 0.0)
        if variant == "agnostic_depg":
            return combined_gradient(planner, depg, None, None, algo.lambda_h)

        cdepg = cdepg_loss(planner, s, s_next, q_sa)
        self._log("cdepg", float(cdepg.detach()))
        sup = None
        if not self.rl_mode:
            e_s, e_next = self._expert_batch(self.cfg.training.batch_size)
            sup = supervised_planner_loss(planner, e_s, e_next)
            self._log("supervised", float(sup.detach()))
        return combined_gradient(planner, depg, cdepg, sup, algo.lambda_h)

    # ---- evaluation ------------------------------------------------------------------
    def evaluate(self) -> EvalResult:
        if self.tabular:
            return self._evaluate_grid()
        return self._evaluate_pointmass()

    def _evaluate_grid(self) -> EvalResult:
        env = self.env
        with torch.no_grad():
            if self.policy is not None:
                plan = torch.argmax(self.policy.planner.logits(torch.arange(env.n_states)), -1).numpy()
                inv = self.policy.inverse_table()
                acts = np.array([int(torch.argmax(inv[s, plan[s]])) for s in range(env.n_states)])
            else:
                plan = None
                acts = torch.argmax(self.actor.table, -1).numpy()
        coords = env.coord_array()
        returns, successes, sq = [], [], []
        for start in self.eval_starts:
            s, ret, ok = int(start), 0.0, False
            for _ in range(env.horizon):
                s_next = env.next_state(s, acts[s])
                if plan is not None:
                    sq.append(float(np.sum((coords[plan[s]] - coords[s_next]) ** 2)))
                r = 1.0 if s_next == env.goal_index else 0.0
                ret += r
                s = s_next
                if s == env.goal_index:
                    ok = True
                    break
            returns.append(ret)
            successes.append(ok)
        mse = float(np.mean(sq)) if sq else float("nan")
        return EvalResult(float(np.mean(returns)), float(np.mean(successes)), mse)

    def deterministic_action(self, states: np.ndarray) -> tuple[np.ndarray, Optional[np.ndarray]]:
        with torch.no_grad():
            st = torch.from_numpy(np.asarray(states, dtype=np.float64))
            if self.policy is not None:
                planned = self.policy.planner.plan(st)
                return self.policy.inverse_dynamics(st, planned)[0].numpy(), planned.numpy()
            return self.actor(st)[0].numpy(), None

    def _evaluate_pointmass(self) -> EvalResult:
        env = self.env
        states = self.eval_starts.copy()
        ret = np.zeros(len(states))
        reached = np.zeros(len(states), dtype=bool)
        sq = []
        for _ in range(env.horizon):
            a, planned = self.deterministic_action(states)
            nxt = env.dynamics(states, a)
            if planned is not None:
                sq.append(np.sum((planned - nxt) ** 2, axis=1))
            ret += -np.linalg.norm(nxt[:, : env.dim], axis=1)
            reached |= np.linalg.norm(nxt[:, : env.dim], axis=1) <= env.goal_radius
            states = nxt
        mse = float(np.mean(np.concatenate(sq))) if sq else float("nan")
        return EvalResult(float(np.mean(ret)), float(np.mean(reached)), mse)

    # ---- checkpoint sections ---------------------------------------------------------
    def param_sections(self) -> dict[str, ParamVector]:
        out = {}
        if self.policy is not None:
            out["planner"] = get_params(self.policy.planner)
            out["inverse_dynamics"] = get_params(self.policy.inverse_dynamics)
        if self.actor is not None:
            out["actor"] = get_params(self.actor)
        if self.variant == "bco":
            out["inverse_dynamics"] = get_params(self.bco_inv)
        if self.uses_q:
            out["q"] = get_params(self.q)
        if self.uses_disc:
            out["discriminator"] = get_params(self.disc)
        return out
