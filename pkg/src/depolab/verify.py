"""Property suites over fixed seed sets.

Each suite returns a list of :class:`Check` records (name, residual,
tolerance); the CLI prints them and the acceptance tests assert on them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from depolab.adversarial import MLPDiscriminator, TabularDiscriminator, discriminator_loss
from depolab.approx import ParamVector, finite_difference, get_params, grad, relative_error, set_params
from depolab.depo.bounds import sample_pointmass_states, theorem2_report
from depolab.depo.losses import (
    cdepg_loss,
    depg_loss,
    depg_pathwise_loss,
    inverse_dynamics_loss,
    supervised_planner_loss,
)
from depolab.depo.policy import (
    DecoupledPolicy,
    GaussianInverseDynamics,
    GaussianPlanner,
    GridInverseDynamics,
    TabularPlanner,
    TabularQ,
    TwinQ,
)
from depolab.envs.gridworld import GridWorld, gridworld_expert, to_finite_mdp
from depolab.envs.pointmass import PointMass, pointmass_expert
from depolab.mdp import (
    FiniteMDP,
    TabularPolicy,
    counterexample_policies,
    find_redundancy_witness,
    marginal_planner,
    occupancy_measures,
    planner_from_occupancy,
    random_mdp,
    same_next_state_action_set,
    transition_occupancy_direct,
    verify_column_dominance,
    verify_theorem1,
)
from depolab.trainer.sac import td_loss

EXACT_TOL = 1e-9
FD_TOL = 1e-4


@dataclass(frozen=True)
class Check:
    name: str
    residual: float
    tolerance: float
    higher_is_better: bool = False

    @property
    def passed(self) -> bool:
        if not np.isfinite(self.residual):
            return False
        if self.higher_is_better:
            return self.residual >= self.tolerance
        return self.residual <= self.tolerance

    def line(self) -> str:
        op = ">=" if self.higher_is_better else "<="
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<44s} {self.residual:.3e} {op} {self.tolerance:.1e}"


def worst(checks: list[Check]) -> Check:
    """The check closest to (or furthest past) its tolerance."""
    def slack(c: Check) -> float:
        if not np.isfinite(c.residual):
            return -np.inf
        if c.higher_is_better:
            return c.residual - c.tolerance
        return c.tolerance - c.residual if c.tolerance == 0 else (c.tolerance - c.residual) / c.tolerance
    return min(checks, key=slack)


# ---- occupancy -----------------------------------------------------------------------------

def _mdp_shape(seed: int) -> tuple[int, int]:
    rng = np.random.default_rng(10_000 + seed)
    return int(rng.integers(2, 11)), int(rng.integers(1, 6))


def occupancy_suite(seeds=range(20), discount: float = 0.99) -> list[Check]:
    checks = []
    for seed in seeds:
        S, A = _mdp_shape(seed)
        mdp, pi = random_mdp(S, A, seed, discount=discount)
        om = occupancy_measures(mdp, pi)
        direct = marginal_planner(mdp, pi)
        recovered = planner_from_occupancy(om)
        mask = recovered.defined
        bij = float(np.max(np.abs(direct.probs[mask] - recovered.probs[mask]))) if mask.any() else 0.0
        mass = abs(om.state_om.sum() - 1.0 / (1.0 - discount)) * (1.0 - discount)
        pair = float(np.max(np.abs(om.transition_om - transition_occupancy_direct(mdp, pi))))
        checks.append(Check(f"bijection seed={seed} ({S}x{A})", bij, EXACT_TOL))
        checks.append(Check(f"normalization seed={seed}", mass, EXACT_TOL))
        checks.append(Check(f"pair OM two routes seed={seed}", pair, EXACT_TOL))
    return checks


# ---- dominance / redundancy ----------------------------------------------------------------

def planted_duplicate_mdp(seed: int, n_states: int = 6, n_actions: int = 3) -> tuple[FiniteMDP, TabularPolicy]:
    """Random MDP in which the last action at every state mixes two others."""
    mdp, pi = random_mdp(n_states, n_actions, seed)
    rng = np.random.default_rng(seed)
    T = np.array(mdp.transition)
    w = rng.uniform(0.2, 0.8, size=n_states)
    T[:, -1] = w[:, None] * T[:, 0] + (1 - w[:, None]) * T[:, 1]
    return FiniteMDP(T, mdp.initial, mdp.discount, mdp.reward), pi


def redundancy_checks(mdp: FiniteMDP, base: TabularPolicy, label: str) -> list[Check]:
    witness = find_redundancy_witness(mdp)
    if witness is None:
        return [Check(f"witness found [{label}]", 0.0, 1.0, higher_is_better=True)]
    pi0, pi1 = counterexample_policies(mdp, witness, base)
    gap = float(np.max(np.abs(pi0.probs[witness.state] - pi1.probs[witness.state])))
    om0, om1 = occupancy_measures(mdp, pi0), occupancy_measures(mdp, pi1)
    same = float(np.max(np.abs(om0.transition_om - om1.transition_om)))
    return [Check(f"policies differ at s_m [{label}]", gap, 0.5, higher_is_better=True),
            Check(f"transition OMs equal [{label}]", same, EXACT_TOL)]


def dominance_suite(seeds=range(20)) -> list[Check]:
    checks = []
    for seed in seeds:
        S, A = _mdp_shape(seed)
        mdp, pi = random_mdp(S, A, seed)
        rep = verify_column_dominance(mdp, pi)
        checks.append(Check(f"column dominance margin seed={seed}", rep.min_margin, 0.0, higher_is_better=True))
    gw = GridWorld(k=2)
    mdp = to_finite_mdp(gw)
    checks += redundancy_checks(mdp, TabularPolicy.uniform(mdp.n_states, mdp.n_actions), "grid k=2")
    for seed in range(5):
        mdp, pi = planted_duplicate_mdp(seed)
        checks += redundancy_checks(mdp, pi, f"planted seed={seed}")
    return checks


# ---- theorem 1 -----------------------------------------------------------------------------

def theorem1_suite(ks=(2, 4), n_redistributions: int = 10, seed: int = 0) -> list[Check]:
    checks = []
    rng = np.random.default_rng(seed)
    for k in ks:
        gw = GridWorld(k=k)
        mdp = to_finite_mdp(gw)
        expert = gridworld_expert(gw)
        candidates = [s for s in range(gw.n_states) if s != gw.goal_index]
        for i in range(n_redistributions):
            s_hat = int(rng.choice(candidates))
            support = set(np.flatnonzero(expert.probs[s_hat] > 0).tolist())
            group = next(g for _, g in same_next_state_action_set(mdp, s_hat) if support <= set(g))
            q = np.zeros(mdp.n_actions)
            q[group] = rng.dirichlet(np.ones(len(group)))
            rep = verify_theorem1(mdp, expert, s_hat, q)
            checks.append(Check(f"value unchanged k={k} #{i} (s={s_hat})", rep.max_value_difference, EXACT_TOL))
    return checks


# ---- gradients -----------------------------------------------------------------------------

def _fd_check(name: str, objective: Callable[[], torch.Tensor], module: torch.nn.Module,
              fd_objective: Callable[[], torch.Tensor] | None = None) -> Check:
    analytic = grad(objective(), module)
    f = fd_objective or objective

    def value():
        with torch.enable_grad():
            return float(f().detach())
    numeric = finite_difference(value, module)
    return Check(name, relative_error(analytic, numeric), FD_TOL)


def _small_grid_policy(rng: np.random.Generator) -> tuple[GridWorld, DecoupledPolicy]:
    gw = GridWorld(k=2, width=3, height=3, goal=(2, 2), shaded_zone=((2, 2),), expert_moves="RRUU")
    planner = TabularPlanner(gw.n_states, rng, init_scale=1.0)
    inv = GridInverseDynamics(gw.coord_array(), gw.n_actions, (8,), rng)
    return gw, DecoupledPolicy(planner, inv)


def _continuous_policy(rng: np.random.Generator, n_mc: int = 4) -> DecoupledPolicy:
    planner = GaussianPlanner(4, (8,), rng, delta_scale=0.05, init_log_std=-1.0)
    inv = GaussianInverseDynamics(4, 2, (8,), rng, delta_scale=0.05, init_log_std=-1.0)
    return DecoupledPolicy(planner, inv, n_mc=n_mc)


def _tabular_depg_check(seed: int) -> Check:
    rng = np.random.default_rng(seed)
    gw, policy = _small_grid_policy(rng)
    B = 6
    s = torch.from_numpy(rng.integers(gw.n_states, size=B))
    a = torch.from_numpy(rng.integers(gw.n_actions, size=B))
    q = torch.from_numpy(rng.normal(size=B))
    with torch.no_grad():
        w = q / policy.action_probs(s).gather(-1, a.reshape(-1, 1)).squeeze(-1)

    def frozen_weight():
        # Q / pi held at the current parameters; only pi varies
        return -(w * policy.action_probs(s).gather(-1, a.reshape(-1, 1)).squeeze(-1)).mean()
    return _fd_check(f"DePG tabular seed={seed}", lambda: depg_loss(policy, s, a, q, clip=1e12),
                     policy.planner, frozen_weight)


def _continuous_depg_check(seed: int) -> Check:
    rng = np.random.default_rng(seed)
    policy = _continuous_policy(rng)
    B = 5
    s = torch.from_numpy(rng.normal(size=(B, 4)))
    a = torch.from_numpy(rng.uniform(-1, 1, size=(B, 2)))
    q = torch.from_numpy(rng.normal(size=B))
    eps = torch.from_numpy(rng.standard_normal((policy.n_mc, B, 4)))
    return _fd_check(f"DePG continuous seed={seed}", lambda: depg_loss(policy, s, a, q, eps), policy.planner)


def _pathwise_depg_check(seed: int) -> Check:
    rng = np.random.default_rng(seed)
    policy = _continuous_policy(rng)
    q = TwinQ(4, 2, (8,), rng)
    B = 5
    s = torch.from_numpy(rng.normal(size=(B, 4)) * 0.3)
    e_plan = torch.from_numpy(rng.standard_normal((B, 4)))
    e_act = torch.from_numpy(rng.standard_normal((B, 2)) * 0.1)
    e_mc = torch.from_numpy(rng.standard_normal((policy.n_mc, B, 4)))
    return _fd_check(f"DePG pathwise seed={seed}",
                     lambda: depg_pathwise_loss(policy, q, s, e_plan, e_act, e_mc, 0.1), policy.planner)


def _cdepg_check(seed: int) -> Check:
    rng = np.random.default_rng(seed)
    policy = _continuous_policy(rng)
    B = 6
    s = torch.from_numpy(rng.normal(size=(B, 4)))
    s_next = s + 0.05 * torch.from_numpy(rng.normal(size=(B, 4)))
    q = torch.from_numpy(rng.normal(size=B))
    return _fd_check(f"CDePG seed={seed}", lambda: cdepg_loss(policy.planner, s, s_next, q), policy.planner)


def _cdepg_tabular_check(seed: int) -> Check:
    rng = np.random.default_rng(seed)
    gw, policy = _small_grid_policy(rng)
    s = torch.from_numpy(rng.integers(gw.n_states, size=6))
    t = torch.from_numpy(rng.integers(gw.n_states, size=6))
    q = torch.from_numpy(rng.normal(size=6))
    return _fd_check(f"CDePG tabular seed={seed}", lambda: cdepg_loss(policy.planner, s, t, q), policy.planner)


def _supervised_checks(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    gw, tab = _small_grid_policy(rng)
    s = torch.from_numpy(rng.integers(gw.n_states, size=6))
    t = torch.from_numpy(rng.integers(gw.n_states, size=6))
    a = torch.from_numpy(rng.integers(gw.n_actions, size=6))
    cont = _continuous_policy(rng)
    cs = torch.from_numpy(rng.normal(size=(6, 4)))
    cn = cs + 0.05 * torch.from_numpy(rng.normal(size=(6, 4)))
    ca = torch.from_numpy(rng.uniform(-1, 1, size=(6, 2)))
    return [
        _fd_check(f"supervised planner tabular seed={seed}",
                  lambda: supervised_planner_loss(tab.planner, s, t), tab.planner),
        _fd_check(f"supervised planner gaussian seed={seed}",
                  lambda: supervised_planner_loss(cont.planner, cs, cn), cont.planner),
        _fd_check(f"inverse dynamics grid seed={seed}",
                  lambda: inverse_dynamics_loss(tab.inverse_dynamics, s, a, t), tab.inverse_dynamics),
        _fd_check(f"inverse dynamics gaussian seed={seed}",
                  lambda: inverse_dynamics_loss(cont.inverse_dynamics, cs, ca, cn), cont.inverse_dynamics),
    ]


def _discriminator_checks(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    B = 6
    mlp = MLPDiscriminator(4, (8,), rng, delta_scale=0.05)
    s_a = torch.from_numpy(rng.normal(size=(B, 4)))
    s_e = torch.from_numpy(rng.normal(size=(B, 4)))
    n_a = s_a + 0.05 * torch.from_numpy(rng.normal(size=(B, 4)))
    n_e = s_e + 0.05 * torch.from_numpy(rng.normal(size=(B, 4)))
    t = torch.from_numpy(rng.uniform(size=B))
    tab = TabularDiscriminator(9, rng, init_scale=0.5)
    i_a, i_e = (torch.from_numpy(rng.integers(9, size=B)) for _ in range(2))
    j_a, j_e = (torch.from_numpy(rng.integers(9, size=B)) for _ in range(2))
    return [
        _fd_check(f"discriminator mlp+gp seed={seed}",
                  lambda: discriminator_loss(mlp, (s_a, n_a), (s_e, n_e), 1.0, t=t)[0], mlp),
        _fd_check(f"discriminator tabular+gp seed={seed}",
                  lambda: discriminator_loss(tab, (i_a, j_a), (i_e, j_e), 1.0, t=t)[0], tab),
    ]


def _td_checks(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    B = 6
    twin = TwinQ(4, 2, (8,), rng)
    s = torch.from_numpy(rng.normal(size=(B, 4)))
    a = torch.from_numpy(rng.uniform(-1, 1, size=(B, 2)))
    y = torch.from_numpy(rng.normal(size=B))
    tq = TabularQ(9, 4)
    _perturb(tq, rng, 1.0)
    si = torch.from_numpy(rng.integers(9, size=B))
    ai = torch.from_numpy(rng.integers(4, size=B))
    return [
        _fd_check(f"soft-Q TD twin seed={seed}", lambda: td_loss(twin, s, a, y), twin),
        _fd_check(f"soft-Q TD tabular seed={seed}", lambda: td_loss(tq, si, ai, y), tq),
    ]


def gradients_suite(seeds=range(10)) -> list[Check]:
    checks = []
    for seed in seeds:
        checks.append(_tabular_depg_check(seed))
        checks.append(_continuous_depg_check(seed))
        checks.append(_pathwise_depg_check(seed))
        checks.append(_cdepg_check(seed))
        checks.append(_cdepg_tabular_check(seed))
        checks += _supervised_checks(seed)
        checks += _discriminator_checks(seed)
        checks += _td_checks(seed)
    return checks


# ---- theorem 2 -----------------------------------------------------------------------------

def _perturb(module: torch.nn.Module, rng: np.random.Generator, scale: float) -> None:
    p = get_params(module)
    set_params(module, ParamVector(p.values + scale * rng.normal(size=p.values.size), p.layout))


def theorem2_checks(policy: DecoupledPolicy, env, label: str, n_states: int = 1000,
                    seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    if isinstance(env, GridWorld):
        cells = [s for s in range(env.n_states) if s != env.goal_index]
        states = rng.choice(cells, size=n_states)
        expert = gridworld_expert(env)
    else:
        states = sample_pointmass_states(env, n_states, rng)
        expert = pointmass_expert(env)
    rep = theorem2_report(policy, env, expert, states, rng)
    excess = float(np.max(rep.observed_gap - rep.bound))
    return [Check(f"bound holds everywhere [{label}]", rep.fraction_holding, 1.0, higher_is_better=True),
            Check(f"max(gap - bound) [{label}]", excess, rep.slack)]


def theorem2_suite(seeds=range(3)) -> list[Check]:
    checks = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for k in (1, 4):
            gw = GridWorld(k=k)
            planner = TabularPlanner(gw.n_states, rng, init_scale=1.0)
            inv = GridInverseDynamics(gw.coord_array(), gw.n_actions, (16,), rng)
            policy = DecoupledPolicy(planner, inv)
            checks += theorem2_checks(policy, gw, f"grid k={k} seed={seed}", seed=seed)
        env = PointMass()
        planner = GaussianPlanner(4, (16,), rng, delta_scale=env.dt)
        inv = GaussianInverseDynamics(4, 2, (16,), rng, delta_scale=env.dt)
        policy = DecoupledPolicy(planner, inv)
        checks += theorem2_checks(policy, env, f"point mass seed={seed}", seed=seed)
        _perturb(planner, rng, 0.1)
        _perturb(inv, rng, 0.1)
        checks += theorem2_checks(policy, env, f"point mass perturbed seed={seed}", seed=seed + 100)
    return checks


SUITES: dict[str, Callable[[], list[Check]]] = {
    "occupancy": occupancy_suite,
    "gradients": gradients_suite,
    "theorem1": theorem1_suite,
    "theorem2": theorem2_suite,
    "dominance": dominance_suite,
}


def run_suite(name: str) -> list[Check]:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    return SUITES[name]()
