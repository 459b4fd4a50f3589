"""One-step error bound for a decoupled policy.

For a deterministic transition ``T`` that is L-Lipschitz in the action and a
reference inverse dynamics ``I_B`` that is C-Lipschitz in the target state,

    |T(s, I_phi(s, h_psi(s))) - T(s, I_B(s, h_E(s)))|
        <= L*C*|h_E(s) - h_psi(s)| + L*|I_B(s, s_hat) - I_phi(s, s_hat)|,   s_hat = h_psi(s).

``L`` and ``C`` are measured, not assumed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from depolab.approx import as_tensor
from depolab.depo.policy import DecoupledPolicy, planner_mode
from depolab.envs.gridworld import GridWorld, true_inverse_dynamics
from depolab.envs.pointmass import PointMass


@dataclass
class ErrorBoundReport:
    observed_gap: np.ndarray
    planner_term: np.ndarray
    invdyn_term: np.ndarray
    lipschitz_L: float
    lipschitz_C: float
    slack: float = 1e-9

    @property
    def bound(self) -> np.ndarray:
        return self.planner_term + self.invdyn_term

    @property
    def holds(self) -> np.ndarray:
        return self.observed_gap <= self.bound + self.slack

    @property
    def fraction_holding(self) -> float:
        return float(np.mean(self.holds)) if self.holds.size else 1.0


def evaluate_bound(states, transition: Callable, planner: Callable, inverse: Callable,
                   expert_planner: Callable, reference_inverse: Callable,
                   state_dist: Callable, action_dist: Callable, L: float, C: float) -> ErrorBoundReport:
    gap, p_term, i_term = [], [], []
    for s in states:
        s_hat = planner(s)
        s_exp = expert_planner(s)
        a_agent = inverse(s, s_hat)
        reached = transition(s, a_agent)
        target = transition(s, reference_inverse(s, s_exp))
        gap.append(state_dist(reached, target))
        p_term.append(L * C * state_dist(s_exp, s_hat))
        i_term.append(L * action_dist(reference_inverse(s, s_hat), a_agent))
    return ErrorBoundReport(np.array(gap), np.array(p_term), np.array(i_term), float(L), float(C))


# ---- point mass ------------------------------------------------------------------------

def _euclid(x, y) -> float:
    return float(np.linalg.norm(np.asarray(x) - np.asarray(y)))


def sample_pointmass_states(env: PointMass, n: int, rng: np.random.Generator) -> np.ndarray:
    p = rng.uniform(-env.start_box, env.start_box, size=(n, env.dim))
    v = rng.uniform(-1.0, 1.0, size=(n, env.dim))
    return np.concatenate([p, v], axis=1)


def estimate_pointmass_lipschitz(env: PointMass, rng: np.random.Generator,
                                 n_pairs: int = 10_000, delta: float = 1e-3) -> tuple[float, float]:
    """Max difference quotients over perturbation pairs.

    The first pairs perturb single coordinates from interior points (where
    neither clip is active); the rest are random directions and scales.
    """
    d_act, d_state = env.action_dim, env.state_dim
    states = sample_pointmass_states(env, n_pairs, rng)
    a1 = rng.uniform(-0.5, 0.5, size=(n_pairs, d_act))
    da = rng.normal(size=(n_pairs, d_act)) * rng.uniform(1e-3, 0.5, size=(n_pairs, 1))
    for i in range(min(d_act, n_pairs)):
        da[i] = 0.0
        da[i, i] = delta
    a2 = a1 + da
    num = np.linalg.norm(env.dynamics(states, a1) - env.dynamics(states, a2), axis=1)
    L = float(np.max(num / np.linalg.norm(a1 - a2, axis=1)))

    t1 = env.dynamics(states, rng.uniform(-0.5, 0.5, size=(n_pairs, d_act)))
    dt_ = rng.normal(size=(n_pairs, d_state)) * rng.uniform(1e-4, 0.05, size=(n_pairs, 1))
    for i in range(min(d_state, n_pairs)):
        dt_[i] = 0.0
        dt_[i, i] = delta * env.dt
    t2 = t1 + dt_
    num = np.linalg.norm(env.true_inverse_dynamics(states, t1) - env.true_inverse_dynamics(states, t2), axis=1)
    C = float(np.max(num / np.linalg.norm(t1 - t2, axis=1)))
    return L, C


def pointmass_theorem2(env: PointMass, planner: Callable, inverse: Callable, expert: Callable,
                       states: np.ndarray, rng: np.random.Generator,
                       n_pairs: int = 10_000) -> ErrorBoundReport:
    """``planner(s) -> s_hat`` and ``inverse(s, s_hat) -> raw action`` in deterministic mode."""
    L, C = estimate_pointmass_lipschitz(env, rng, n_pairs)
    return evaluate_bound(
        states,
        transition=env.dynamics,
        planner=planner,
        inverse=inverse,
        expert_planner=lambda s: env.dynamics(s, expert(s)),
        reference_inverse=env.true_inverse_dynamics,
        state_dist=_euclid, action_dist=_euclid, L=L, C=C,
    )


# ---- grid world ------------------------------------------------------------------------

def _discrete(x, y) -> float:
    return 0.0 if int(x) == int(y) else 1.0


def grid_lipschitz(gw: GridWorld) -> tuple[float, float]:
    """Exhaustive Lipschitz constants under the discrete metric on states and actions."""
    L = C = 0.0
    for s in range(gw.n_states):
        succ = gw.successors[s]
        for a in range(gw.n_actions):
            for b in range(a + 1, gw.n_actions):
                L = max(L, _discrete(succ[a], succ[b]))
        labels = [true_inverse_dynamics(gw, s, t) for t in range(gw.n_states)]
        if len(set(labels)) > 1:
            C = 1.0
    return L, C


def grid_theorem2(gw: GridWorld, planner: Callable, inverse: Callable,
                  expert_planner: Callable, states) -> ErrorBoundReport:
    L, C = grid_lipschitz(gw)
    return evaluate_bound(
        states,
        transition=gw.next_state,
        planner=planner,
        inverse=inverse,
        expert_planner=expert_planner,
        reference_inverse=lambda s, t: true_inverse_dynamics(gw, s, t),
        state_dist=_discrete, action_dist=_discrete, L=L, C=C,
    )


def policy_callables(policy: DecoupledPolicy) -> tuple[Callable, Callable]:
    """Deterministic planner and inverse-dynamics maps of a decoupled policy."""
    def inverse(s, target):
        with torch.no_grad():
            if policy.tabular:
                return int(torch.argmax(policy.inverse_table()[int(s), int(target)]))
            return policy.inverse_dynamics(as_tensor(s), as_tensor(target))[0].numpy()

    return (lambda s: planner_mode(policy, s)), inverse


def theorem2_report(policy: DecoupledPolicy, env, expert, states,
                    rng: Optional[np.random.Generator] = None) -> ErrorBoundReport:
    """Bound check for a decoupled policy in deterministic mode.

    ``expert`` is a :class:`TabularPolicy` on the grid and a state-to-action
    controller on the point mass.
    """
    planner, inverse = policy_callables(policy)
    if isinstance(env, GridWorld):
        def expert_planner(s):
            return env.next_state(s, int(np.argmax(expert.probs[int(s)])))
        return grid_theorem2(env, planner, inverse, expert_planner, states)
    if isinstance(env, PointMass):
        rng = np.random.default_rng(0) if rng is None else rng
        return pointmass_theorem2(env, planner, inverse, expert, states, rng)
    raise TypeError("the bound needs a deterministic environment")
