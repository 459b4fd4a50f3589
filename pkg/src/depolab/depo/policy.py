"""Decoupled policy: a state planner h(s'|s) composed with inverse dynamics I(a|s,s').

Two instantiations share one interface:

* tabular (grid world): the planner is a categorical over *all* states, the
  inverse dynamics an MLP over coordinate features so it also answers for
  targets that are not reachable;
* continuous (point mass): both modules are diagonal Gaussians and the
  planner predicts a residual ``s' = s + scale * (mu + sigma * eps)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from depolab.approx import DTYPE, MLP, GaussianHead, as_tensor, gaussian_log_prob


def grid_pair_features(coords: torch.Tensor, s_idx: torch.Tensor, t_idx: torch.Tensor,
                       extent: float) -> torch.Tensor:
    """(x, y, dx, dy) of a state pair, scaled to roughly [-1, 1]."""
    a, b = coords[s_idx], coords[t_idx]
    return torch.cat([a, b - a], dim=-1) / extent


# ---- tabular modules ----------------------------------------------------------------

class TabularPlanner(nn.Module):
    """Per-state logits plus one output bias shared by every state."""

    def __init__(self, n_states: int, rng: np.random.Generator, init_scale: float = 0.01):
        super().__init__()
        self.n_states = n_states
        self.table = nn.Parameter(torch.from_numpy(rng.normal(0.0, init_scale, (n_states, n_states))))
        self.bias = nn.Parameter(torch.zeros(n_states, dtype=DTYPE))

    def logits(self, s_idx: torch.Tensor) -> torch.Tensor:
        return self.table[s_idx] + self.bias

    def log_probs(self, s_idx: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.logits(s_idx), dim=-1)


class GridInverseDynamics(nn.Module):
    def __init__(self, coords: np.ndarray, n_actions: int, hidden: Sequence[int],
                 rng: np.random.Generator):
        super().__init__()
        self.register_buffer("coords", torch.from_numpy(np.asarray(coords, dtype=np.float64)))
        self.extent = float(max(np.ptp(coords, axis=0).max(), 1.0))
        self.n_states = len(coords)
        self.n_actions = n_actions
        self.net = MLP([4, *hidden, n_actions], rng)

    def log_probs(self, s_idx: torch.Tensor, t_idx: torch.Tensor) -> torch.Tensor:
        x = grid_pair_features(self.coords, s_idx, t_idx, self.extent)
        return torch.log_softmax(self.net(x), dim=-1)

    def log_prob_table(self) -> torch.Tensor:
        """log I(a|s,s') for every pair, shape (S, S, A)."""
        S = self.n_states
        s = torch.arange(S).repeat_interleave(S)
        t = torch.arange(S).repeat(S)
        return self.log_probs(s, t).reshape(S, S, self.n_actions)


class TabularActor(nn.Module):
    """Monolithic state-to-action softmax table (baselines)."""

    def __init__(self, n_states: int, n_actions: int, rng: np.random.Generator,
                 init_scale: float = 0.01):
        super().__init__()
        self.table = nn.Parameter(torch.from_numpy(rng.normal(0.0, init_scale, (n_states, n_actions))))

    def log_probs(self, s_idx: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.table[s_idx], dim=-1)


class TabularQ(nn.Module):
    def __init__(self, n_states: int, n_actions: int):
        super().__init__()
        self.table = nn.Parameter(torch.zeros(n_states, n_actions, dtype=DTYPE))

    def forward(self, s_idx: torch.Tensor) -> torch.Tensor:
        return self.table[s_idx]


# ---- continuous modules ---------------------------------------------------------------

class GaussianPlanner(nn.Module):
    def __init__(self, state_dim: int, hidden: Sequence[int], rng: np.random.Generator,
                 delta_scale: float, log_std_min: float = -20.0, log_std_max: float = 2.0,
                 init_log_std: float = 0.0):
        super().__init__()
        self.delta_scale = float(delta_scale)
        self.head = GaussianHead(state_dim, state_dim, hidden, rng, log_std_min, log_std_max,
                                 init_log_std=init_log_std)

    def plan(self, s: torch.Tensor, eps: Optional[torch.Tensor] = None) -> torch.Tensor:
        mean, log_std = self.head(s)
        z = mean if eps is None else mean + torch.exp(log_std) * eps
        return s + self.delta_scale * z

    def log_prob(self, s: torch.Tensor, s_next: torch.Tensor) -> torch.Tensor:
        mean, log_std = self.head(s)
        z = (s_next - s) / self.delta_scale
        # density of s' itself: change of variables adds -d*log(scale)
        return gaussian_log_prob(mean, log_std, z) - s.shape[-1] * math.log(self.delta_scale)


class GaussianInverseDynamics(nn.Module):
    def __init__(self, state_dim: int, action_dim: int, hidden: Sequence[int],
                 rng: np.random.Generator, delta_scale: float,
                 log_std_min: float = -20.0, log_std_max: float = 2.0, init_log_std: float = 0.0):
        super().__init__()
        self.delta_scale = float(delta_scale)
        self.head = GaussianHead(2 * state_dim, action_dim, hidden, rng, log_std_min, log_std_max,
                                 init_log_std=init_log_std)

    def features(self, s: torch.Tensor, s_next: torch.Tensor) -> torch.Tensor:
        return torch.cat([s, (s_next - s) / self.delta_scale], dim=-1)

    def forward(self, s, s_next):
        return self.head(self.features(s, s_next))

    def log_prob(self, s, s_next, a) -> torch.Tensor:
        return self.head.log_prob(self.features(s, s_next), a)


class GaussianActor(nn.Module):
    """Monolithic Gaussian policy (baselines)."""

    def __init__(self, state_dim: int, action_dim: int, hidden: Sequence[int],
                 rng: np.random.Generator, log_std_min: float = -20.0, log_std_max: float = 2.0,
                 init_log_std: float = 0.0):
        super().__init__()
        self.head = GaussianHead(state_dim, action_dim, hidden, rng, log_std_min, log_std_max,
                                 init_log_std=init_log_std)

    def forward(self, s):
        return self.head(s)

    def log_prob(self, s, a):
        return self.head.log_prob(s, a)


class TwinQ(nn.Module):
    def __init__(self, state_dim: int, action_dim: int, hidden: Sequence[int],
                 rng: np.random.Generator):
        super().__init__()
        self.q1 = MLP([state_dim + action_dim, *hidden, 1], rng)
        self.q2 = MLP([state_dim + action_dim, *hidden, 1], rng)

    def both(self, s, a) -> tuple[torch.Tensor, torch.Tensor]:
        x = torch.cat([s, a], dim=-1)
        return self.q1(x).squeeze(-1), self.q2(x).squeeze(-1)

    def forward(self, s, a) -> torch.Tensor:
        q1, q2 = self.both(s, a)
        return torch.minimum(q1, q2)


# ---- the composed policy ---------------------------------------------------------------

@dataclass
class ActResult:
    action: np.ndarray | int
    planned: np.ndarray | int


class DecoupledPolicy(nn.Module):
    """``pi(a|s) = E_{s'~h(.|s)} I(a|s,s')``."""

    def __init__(self, planner: nn.Module, inverse_dynamics: nn.Module, n_mc: int = 16):
        super().__init__()
        self.planner = planner
        self.inverse_dynamics = inverse_dynamics
        self.tabular = isinstance(planner, TabularPlanner)
        self.n_mc = n_mc
        self._inv_cache: Optional[torch.Tensor] = None

    # tabular ----------------------------------------------------------------------
    def refresh_inverse_cache(self) -> None:
        with torch.no_grad():
            self._inv_cache = torch.exp(self.inverse_dynamics.log_prob_table())

    def inverse_table(self, differentiable: bool = False) -> torch.Tensor:
        if differentiable:
            return torch.exp(self.inverse_dynamics.log_prob_table())
        if self._inv_cache is None:
            self.refresh_inverse_cache()
        return self._inv_cache

    def action_probs(self, s_idx: torch.Tensor, inv: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Composed pi(a|s) for a batch of state indices, shape (B, A)."""
        h = torch.exp(self.planner.log_probs(s_idx))
        inv = self.inverse_table() if inv is None else inv
        return torch.einsum("bt,bta->ba", h, inv[s_idx])

    def policy_table(self) -> np.ndarray:
        with torch.no_grad():
            return self.action_probs(torch.arange(self.planner.n_states)).numpy()

    def planner_table(self) -> np.ndarray:
        with torch.no_grad():
            return torch.exp(self.planner.log_probs(torch.arange(self.planner.n_states))).numpy()

    # continuous -------------------------------------------------------------------
    def log_prob(self, s: torch.Tensor, a: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
        """Monte-Carlo marginal ``log mean_m I(a|s, h(eps_m; s))``; ``eps`` has shape (M, B, d)."""
        M = eps.shape[0]
        s_rep = s.unsqueeze(0).expand(M, *s.shape)
        planned = self.planner.plan(s_rep, eps)
        a_rep = a.unsqueeze(0).expand(M, *a.shape)
        lp = self.inverse_dynamics.log_prob(s_rep, planned, a_rep)
        return torch.logsumexp(lp, dim=0) - math.log(M)

    # acting -----------------------------------------------------------------------
    def act(self, s, rng: np.random.Generator, deterministic: bool = False) -> ActResult:
        """Plan a target, then pick the action realizing it; returns both."""
        with torch.no_grad():
            if self.tabular:
                s_idx = int(s)
                h = torch.exp(self.planner.log_probs(torch.tensor([s_idx])))[0].numpy()
                inv = self.inverse_table()[s_idx]
                if deterministic:
                    target = int(np.argmax(h))
                    return ActResult(int(np.argmax(inv[target].numpy())), target)
                target = int(rng.choice(len(h), p=h / h.sum()))
                p = inv[target].numpy()
                return ActResult(int(rng.choice(len(p), p=p / p.sum())), target)
            st = as_tensor(s)
            if deterministic:
                planned = self.planner.plan(st)
                a = self.inverse_dynamics(st, planned)[0]
            else:
                planned = self.planner.plan(st, torch.from_numpy(rng.standard_normal(st.shape)))
                mean, log_std = self.inverse_dynamics(st, planned)
                a = mean + torch.exp(log_std) * torch.from_numpy(rng.standard_normal(mean.shape))
            return ActResult(a.numpy(), planned.numpy())


def act(policy: DecoupledPolicy, s, rng: np.random.Generator, deterministic: bool = False) -> ActResult:
    return policy.act(s, rng, deterministic)


def planner_mode(policy: DecoupledPolicy, s) -> np.ndarray | int:
    with torch.no_grad():
        if policy.tabular:
            return int(torch.argmax(policy.planner.logits(torch.tensor([int(s)])), dim=-1)[0])
        return policy.planner.plan(as_tensor(s)).numpy()
