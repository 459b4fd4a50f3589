"""State-pair discriminator supplying the imitation reward ``scale * log D(s, s')``."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from depolab.approx import DTYPE, MLP


class TabularDiscriminator(nn.Module):
    """Bilinear logit ``onehot(s)^T W onehot(s') + b``: one free logit per state pair.

    The one-hot encoding gives the gradient penalty a continuous space to
    interpolate in.
    """

    def __init__(self, n_states: int, rng: Optional[np.random.Generator] = None, init_scale: float = 0.0):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_states = n_states
        self.weight = nn.Parameter(torch.from_numpy(rng.normal(0.0, init_scale, (n_states, n_states))
                                                    if init_scale > 0 else np.zeros((n_states, n_states))))
        self.bias = nn.Parameter(torch.zeros((), dtype=DTYPE))

    def features(self, s, s_next) -> torch.Tensor:
        eye = torch.eye(self.n_states, dtype=DTYPE)
        return torch.cat([eye[s], eye[s_next]], dim=-1)

    def logit_from_features(self, x: torch.Tensor) -> torch.Tensor:
        x1, x2 = x[..., : self.n_states], x[..., self.n_states:]
        return torch.einsum("bi,ij,bj->b", x1, self.weight, x2) + self.bias

    def logit(self, s, s_next) -> torch.Tensor:
        return self.weight[s, s_next] + self.bias


class MLPDiscriminator(nn.Module):
    """MLP logit over ``(s, (s' - s) / delta_scale)``."""

    def __init__(self, state_dim: int, hidden: Sequence[int], rng: np.random.Generator,
                 delta_scale: float = 1.0):
        super().__init__()
        self.delta_scale = float(delta_scale)
        self.net = MLP([2 * state_dim, *hidden, 1], rng)

    def features(self, s, s_next) -> torch.Tensor:
        return torch.cat([s, (s_next - s) / self.delta_scale], dim=-1)

    def logit_from_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(-1)

    def logit(self, s, s_next) -> torch.Tensor:
        return self.logit_from_features(self.features(s, s_next))


def probability(disc: nn.Module, s, s_next) -> torch.Tensor:
    return torch.sigmoid(disc.logit(s, s_next))


def gradient_penalty(disc: nn.Module, x_agent: torch.Tensor, x_expert: torch.Tensor,
                     t: torch.Tensor) -> torch.Tensor:
    """``mean((||grad_x logit(x_hat)|| - 1)^2)`` on ``x_hat = t x_agent + (1 - t) x_expert``."""
    n = min(len(x_agent), len(x_expert))
    x_hat = (t[:n, None] * x_agent[:n] + (1 - t[:n, None]) * x_expert[:n]).detach().requires_grad_(True)
    out = disc.logit_from_features(x_hat).sum()
    (g,) = torch.autograd.grad(out, x_hat, create_graph=True)
    return ((g.norm(dim=-1) - 1.0) ** 2).mean()


def discriminator_loss(disc: nn.Module, agent: tuple, expert: tuple, gp_weight: float = 0.0,
                       swap_labels: bool = True, rng: Optional[np.random.Generator] = None,
                       t: Optional[torch.Tensor] = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Cross-entropy between agent and expert pairs plus an optional gradient penalty.

    ``swap_labels=False`` uses the printed convention (agent toward 1, expert
    toward 0); the default pushes expert toward 1 so that ``log D`` rewards
    expert-like transitions. Returns ``(total, base)``.
    """
    (sa, sa_next), (se, se_next) = agent, expert
    if len(sa) == 0 or len(se) == 0:
        raise ValueError("empty discriminator batch")
    la, le = disc.logit(sa, sa_next), disc.logit(se, se_next)
    softplus = nn.functional.softplus
    if swap_labels:
        # -log(1 - D(agent)) - log D(expert)
        base = softplus(la).mean() + softplus(-le).mean()
    else:
        # -log D(agent) - log(1 - D(expert))
        base = softplus(-la).mean() + softplus(le).mean()
    total = base
    if gp_weight > 0:
        if t is None:
            rng = np.random.default_rng(0) if rng is None else rng
            t = torch.from_numpy(rng.uniform(size=min(len(sa), len(se))))
        total = base + gp_weight * gradient_penalty(
            disc, disc.features(sa, sa_next), disc.features(se, se_next), t)
    return total, base


def reward(disc: nn.Module, s, s_next, scale: float = 1.0) -> torch.Tensor:
    """``scale * log D(s, s')``, always <= 0."""
    with torch.no_grad():
        return scale * nn.functional.logsigmoid(disc.logit(s, s_next))
