"""Behavioral cloning from observation: label expert pairs with a learned
inverse dynamics model, then clone a monolithic policy on those labels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from depolab.depo.fit import FitResult, fit_until_converged
from depolab.depo.losses import inverse_dynamics_loss


@dataclass
class BCOResult:
    labels: np.ndarray
    inverse_fit: FitResult
    clone_fit: FitResult
    clone_accuracy: float


def label_actions(inverse_dynamics: nn.Module, s, s_next) -> torch.Tensor:
    """Most likely action (tabular) or mean action (continuous) for each pair."""
    with torch.no_grad():
        if hasattr(inverse_dynamics, "log_prob_table"):
            return torch.argmax(inverse_dynamics.log_probs(s, s_next), dim=-1)
        return inverse_dynamics(s, s_next)[0]


def clone_loss(actor: nn.Module, s, labels) -> torch.Tensor:
    if hasattr(actor, "table"):
        return -actor.log_probs(s).gather(-1, labels.reshape(-1, 1)).mean()
    return -actor.log_prob(s, labels).mean()


def clone_accuracy(actor: nn.Module, s, labels, tol: float = 0.05) -> float:
    with torch.no_grad():
        if hasattr(actor, "table"):
            return float((torch.argmax(actor.log_probs(s), -1) == labels).double().mean())
        err = (actor(s)[0] - labels).abs().max(dim=-1).values
        return float((err <= tol).double().mean())


def bco_update(inverse_dynamics: nn.Module, inv_optimizer, actor: nn.Module, actor_optimizer,
               expert_s, expert_s_next, buffer_s, buffer_a, buffer_s_next,
               rng: np.random.Generator, batch_size: int = 128, **fit_kwargs) -> BCOResult:
    """One BCO round over the given buffer contents and expert pairs."""
    if len(expert_s) == 0:
        raise ValueError("empty demonstration set")
    if len(buffer_s) == 0:
        raise ValueError("empty buffer")
    n_buf = len(buffer_s)

    def inv_step():
        idx = torch.from_numpy(rng.choice(n_buf, size=min(batch_size, n_buf), replace=False))
        return inverse_dynamics_loss(inverse_dynamics, buffer_s[idx], buffer_a[idx], buffer_s_next[idx])

    def inv_eval():
        with torch.no_grad():
            return float(inverse_dynamics_loss(inverse_dynamics, buffer_s, buffer_a, buffer_s_next))

    inv_fit = fit_until_converged(inv_step, inv_eval, inv_optimizer, **fit_kwargs)
    labels = label_actions(inverse_dynamics, expert_s, expert_s_next)
    n_exp = len(expert_s)

    def bc_step():
        idx = torch.from_numpy(rng.choice(n_exp, size=min(batch_size, n_exp), replace=False))
        return clone_loss(actor, expert_s[idx], labels[idx])

    def bc_eval():
        with torch.no_grad():
            return float(clone_loss(actor, expert_s, labels))

    bc_fit = fit_until_converged(bc_step, bc_eval, actor_optimizer, **fit_kwargs)
    return BCOResult(labels.numpy(), inv_fit, bc_fit, clone_accuracy(actor, expert_s, labels))
