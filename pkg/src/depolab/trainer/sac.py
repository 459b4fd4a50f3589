"""Entropy-regularized Q learning with a softly mixed target network."""
from __future__ import annotations

from typing import Callable, Optional

import torch
from torch import nn


def soft_update(target: nn.Module, source: nn.Module, tau: float) -> None:
    with torch.no_grad():
        for t, s in zip(target.parameters(), source.parameters()):
            t.mul_(1.0 - tau).add_(s, alpha=tau)


def tabular_soft_target(q_target: nn.Module, next_probs: torch.Tensor, s_next, r, done,
                        gamma: float, entropy_weight: float) -> torch.Tensor:
    """``r + gamma (1 - done) sum_a' pi(a'|s') (Q_targ(s',a') - alpha log pi(a'|s'))``."""
    with torch.no_grad():
        logp = torch.log(torch.clamp(next_probs, min=1e-300))
        v_next = (next_probs * (q_target(s_next) - entropy_weight * logp)).sum(-1)
        return r + gamma * (1.0 - done) * v_next


def continuous_soft_target(q_target: nn.Module, sample_next: Callable, s_next, r, done,
                           gamma: float, entropy_weight: float) -> torch.Tensor:
    """Same target with one sampled next action; ``sample_next(s') -> (a', log pi(a'|s'))``."""
    with torch.no_grad():
        a_next, logp = sample_next(s_next)
        v_next = q_target(s_next, a_next) - entropy_weight * logp
        return r + gamma * (1.0 - done) * v_next


def td_loss(q: nn.Module, s, a, target: torch.Tensor) -> torch.Tensor:
    """Half mean-squared TD error; both heads of a twin critic are regressed."""
    if hasattr(q, "both"):
        q1, q2 = q.both(s, a)
        return 0.5 * ((q1 - target) ** 2).mean() + 0.5 * ((q2 - target) ** 2).mean()
    pred = q(s).gather(-1, a.reshape(-1, 1)).squeeze(-1)
    return 0.5 * ((pred - target) ** 2).mean()


def soft_q_update(q: nn.Module, q_target: nn.Module, optimizer: torch.optim.Optimizer,
                  s, a, r, s_next, done, gamma: float, entropy_weight: float, tau: float,
                  next_probs: Optional[torch.Tensor] = None,
                  sample_next: Optional[Callable] = None) -> float:
    """One TD step then soft target mixing. Pass ``next_probs`` (tabular) or ``sample_next``."""
    if len(s) == 0:
        raise ValueError("empty batch")
    if next_probs is not None:
        y = tabular_soft_target(q_target, next_probs, s_next, r, done, gamma, entropy_weight)
    elif sample_next is not None:
        y = continuous_soft_target(q_target, sample_next, s_next, r, done, gamma, entropy_weight)
    else:
        raise ValueError("need next-state action probabilities or a sampler")
    loss = td_loss(q, s, a, y)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite TD loss")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    soft_update(q_target, q, tau)
    return float(loss.detach())
