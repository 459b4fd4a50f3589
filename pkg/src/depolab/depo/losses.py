"""Training signals for the decoupled policy.

Every ``*_loss`` function returns a differentiable scalar to be *minimized*;
gradients with respect to a module come from :func:`depolab.approx.grad`.
State batches are index tensors in tabular mode and float tensors otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from depolab.approx import ParamVector, apply_gradient, as_tensor, grad, module_layout
from depolab.depo.policy import DecoupledPolicy

PI_FLOOR = 1e-8
WEIGHT_CLIP = 50.0


class SupportCollapseError(FloatingPointError):
    """The composed policy assigns (almost) no probability to a buffered action."""


def _nonempty(n: int, what: str) -> None:
    if n == 0:
        raise ValueError(f"empty {what}")


def inverse_dynamics_loss(inverse_dynamics: nn.Module, s, a, s_next) -> torch.Tensor:
    """Mean ``-log I(a|s,s')`` over a batch of real transitions."""
    _nonempty(len(s), "batch")
    if hasattr(inverse_dynamics, "log_prob_table"):
        lp = inverse_dynamics.log_probs(s, s_next)
        return -lp.gather(-1, a.reshape(-1, 1)).mean()
    return -inverse_dynamics.log_prob(s, s_next, a).mean()


def planner_log_prob(planner: nn.Module, s, s_next) -> torch.Tensor:
    if hasattr(planner, "table"):
        return planner.log_probs(s).gather(-1, s_next.reshape(-1, 1)).squeeze(-1)
    return planner.log_prob(s, s_next)


def supervised_planner_loss(planner: nn.Module, s, s_next) -> torch.Tensor:
    """Mean ``-log h(s'|s)`` over expert consecutive pairs."""
    _nonempty(len(s), "demonstration set")
    return -planner_log_prob(planner, s, s_next).mean()


def normalize_q(q: torch.Tensor) -> torch.Tensor:
    """Per-batch min-max scaling into [0, 1]; a constant batch maps to all ones."""
    q = q.detach()
    lo, hi = q.min(), q.max()
    if hi == lo:
        return torch.ones_like(q)
    return (q - lo) / (hi - lo)


def cdepg_loss(planner: nn.Module, s, s_next, q: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """Q-weighted likelihood of environment-observed successors."""
    _nonempty(len(s), "batch")
    w = normalize_q(q) if normalize else q.detach()
    return -(w * planner_log_prob(planner, s, s_next)).mean()


def depg_loss(policy: DecoupledPolicy, s, a, q: torch.Tensor, eps: Optional[torch.Tensor] = None,
              clip: float = WEIGHT_CLIP, floor: float = PI_FLOOR) -> torch.Tensor:
    """Importance-weighted decoupled policy gradient surrogate.

    Tabular: ``-mean(clip(Q / pi) * pi_psi(a|s))`` with pi composed through the
    frozen inverse-dynamics cache, so only the planner receives gradient.
    Continuous: ``-mean(clip(Q) * log pi_psi(a|s))`` with pi marginalized over
    the planner noise ``eps`` (shape (M, B, d)); same gradient as Q/pi * grad pi
    before clipping, but the clip acts on Q because densities carry units.
    """
    _nonempty(len(s), "batch")
    q = q.detach()
    if policy.tabular:
        pi = policy.action_probs(s).gather(-1, a.reshape(-1, 1)).squeeze(-1)
        pi_val = pi.detach()
        if torch.any(pi_val < floor):
            raise SupportCollapseError(f"pi(a|s) = {float(pi_val.min()):.3g} below floor {floor}")
        w = torch.clamp(q / pi_val, -clip, clip)
        return -(w * pi).mean()
    if eps is None:
        raise ValueError("continuous DePG needs planner noise samples")
    logp = policy.log_prob(s, a, eps)
    return -(torch.clamp(q, -clip, clip) * logp).mean()


def depg_expected_loss(policy: DecoupledPolicy, s, q_rows: torch.Tensor, alpha: float,
                       inverse_grad: bool = False) -> torch.Tensor:
    """Tabular DePG with the action expectation taken exactly.

    ``mean_s sum_a pi(a|s) (alpha log pi(a|s) - Q(s,a))``; with the inverse
    dynamics frozen its gradient is the decoupled gradient summed over every
    action instead of the buffered one.
    """
    _nonempty(len(s), "batch")
    inv = policy.inverse_table(differentiable=inverse_grad)
    pi = policy.action_probs(s, inv)
    logpi = torch.log(torch.clamp(pi, min=1e-300))
    return (pi * (alpha * logpi - q_rows.detach())).sum(-1).mean()


def depg_pathwise_loss(policy: DecoupledPolicy, q, s, eps_plan: torch.Tensor, eps_act: torch.Tensor,
                       eps_mc: torch.Tensor, alpha: float) -> torch.Tensor:
    """Reparameterized DePG for continuous planners: ``mean(alpha log pi(a|s) - Q(s, a))``.

    ``a = mu_I(s, h(eps;s)) + sigma_I * eps_act`` is differentiated along the
    path planner -> target state -> inverse dynamics -> action; callers take
    the gradient with respect to the planner only.
    """
    _nonempty(len(s), "batch")
    planned = policy.planner.plan(s, eps_plan)
    mean, log_std = policy.inverse_dynamics(s, planned)
    a = mean + torch.exp(log_std) * eps_act
    value = q(s, torch.clamp(a, -1.0, 1.0))
    if alpha == 0.0:
        return -value.mean()
    return (alpha * policy.log_prob(s, a, eps_mc) - value).mean()


def q_cdepg_pairs(q_rows: torch.Tensor, a) -> torch.Tensor:
    return q_rows.gather(-1, a.reshape(-1, 1)).squeeze(-1)


# ---- combining components ---------------------------------------------------------------

@dataclass
class GradientReport:
    depg_component: ParamVector
    cdepg_component: ParamVector
    supervised_component: ParamVector
    combined: ParamVector
    lambda_h: float
    losses: dict = field(default_factory=dict)


def _component(objective: Optional[torch.Tensor], module: nn.Module) -> ParamVector:
    if objective is None:
        n = sum(p.numel() for p in module.parameters())
        return ParamVector(np.zeros(n), module_layout(module))
    return grad(objective, module, retain_graph=True)


def combined_gradient(planner: nn.Module, depg: Optional[torch.Tensor],
                      cdepg: Optional[torch.Tensor], supervised: Optional[torch.Tensor],
                      lambda_h: float) -> GradientReport:
    """``depg + lambda_h * (supervised + cdepg)``; absent terms contribute zeros."""
    g_depg = _component(depg, planner)
    g_cdepg = _component(cdepg, planner)
    g_sup = _component(supervised, planner)
    combined = g_depg + (g_sup + g_cdepg) * lambda_h
    losses = {name: float(v.detach()) for name, v in
              (("depg", depg), ("cdepg", cdepg), ("supervised", supervised)) if v is not None}
    return GradientReport(g_depg, g_cdepg, g_sup, combined, float(lambda_h), losses)


def combined_update(planner: nn.Module, optimizer: torch.optim.Optimizer,
                    depg: Optional[torch.Tensor], cdepg: Optional[torch.Tensor],
                    supervised: Optional[torch.Tensor], lambda_h: float) -> GradientReport:
    """Assemble the planner gradient and take one optimizer step on the planner only."""
    report = combined_gradient(planner, depg, cdepg, supervised, lambda_h)
    if not np.all(np.isfinite(report.combined.values)):
        raise FloatingPointError("non-finite planner gradient")
    apply_gradient(planner, optimizer, report.combined)
    return report


def mean_gradient(reports: list[ParamVector]) -> ParamVector:
    """Uniform average of per-agent planner gradients (co-training)."""
    if not reports:
        raise ValueError("no gradients to aggregate")
    total = reports[0]
    for g in reports[1:]:
        total = total + g
    return ParamVector(total.values / len(reports), dict(total.layout))


def to_index(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.int64))


def to_float(x) -> torch.Tensor:
    return as_tensor(x)
