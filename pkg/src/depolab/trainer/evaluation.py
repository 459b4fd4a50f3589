"""Planner diagnostics: imagined multi-step rollouts and one-step prediction error."""
from __future__ import annotations

import numpy as np

from depolab.depo.policy import DecoupledPolicy, planner_mode


def multi_step_rollout(policy: DecoupledPolicy, s0, n: int) -> list:
    """``[s0, h(s0), h(h(s0)), ...]`` using the planner mode only; no environment calls."""
    if n < 0:
        raise ValueError("n must be >= 0")
    states = [s0]
    s = s0
    for _ in range(n):
        s = planner_mode(policy, s)
        states.append(s)
    return states


def environment_rollout(policy: DecoupledPolicy, env, s0, n: int) -> list:
    """Deterministic-mode rollout of the composed policy in the real dynamics."""
    states = [s0]
    s = s0
    rng = np.random.default_rng(0)
    for _ in range(n):
        a = policy.act(s, rng, deterministic=True).action
        s = env.next_state(s, a) if policy.tabular else env.dynamics(s, a)
        states.append(s)
    return states


def planner_mse(planned, reached) -> float:
    """Mean squared distance between planned and reached next states."""
    planned = np.asarray(planned, dtype=np.float64)
    reached = np.asarray(reached, dtype=np.float64)
    if planned.size == 0:
        raise ValueError("no evaluation transitions")
    if planned.shape != reached.shape:
        raise ValueError("planned and reached arrays differ in shape")
    if planned.ndim == 1:
        planned, reached = planned[:, None], reached[:, None]
    return float(np.mean(np.sum((planned - reached) ** 2, axis=-1)))


def policy_transitions(policy: DecoupledPolicy, env, starts, horizon: int):
    """Planned and reached next states along deterministic rollouts (point mass)."""
    planned, reached = [], []
    for s0 in starts:
        s = np.asarray(s0, dtype=np.float64)
        for _ in range(horizon):
            res = policy.act(s, np.random.default_rng(0), deterministic=True)
            s_next = env.dynamics(s, res.action)
            planned.append(res.planned)
            reached.append(s_next)
            s = s_next
    return np.array(planned), np.array(reached)
