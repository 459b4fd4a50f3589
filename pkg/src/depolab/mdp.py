"""Exact occupancy-measure algebra for finite MDPs.

All occupancy measures use the unnormalized convention
``rho(s) = sum_t gamma^t P(s_t = s)``, so every measure sums to ``1 / (1 - gamma)``.
Divergence code that needs distributions normalizes locally.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import nnls

PROB_TOL = 1e-12
WITNESS_TOL = 1e-9


class MDPValidationError(ValueError):
    """Raised when an MDP, policy or file violates an invariant."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class FiniteMDP:
    transition: np.ndarray  # T[s, a, s']
    initial: np.ndarray
    discount: float
    reward: Optional[np.ndarray] = None  # r[s, s'], state-only

    def __post_init__(self):
        T = _frozen(self.transition)
        rho0 = _frozen(self.initial)
        object.__setattr__(self, "transition", T)
        object.__setattr__(self, "initial", rho0)
        object.__setattr__(self, "discount", float(self.discount))
        if self.reward is not None:
            object.__setattr__(self, "reward", _frozen(self.reward))
        _validate_mdp(self)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


def _validate_mdp(mdp: FiniteMDP) -> None:
    T, rho0 = mdp.transition, mdp.initial
    if T.ndim != 3 or T.shape[0] != T.shape[2]:
        raise MDPValidationError(f"transition must have shape (S, A, S), got {T.shape}")
    S, A, _ = T.shape
    if S == 0 or A == 0:
        raise MDPValidationError("MDP needs at least one state and one action")
    if not np.all(np.isfinite(T)):
        s, a, t = np.argwhere(~np.isfinite(T))[0]
        raise MDPValidationError(f"transition[{s}][{a}][{t}] is not finite")
    neg = np.argwhere(T < 0)
    if len(neg):
        s, a, t = neg[0]
        raise MDPValidationError(f"transition[{s}][{a}][{t}] = {T[s, a, t]} is negative")
    sums = T.sum(axis=2)
    bad = np.argwhere(np.abs(sums - 1.0) > PROB_TOL)
    if len(bad):
        s, a = bad[0]
        raise MDPValidationError(f"transition[{s}][{a}][:] sums to {sums[s, a]!r}, not 1")
    if rho0.shape != (S,):
        raise MDPValidationError(f"initial must have shape ({S},), got {rho0.shape}")
    neg = np.argwhere(rho0 < 0)
    if len(neg):
        raise MDPValidationError(f"initial[{neg[0][0]}] is negative")
    if abs(rho0.sum() - 1.0) > PROB_TOL:
        raise MDPValidationError(f"initial sums to {rho0.sum()!r}, not 1")
    if not 0.0 <= mdp.discount < 1.0:
        raise MDPValidationError(f"discount must lie in [0, 1), got {mdp.discount}")
    if mdp.reward is not None:
        if mdp.reward.shape != (S, S):
            raise MDPValidationError(f"reward must have shape ({S}, {S}), got {mdp.reward.shape}")
        if not np.all(np.isfinite(mdp.reward)):
            s, t = np.argwhere(~np.isfinite(mdp.reward))[0]
            raise MDPValidationError(f"reward[{s}][{t}] is not finite")


@dataclass(frozen=True)
class TabularPolicy:
    probs: np.ndarray  # pi[s, a]

    def __post_init__(self):
        p = _frozen(self.probs)
        object.__setattr__(self, "probs", p)
        if p.ndim != 2:
            raise MDPValidationError(f"policy must be a matrix, got shape {p.shape}")
        neg = np.argwhere(p < 0)
        if len(neg):
            s, a = neg[0]
            raise MDPValidationError(f"policy[{s}][{a}] is negative")
        bad = np.argwhere(np.abs(p.sum(axis=1) - 1.0) > PROB_TOL)
        if len(bad):
            raise MDPValidationError(f"policy row {bad[0][0]} does not sum to 1")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))


@dataclass(frozen=True)
class OccupancyMeasures:
    state_om: np.ndarray
    state_action_om: np.ndarray
    transition_om: np.ndarray


@dataclass(frozen=True)
class PlannerTable:
    """h[s, s']; rows of unvisited states are NaN and flagged in ``defined``."""

    probs: np.ndarray
    defined: np.ndarray


@dataclass(frozen=True)
class RedundancyWitness:
    state: int
    action: int
    mixture: np.ndarray  # over all actions, zero at ``action``
    residual: float = 0.0


@dataclass(frozen=True)
class DominanceReport:
    margins: np.ndarray
    all_positive: bool
    min_margin: float


@dataclass(frozen=True)
class Theorem1Report:
    values_original: np.ndarray
    values_replaced: np.ndarray
    max_value_difference: float


def _check_shapes(mdp: FiniteMDP, policy: TabularPolicy) -> None:
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise MDPValidationError(
            f"policy shape {policy.probs.shape} does not match MDP "
            f"({mdp.n_states}, {mdp.n_actions})"
        )


def marginal_planner_matrix(mdp: FiniteMDP, policy: TabularPolicy) -> np.ndarray:
    _check_shapes(mdp, policy)
    return np.einsum("sa,sat->st", policy.probs, mdp.transition)


def state_occupancy(mdp: FiniteMDP, policy: TabularPolicy) -> np.ndarray:
    """Solve ``(I - gamma P^T) rho = rho0`` by dense LU."""
    P = marginal_planner_matrix(mdp, policy)
    M = np.eye(mdp.n_states) - mdp.discount * P.T
    try:
        rho = np.linalg.solve(M, mdp.initial)
    except np.linalg.LinAlgError as exc:  # cannot happen for gamma < 1
        raise RuntimeError("occupancy system is singular") from exc
    return rho


def occupancy_measures(mdp: FiniteMDP, policy: TabularPolicy) -> OccupancyMeasures:
    rho = state_occupancy(mdp, policy)
    rho_sa = policy.probs * rho[:, None]
    rho_ss = np.einsum("sa,sat->st", rho_sa, mdp.transition)
    return OccupancyMeasures(_frozen(rho), _frozen(rho_sa), _frozen(rho_ss))


def transition_occupancy_direct(mdp: FiniteMDP, policy: TabularPolicy) -> np.ndarray:
    """Solve the pair-indexed recursion for rho(s, s') without going through rho(s).

    ``rho(s,s') = rho0(s) h(s'|s) + gamma h(s'|s) sum_u rho(u, s)``.
    """
    A = pair_system_matrix(mdp, policy)
    h = marginal_planner_matrix(mdp, policy)
    b = (mdp.initial[:, None] * h).reshape(-1)
    S = mdp.n_states
    return np.linalg.solve(A, b).reshape(S, S)


def pair_system_matrix(mdp: FiniteMDP, policy: TabularPolicy) -> np.ndarray:
    """Matrix A with rows (s, s') and columns (u, v): delta - gamma h(s'|s) [v == s]."""
    h = marginal_planner_matrix(mdp, policy)
    S = mdp.n_states
    # column (u, v) carries -gamma h(s'|v) in every row (v, s'), for every u
    block = -mdp.discount * h.reshape(S * S)  # row index v*S + s'
    A = np.zeros((S * S, S * S))
    for v in range(S):
        rows = slice(v * S, (v + 1) * S)
        cols = np.arange(S) * S + v  # all (u, v)
        A[rows, cols] = block[rows][:, None]
    A[np.diag_indices(S * S)] += 1.0
    return A


def marginal_planner(mdp: FiniteMDP, policy: TabularPolicy) -> PlannerTable:
    h = marginal_planner_matrix(mdp, policy)
    return PlannerTable(_frozen(h), _frozen_bool(np.ones(mdp.n_states, dtype=bool)))


def _frozen_bool(a) -> np.ndarray:
    arr = np.array(a, dtype=bool, copy=True)
    arr.flags.writeable = False
    return arr


def planner_from_occupancy(om: OccupancyMeasures, visit_tol: float = 1e-12) -> PlannerTable:
    rho_ss = om.transition_om
    mass = rho_ss.sum(axis=1)
    defined = mass > visit_tol
    probs = np.full_like(rho_ss, np.nan)
    probs[defined] = rho_ss[defined] / mass[defined, None]
    return PlannerTable(_frozen(probs), _frozen_bool(defined))


def find_redundancy_witness(
    mdp: FiniteMDP, state: Optional[int] = None, tol: float = WITNESS_TOL
) -> Optional[RedundancyWitness]:
    """First (s, a) whose transition row is a convex mix of the other actions' rows.

    Every column of the design matrix sums to one, so a nonnegative exact fit
    is automatically a distribution; plain NNLS suffices.
    """
    states = range(mdp.n_states) if state is None else [state]
    A = mdp.n_actions
    if A < 2:
        return None
    for s in states:
        rows = mdp.transition[s]
        for a in range(A):
            others = [b for b in range(A) if b != a]
            weights, resid = nnls(rows[others].T, rows[a])
            if resid <= tol and weights.sum() > 0:
                p = np.zeros(A)
                p[others] = weights / weights.sum()
                resid = float(np.linalg.norm(p @ rows - rows[a]))
                if resid <= tol:
                    return RedundancyWitness(int(s), int(a), _frozen(p), resid)
    return None


def counterexample_policies(
    mdp: FiniteMDP, witness: RedundancyWitness, base: TabularPolicy
) -> tuple[TabularPolicy, TabularPolicy]:
    _check_shapes(mdp, base)
    s, a, p = witness.state, witness.action, np.asarray(witness.mixture)
    if not (0 <= s < mdp.n_states and 0 <= a < mdp.n_actions) or p.shape != (mdp.n_actions,):
        raise ValueError("witness indices do not fit the MDP")
    if p[a] != 0 or np.any(p < 0) or abs(p.sum() - 1.0) > WITNESS_TOL:
        raise ValueError("witness mixture must be a distribution that excludes the action")
    if np.max(np.abs(p @ mdp.transition[s] - mdp.transition[s, a])) > WITNESS_TOL:
        raise ValueError(f"mixture does not reproduce transition row ({s}, {a})")
    pi0 = np.array(base.probs)
    pi1 = np.array(base.probs)
    pi0[s] = 0.0
    pi0[s, a] = 1.0
    pi1[s] = p
    return TabularPolicy(pi0), TabularPolicy(pi1)


def verify_column_dominance(mdp: FiniteMDP, policy: TabularPolicy) -> DominanceReport:
    A = pair_system_matrix(mdp, policy)
    diag = np.abs(np.diag(A))
    off = np.abs(A).sum(axis=0) - diag
    margins = diag - off
    return DominanceReport(_frozen(margins), bool(np.all(margins > 0)), float(margins.min()))


def same_next_state_action_set(mdp: FiniteMDP, s: int) -> list[tuple[int, list[int]]]:
    """Group the actions at ``s`` by their (unique) successor state."""
    rows = mdp.transition[s]
    groups: dict[int, list[int]] = {}
    for a in range(mdp.n_actions):
        succ = np.flatnonzero(rows[a] > 0)
        if len(succ) != 1 or abs(rows[a, succ[0]] - 1.0) > PROB_TOL:
            raise ValueError(f"transition at state {s}, action {a} is not deterministic")
        groups.setdefault(int(succ[0]), []).append(a)
    return sorted(groups.items(), key=lambda kv: kv[1][0])


def policy_evaluation(mdp: FiniteMDP, policy: TabularPolicy) -> np.ndarray:
    """Exact V^pi for the state-only reward r(s, s')."""
    if mdp.reward is None:
        raise ValueError("MDP has no reward")
    P = marginal_planner_matrix(mdp, policy)
    r_pi = (P * mdp.reward).sum(axis=1)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.discount * P, r_pi)


def q_evaluation(mdp: FiniteMDP, policy: TabularPolicy) -> np.ndarray:
    V = policy_evaluation(mdp, policy)
    return np.einsum("sat,st->sa", mdp.transition, mdp.reward + mdp.discount * V[None, :])


def verify_theorem1(
    mdp: FiniteMDP, optimal: TabularPolicy, s_hat: int, replacement: Sequence[float]
) -> Theorem1Report:
    if mdp.reward is None:
        raise ValueError("the invariance check needs a state-only reward r(s, s')")
    _check_shapes(mdp, optimal)
    q = np.asarray(replacement, dtype=np.float64)
    if q.shape != (mdp.n_actions,) or np.any(q < 0) or abs(q.sum() - 1.0) > PROB_TOL:
        raise ValueError("replacement must be a distribution over actions")
    groups = [set(g) for _, g in same_next_state_action_set(mdp, s_hat)]
    support = set(np.flatnonzero(optimal.probs[s_hat] > 0).tolist())
    group = next((g for g in groups if support <= g), None)
    if group is None:
        raise ValueError(f"policy support at state {s_hat} spans several successor groups")
    if not set(np.flatnonzero(q > 0).tolist()) <= group:
        raise ValueError("replacement puts mass outside the action group of the policy")
    probs = np.array(optimal.probs)
    probs[s_hat] = q
    v0 = policy_evaluation(mdp, optimal)
    v1 = policy_evaluation(mdp, TabularPolicy(probs))
    return Theorem1Report(_frozen(v0), _frozen(v1), float(np.max(np.abs(v0 - v1))))


def random_mdp(
    n_states: int,
    n_actions: int,
    seed: int,
    discount: float = 0.99,
    deterministic: bool = False,
    with_reward: bool = False,
) -> tuple[FiniteMDP, TabularPolicy]:
    """Seeded random MDP plus a random full-support policy, for property checks."""
    rng = np.random.default_rng(seed)
    if deterministic:
        T = np.zeros((n_states, n_actions, n_states))
        succ = rng.integers(n_states, size=(n_states, n_actions))
        np.put_along_axis(T, succ[..., None], 1.0, axis=2)
    else:
        T = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    rho0 = rng.dirichlet(np.ones(n_states))
    reward = rng.normal(size=(n_states, n_states)) if with_reward else None
    pi = rng.dirichlet(np.ones(n_actions), size=n_states)
    return FiniteMDP(T, rho0, discount, reward), TabularPolicy(pi)


# ---- file format ---------------------------------------------------------------

MDP_FORMAT = "finite-mdp"
MDP_FORMAT_VERSION = 1


def mdp_to_dict(mdp: FiniteMDP) -> dict:
    d = {
        "format": MDP_FORMAT,
        "version": MDP_FORMAT_VERSION,
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "index_order": "transition[s][a][s'] flattened row-major",
        "transition": mdp.transition.reshape(-1).tolist(),
        "initial": mdp.initial.tolist(),
        "discount": mdp.discount,
    }
    if mdp.reward is not None:
        d["reward"] = mdp.reward.reshape(-1).tolist()
    return d


def mdp_from_dict(d: dict) -> FiniteMDP:
    known = {"format", "version", "n_states", "n_actions", "index_order",
             "transition", "initial", "discount", "reward"}
    unknown = set(d) - known
    if unknown:
        raise MDPValidationError(f"unknown field(s): {sorted(unknown)}")
    for key in ("n_states", "n_actions", "transition", "initial", "discount"):
        if key not in d:
            raise MDPValidationError(f"missing field '{key}'")
    if d.get("format", MDP_FORMAT) != MDP_FORMAT:
        raise MDPValidationError(f"unexpected format {d['format']!r}")
    S, A = int(d["n_states"]), int(d["n_actions"])
    flat = np.asarray(d["transition"], dtype=np.float64)
    if flat.size != S * A * S:
        raise MDPValidationError(f"transition has {flat.size} entries, expected {S * A * S}")
    reward = None
    if d.get("reward") is not None:
        r = np.asarray(d["reward"], dtype=np.float64)
        if r.size != S * S:
            raise MDPValidationError(f"reward has {r.size} entries, expected {S * S}")
        reward = r.reshape(S, S)
    return FiniteMDP(flat.reshape(S, A, S), np.asarray(d["initial"], dtype=np.float64),
                     float(d["discount"]), reward)


def save_mdp(mdp: FiniteMDP, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mdp_to_dict(mdp), indent=1))


def load_mdp(path: str | Path) -> FiniteMDP:
    return mdp_from_dict(json.loads(Path(path).read_text()))
