"""6x6 grid world with k-fold redundant actions.

Cell (x, y) has index ``y * width + x``; (0, 0) is the bottom-left corner and
``up`` increases y. Action ``j`` moves in direction ``j % 4``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from depolab.mdp import FiniteMDP, TabularPolicy

DIRECTIONS = ("up", "right", "down", "left")
MOVES = {0: (0, 1), 1: (1, 0), 2: (0, -1), 3: (-1, 0)}
MOVE_CODES = {"U": 0, "R": 1, "D": 2, "L": 3}
DEFAULT_SHADED = ((4, 4), (4, 5), (5, 4), (5, 5))


@dataclass
class GridWorld:
    k: int = 1
    width: int = 6
    height: int = 6
    goal: tuple[int, int] = (5, 5)
    shaded_zone: tuple[tuple[int, int], ...] = DEFAULT_SHADED
    horizon: int = 50
    expert_moves: str = "RRRRRUUUUU"
    seed: Optional[int] = None
    _rng: np.random.Generator = field(init=False, repr=False)
    _state: int = field(init=False, default=0, repr=False)
    _t: int = field(init=False, default=0, repr=False)

    env_id = "gridworld"

    def __post_init__(self):
        self.goal = tuple(self.goal)
        self.shaded_zone = tuple(tuple(c) for c in self.shaded_zone)
        if self.k < 1:
            raise ValueError("k must be >= 1")
        self._rng = np.random.default_rng(self.seed)
        self._succ = self._successor_table()
        self.start_cells = np.array(
            [self.index(x, y) for y in range(self.height) for x in range(self.width)
             if (x, y) not in self.shaded_zone]
        )

    # ---- geometry ----
    @property
    def n_states(self) -> int:
        return self.width * self.height

    @property
    def n_actions(self) -> int:
        return 4 * self.k

    @property
    def state_dim(self) -> int:
        return 2

    @property
    def goal_index(self) -> int:
        return self.index(*self.goal)

    def index(self, x: int, y: int) -> int:
        return int(y) * self.width + int(x)

    def coords(self, s: int) -> tuple[int, int]:
        return int(s) % self.width, int(s) // self.width

    def coord_array(self) -> np.ndarray:
        return np.array([self.coords(s) for s in range(self.n_states)], dtype=np.float64)

    def direction(self, a: int) -> int:
        return int(a) % 4

    def _successor_table(self) -> np.ndarray:
        succ = np.zeros((self.n_states, self.n_actions), dtype=np.int64)
        for s in range(self.n_states):
            x, y = self.coords(s)
            for a in range(self.n_actions):
                dx, dy = MOVES[a % 4]
                nx, ny = x + dx, y + dy
                if 0 <= nx < self.width and 0 <= ny < self.height:
                    succ[s, a] = self.index(nx, ny)
                else:
                    succ[s, a] = s
        return succ

    @property
    def successors(self) -> np.ndarray:
        return self._succ

    def next_state(self, s: int, a: int) -> int:
        return int(self._succ[s, a])

    def is_legal(self, s: int, s_next: int) -> bool:
        """Neighbour-or-self test used to classify planner predictions."""
        x, y = self.coords(s)
        nx, ny = self.coords(s_next)
        return abs(x - nx) + abs(y - ny) <= 1

    def reachable(self, s: int, s_next: int) -> bool:
        return bool(np.any(self._succ[s] == s_next))

    def action_groups(self, s: int) -> dict[int, list[int]]:
        groups: dict[int, list[int]] = {}
        for a in range(self.n_actions):
            groups.setdefault(int(self._succ[s, a]), []).append(a)
        return groups

    def expert_path(self) -> list[int]:
        x, y = 0, 0
        path = [self.index(x, y)]
        for ch in self.expert_moves:
            dx, dy = MOVES[MOVE_CODES[ch]]
            x, y = x + dx, y + dy
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValueError(f"expert move string leaves the grid at {(x, y)}")
            path.append(self.index(x, y))
        if path[-1] != self.goal_index:
            raise ValueError("expert path does not end at the goal")
        return path

    # ---- episodic interface ----
    def reset(self, start: Optional[int] = None) -> int:
        self._state = int(self._rng.choice(self.start_cells)) if start is None else int(start)
        self._t = 0
        return self._state

    def step(self, a: int):
        s_next = self.next_state(self._state, a)
        reward = 1.0 if s_next == self.goal_index else 0.0
        self._state = s_next
        self._t += 1
        done = s_next == self.goal_index
        truncated = self._t >= self.horizon and not done
        return s_next, reward, done, truncated

    def observe(self, s: int) -> np.ndarray:
        return np.array(self.coords(s), dtype=np.float64)

    def success(self, s: int) -> bool:
        return int(s) == self.goal_index


def gridworld_expert(gw: GridWorld, moves: Optional[str] = None) -> TabularPolicy:
    """Deterministic monotone expert; redundant actions of one direction share the mass.

    On-path cells follow the path; off-path cells move right until the goal
    column, then up. The goal row is uniform (episodes end there).
    """
    if moves is not None and moves != gw.expert_moves:
        gw = GridWorld(k=gw.k, width=gw.width, height=gw.height, goal=gw.goal,
                       shaded_zone=gw.shaded_zone, horizon=gw.horizon, expert_moves=moves)
    path = gw.expert_path()
    on_path = {s: MOVE_CODES[ch] for s, ch in zip(path[:-1], gw.expert_moves)}
    probs = np.zeros((gw.n_states, gw.n_actions))
    gx, gy = gw.goal
    for s in range(gw.n_states):
        if s == gw.goal_index:
            probs[s] = 1.0 / gw.n_actions
            continue
        if s in on_path:
            d = on_path[s]
        else:
            x, y = gw.coords(s)
            d = 1 if x < gx else (3 if x > gx else (0 if y < gy else 2))
        probs[s, [a for a in range(gw.n_actions) if a % 4 == d]] = 1.0 / gw.k
    return TabularPolicy(probs)


def to_finite_mdp(gw: GridWorld, discount: float = 0.99) -> FiniteMDP:
    S, A = gw.n_states, gw.n_actions
    T = np.zeros((S, A, S))
    T[np.arange(S)[:, None], np.arange(A)[None, :], gw.successors] = 1.0
    rho0 = np.zeros(S)
    rho0[gw.start_cells] = 1.0 / len(gw.start_cells)
    reward = np.zeros((S, S))
    reward[:, gw.goal_index] = 1.0
    return FiniteMDP(T, rho0, discount, reward)


def true_inverse_dynamics(gw: GridWorld, s: int, target: int) -> int:
    """Lowest-index action whose successor is closest (Manhattan) to ``target``."""
    tx, ty = gw.coords(target)
    best, best_d = 0, None
    for a in range(gw.n_actions):
        nx, ny = gw.coords(gw.next_state(s, a))
        d = abs(nx - tx) + abs(ny - ty)
        if best_d is None or d < best_d:
            best, best_d = a, d
    return best


def path_cells(gw: GridWorld, paths: Sequence[Sequence[int]]) -> set[int]:
    return {int(s) for p in paths for s in p}
