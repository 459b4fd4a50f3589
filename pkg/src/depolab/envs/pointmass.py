"""Deterministic point-mass control task (a small stand-in for continuous control benchmarks).

State is ``(position, velocity)``; actions are accelerations in ``[-1, 1]``
that pass through an :class:`ActionTransform` before reaching the dynamics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

TRANSFORMS = ("normal", "inverted", "complex_double")


@dataclass(frozen=True)
class ActionTransform:
    variant: str = "normal"

    def __post_init__(self):
        if self.variant not in TRANSFORMS:
            raise ValueError(f"unknown action transform {self.variant!r}")

    def raw_dim(self, dim: int) -> int:
        return 2 * dim if self.variant == "complex_double" else dim

    def __call__(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        if self.variant == "normal":
            return a
        if self.variant == "inverted":
            return -a
        n = a.shape[-1]
        if n % 2:
            raise ValueError("complex_double needs an even action dimension")
        return (-np.exp(a[..., : n // 2] + 1.0) + np.exp(a[..., n // 2:])) / 1.5


@dataclass
class PointMass:
    dim: int = 2
    dt: float = 0.05
    v_max: float = 2.0
    goal_radius: float = 0.1
    horizon: int = 400
    start_box: float = 1.0
    transform: str = "normal"
    seed: Optional[int] = None
    _rng: np.random.Generator = field(init=False, repr=False)
    _state: np.ndarray = field(init=False, repr=False)
    _t: int = field(init=False, default=0, repr=False)

    env_id = "pointmass"

    def __post_init__(self):
        self._transform = ActionTransform(self.transform)
        self._rng = np.random.default_rng(self.seed)
        self._state = np.zeros(2 * self.dim)

    @property
    def state_dim(self) -> int:
        return 2 * self.dim

    @property
    def action_dim(self) -> int:
        return self._transform.raw_dim(self.dim)

    @property
    def action_transform(self) -> ActionTransform:
        return self._transform

    def sample_start(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        rng = self._rng if rng is None else rng
        p = rng.uniform(-self.start_box, self.start_box, size=self.dim)
        return np.concatenate([p, np.zeros(self.dim)])

    def dynamics(self, s: np.ndarray, raw_action: np.ndarray) -> np.ndarray:
        """Pure transition function; works on a single state or a batch."""
        s = np.asarray(s, dtype=np.float64)
        a = np.clip(np.asarray(raw_action, dtype=np.float64), -1.0, 1.0)
        a_eff = self._transform(a)
        p, v = s[..., : self.dim], s[..., self.dim:]
        p_next = p + v * self.dt
        v_next = np.clip(v + a_eff * self.dt, -self.v_max, self.v_max)
        return np.concatenate([p_next, v_next], axis=-1)

    def reset(self, start: Optional[np.ndarray] = None) -> np.ndarray:
        self._state = self.sample_start() if start is None else np.array(start, dtype=np.float64)
        self._t = 0
        return self._state.copy()

    def step(self, raw_action):
        s_next = self.dynamics(self._state, raw_action)
        self._state = s_next
        self._t += 1
        reward = -float(np.linalg.norm(s_next[: self.dim]))
        done = False
        truncated = self._t >= self.horizon
        return s_next.copy(), reward, done, truncated

    def observe(self, s) -> np.ndarray:
        return np.asarray(s, dtype=np.float64)

    def success(self, s) -> bool:
        return bool(np.linalg.norm(np.asarray(s)[: self.dim]) <= self.goal_radius)

    def true_inverse_dynamics(self, s, s_next) -> np.ndarray:
        """Least-norm raw action realizing the velocity change (ignores clipping)."""
        s, s_next = np.asarray(s), np.asarray(s_next)
        a_eff = (s_next[..., self.dim:] - s[..., self.dim:]) / self.dt
        if self.transform == "normal":
            return a_eff
        if self.transform == "inverted":
            return -a_eff
        raise ValueError("no closed-form inverse for complex_double")


@dataclass(frozen=True)
class PDController:
    """``a = clip(-kp * p - kd * v, -1, 1)``."""

    kp: float = 1.0
    kd: float = 2.0
    dim: int = 2

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        p, v = s[..., : self.dim], s[..., self.dim:]
        return np.clip(-self.kp * p - self.kd * v, -1.0, 1.0)


def pointmass_expert(env: PointMass, kp: float = 1.0, kd: float = 2.0) -> PDController:
    if env.transform != "normal":
        raise ValueError("the PD expert is defined for the normal action transform only")
    return PDController(kp, kd, env.dim)
