"""FIFO replay buffer of (s, a, s', r, done) transitions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.s)


class ReplayBuffer:
    def __init__(self, capacity: int, state_shape: tuple = (), action_shape: tuple = (),
                 state_dtype=np.float64, action_dtype=np.float64):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, *state_shape), dtype=state_dtype)
        self.s_next = np.zeros((capacity, *state_shape), dtype=state_dtype)
        self.a = np.zeros((capacity, *action_shape), dtype=action_dtype)
        self.r = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self._next = 0
        self._size = 0
        self.total_added = 0

    def __len__(self) -> int:
        return self._size

    def add(self, s, a, s_next, r: float, done: bool) -> None:
        i = self._next
        self.s[i], self.a[i], self.s_next[i] = s, a, s_next
        self.r[i], self.done[i] = r, float(done)
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        self.total_added += 1

    def _take(self, idx: np.ndarray) -> Batch:
        return Batch(self.s[idx].copy(), self.a[idx].copy(), self.s_next[idx].copy(),
                     self.r[idx].copy(), self.done[idx].copy())

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform sample, without replacement inside one batch, from the filled part only."""
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        n = min(int(batch_size), self._size)
        return self._take(rng.choice(self._size, size=n, replace=False))

    def ordered(self) -> Batch:
        """All stored transitions, oldest first."""
        if self._size < self.capacity:
            idx = np.arange(self._size)
        else:
            idx = (np.arange(self.capacity) + self._next) % self.capacity
        return self._take(idx)
