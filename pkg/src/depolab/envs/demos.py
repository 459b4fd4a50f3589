"""State-only demonstrations and their on-disk container."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np

from depolab.envs.gridworld import GridWorld
from depolab.envs.pointmass import PointMass
from depolab.mdp import TabularPolicy

DEMO_FORMAT = "depolab-demos"
DEMO_VERSION = 1


@dataclass
class Demonstration:
    trajectories: list[np.ndarray]
    env_id: str
    seed: int
    state_dim: int
    metadata: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.trajectories)

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """All consecutive (s, s') pairs stacked across trajectories."""
        if not self.trajectories:
            empty = np.zeros((0, self.state_dim))
            return empty, empty.copy()
        s = np.concatenate([t[:-1] for t in self.trajectories])
        s_next = np.concatenate([t[1:] for t in self.trajectories])
        return s, s_next


Policy = Union[TabularPolicy, Callable[[np.ndarray], np.ndarray]]


def collect_demonstrations(env, policy: Policy, n_traj: int, seed: int,
                           start=None) -> Demonstration:
    """Roll out ``policy`` and keep only the visited states.

    Grid-world episodes stop at the goal and start at (0, 0) unless told
    otherwise; point-mass episodes always run the full horizon.
    """
    rng = np.random.default_rng(seed)
    trajs = []
    for _ in range(n_traj):
        if isinstance(env, GridWorld):
            s = env.reset(env.index(0, 0) if start is None else start)
            states = [env.observe(s)]
            for _ in range(env.horizon):
                a = int(rng.choice(env.n_actions, p=policy.probs[s]))
                s, _, done, _ = env.step(a)
                states.append(env.observe(s))
                if done:
                    break
        elif isinstance(env, PointMass):
            s = env.reset(env.sample_start(rng) if start is None else start)
            states = [s]
            for _ in range(env.horizon):
                s, _, _, _ = env.step(policy(s))
                states.append(s)
        else:
            raise TypeError(f"unsupported environment {type(env).__name__}")
        trajs.append(np.asarray(states, dtype=np.float64))
    return Demonstration(trajs, env.env_id, int(seed), env.state_dim, {"n_traj": n_traj})


def save_demonstrations(demo: Demonstration, path: Union[str, Path]) -> None:
    """npz container: a JSON header plus one float64 array per trajectory."""
    header = {
        "format": DEMO_FORMAT,
        "version": DEMO_VERSION,
        "env_id": demo.env_id,
        "state_dim": demo.state_dim,
        "trajectory_count": demo.count,
        "seed": demo.seed,
        "lengths": [len(t) for t in demo.trajectories],
        "metadata": demo.metadata,
    }
    arrays = {f"traj_{i:05d}": np.ascontiguousarray(t, dtype=np.float64)
              for i, t in enumerate(demo.trajectories)}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_demonstrations(path: Union[str, Path]) -> Demonstration:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != DEMO_FORMAT:
            raise ValueError(f"{path}: not a demonstration file")
        if header.get("version") != DEMO_VERSION:
            raise ValueError(f"{path}: unsupported version {header.get('version')}")
        trajs = [data[f"traj_{i:05d}"] for i in range(header["trajectory_count"])]
    for t, n in zip(trajs, header["lengths"]):
        if t.shape != (n, header["state_dim"]):
            raise ValueError(f"{path}: trajectory shape {t.shape} disagrees with header")
    return Demonstration(trajs, header["env_id"], header["seed"], header["state_dim"],
                         header["metadata"])
