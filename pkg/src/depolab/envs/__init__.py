from depolab.envs.demos import (
    Demonstration,
    collect_demonstrations,
    load_demonstrations,
    save_demonstrations,
)
from depolab.envs.gridworld import GridWorld, gridworld_expert, to_finite_mdp
from depolab.envs.pointmass import ActionTransform, PDController, PointMass, pointmass_expert

__all__ = [
    "ActionTransform",
    "Demonstration",
    "GridWorld",
    "PDController",
    "PointMass",
    "collect_demonstrations",
    "gridworld_expert",
    "load_demonstrations",
    "pointmass_expert",
    "save_demonstrations",
    "to_finite_mdp",
]
