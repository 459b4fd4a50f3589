from depolab.depo.baselines import BCOResult, bco_update
from depolab.depo.bounds import ErrorBoundReport, theorem2_report
from depolab.depo.losses import (
    GradientReport,
    cdepg_loss,
    combined_gradient,
    combined_update,
    depg_expected_loss,
    depg_loss,
    inverse_dynamics_loss,
    mean_gradient,
    normalize_q,
    supervised_planner_loss,
)
from depolab.depo.policy import DecoupledPolicy, act, planner_mode

__all__ = [
    "BCOResult",
    "DecoupledPolicy",
    "ErrorBoundReport",
    "GradientReport",
    "act",
    "bco_update",
    "cdepg_loss",
    "combined_gradient",
    "combined_update",
    "depg_expected_loss",
    "depg_loss",
    "inverse_dynamics_loss",
    "mean_gradient",
    "normalize_q",
    "planner_mode",
    "supervised_planner_loss",
    "theorem2_report",
]
