"""Figures and the data tables behind them.

Every image is accompanied by a CSV holding exactly the numbers drawn, so
two runs can be compared without looking at pixels.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from depolab.depo.policy import DecoupledPolicy  # noqa: E402
from depolab.envs.gridworld import GridWorld  # noqa: E402
from depolab.trainer.evaluation import multi_step_rollout  # noqa: E402
from depolab.trainer.metrics import MetricsLog, read_metrics  # noqa: E402

PathLike = Union[str, Path]
CURVE_METRICS = ("success_rate", "mean_return", "planner_mse")


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# ---- learning curves -----------------------------------------------------------------------

@dataclass
class CurveBand:
    metric: str
    steps: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n: np.ndarray


def curve_bands(logs: Sequence[MetricsLog], metric: str) -> CurveBand:
    """Mean and std over runs at every env-step value present in any run.

    Runs are step-interpolated (last value carried forward) onto the union
    grid; a run contributes only from its first evaluation on.
    """
    if not logs:
        raise ValueError("no metrics tables given")
    grid = np.unique(np.concatenate([np.asarray(lg.column("env_steps"), dtype=float) for lg in logs]))
    table = np.full((len(logs), len(grid)), np.nan)
    for i, lg in enumerate(logs):
        x = np.asarray(lg.column("env_steps"), dtype=float)
        y = np.asarray(lg.column(metric), dtype=float)
        if len(x) == 0:
            continue
        idx = np.searchsorted(x, grid, side="right") - 1
        ok = idx >= 0
        table[i, ok] = y[idx[ok]]
    n = np.sum(np.isfinite(table), axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(table, axis=0)
        std = np.nanstd(table, axis=0)
    return CurveBand(metric, grid, mean, std, n)


def plot_curves(metric_files: Sequence[PathLike], out_dir: PathLike,
                metrics: Sequence[str] = CURVE_METRICS) -> list[Path]:
    if not metric_files:
        raise ValueError("plot needs at least one metrics file")
    logs = [read_metrics(p) for p in metric_files]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bands = [curve_bands(logs, m) for m in metrics]
    fig, axes = plt.subplots(1, len(bands), figsize=(4.2 * len(bands), 3.4))
    for ax, band in zip(np.atleast_1d(axes), bands):
        ax.plot(band.steps, band.mean, lw=1.5)
        ax.fill_between(band.steps, band.mean - band.std, band.mean + band.std, alpha=0.25)
        ax.set_xlabel("environment steps")
        ax.set_title(band.metric)
        if band.metric == "planner_mse" and np.nanmin(band.mean) > 0:
            ax.set_yscale("log")
    fig.suptitle(f"mean ± std over {len(logs)} run(s)")
    fig.tight_layout()
    image, data = out / "curves.png", out / "curves.csv"
    fig.savefig(image, dpi=110)
    plt.close(fig)
    header = ["env_steps"] + [f"{b.metric}_{k}" for b in bands for k in ("mean", "std", "n")]
    rows = []
    for j, step in enumerate(bands[0].steps):
        row = [int(step)]
        for b in bands:
            row += [b.mean[j], b.std[j], int(b.n[j])]
        rows.append(row)
    _write_csv(data, header, rows)
    return [image, data]


# ---- planner heatmap -----------------------------------------------------------------------

@dataclass
class HeatmapRow:
    state: int
    target: int
    legal: bool
    on_path_state: bool
    target_on_path: bool


@dataclass
class HeatmapSummary:
    rows: list[HeatmapRow]

    @property
    def illegal_fraction(self) -> float:
        return float(np.mean([not r.legal for r in self.rows]))

    @property
    def all_legal(self) -> bool:
        return all(r.legal for r in self.rows)

    @property
    def off_path_onto_path_fraction(self) -> float:
        off = [r for r in self.rows if not r.on_path_state]
        return float(np.mean([r.target_on_path for r in off])) if off else float("nan")


def classify_planner(gw: GridWorld, targets: Sequence[int]) -> HeatmapSummary:
    """Classify argmax predictions of every non-goal cell.

    A prediction is legal when it is the cell itself or a grid neighbour.
    """
    path = set(gw.expert_path())
    rows = []
    for s in range(gw.n_states):
        if s == gw.goal_index:
            continue
        t = int(targets[s])
        rows.append(HeatmapRow(s, t, gw.is_legal(s, t), s in path, t in path))
    return HeatmapSummary(rows)


def planner_argmax(policy: DecoupledPolicy) -> np.ndarray:
    return np.argmax(policy.planner_table(), axis=1)


def plot_heatmap(policy: DecoupledPolicy, gw: GridWorld, out_dir: PathLike,
                 title: str = "planner argmax") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probs = policy.planner_table()
    targets = np.argmax(probs, axis=1)
    summary = classify_planner(gw, targets)
    path = set(gw.expert_path())
    fig, ax = plt.subplots(figsize=(5, 5))
    shade = np.zeros((gw.height, gw.width))
    for s in path:
        x, y = gw.coords(s)
        shade[y, x] = 1.0
    ax.imshow(shade, origin="lower", cmap="Greys", alpha=0.3, vmin=0, vmax=1.5)
    for r in summary.rows:
        x, y = gw.coords(r.state)
        tx, ty = gw.coords(r.target)
        color = "tab:green" if r.legal else "tab:red"
        if r.target == r.state:
            ax.plot(x, y, "o", color=color, ms=6)
        else:
            ax.annotate("", xy=(x + 0.8 * (tx - x), y + 0.8 * (ty - y)), xytext=(x, y),
                        arrowprops=dict(arrowstyle="->", color=color, lw=1.4))
    gx, gy = gw.goal
    ax.plot(gx, gy, "*", color="gold", ms=16)
    ax.set_xlim(-0.5, gw.width - 0.5)
    ax.set_ylim(-0.5, gw.height - 0.5)
    ax.set_xticks(range(gw.width))
    ax.set_yticks(range(gw.height))
    ax.set_title(f"{title}: {100 * summary.illegal_fraction:.0f}% illegal")
    fig.tight_layout()
    image, data = out / "heatmap.png", out / "heatmap.csv"
    fig.savefig(image, dpi=110)
    plt.close(fig)
    rows = []
    for r in summary.rows:
        (x, y), (tx, ty) = gw.coords(r.state), gw.coords(r.target)
        rows.append([x, y, tx, ty, int(r.legal), int(r.on_path_state), int(r.target_on_path),
                     float(probs[r.state, r.target])])
    _write_csv(data, ["x", "y", "target_x", "target_y", "legal", "on_path", "target_on_path", "prob"], rows)
    return [image, data]


# ---- imagined vs real rollout ----------------------------------------------------------------

def rollout_table(policy: DecoupledPolicy, env, s0, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Imagined planner chain and the real deterministic trajectory from ``s0``."""
    imagined = np.array(multi_step_rollout(policy, s0, n), dtype=np.float64)
    real = [np.asarray(s0, dtype=np.float64)]
    s = real[0]
    for _ in range(n):
        a = policy.act(s, np.random.default_rng(0), deterministic=True).action
        s = env.dynamics(s, a)
        real.append(s)
    return imagined, np.array(real)


def matching_prefix(imagined: np.ndarray, real: np.ndarray, tol: float) -> int:
    """Number of leading steps (after ``s0``) with per-step error within ``tol``."""
    err = np.linalg.norm(imagined[1:] - real[1:], axis=-1)
    bad = np.flatnonzero(err > tol)
    return int(bad[0]) if bad.size else len(err)


def plot_rollout(policy: DecoupledPolicy, env, s0, n: int, out_dir: PathLike) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    imagined, real = rollout_table(policy, env, s0, n)
    err = np.linalg.norm(imagined - real, axis=-1)
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 4))
    ax0.plot(real[:, 0], real[:, 1], "-", label="environment")
    ax0.plot(imagined[:, 0], imagined[:, 1], "--", label="imagined")
    ax0.plot(real[0, 0], real[0, 1], "ko")
    ax0.set_aspect("equal", adjustable="datalim")
    ax0.legend()
    ax0.set_title("position trace")
    ax1.semilogy(np.arange(len(err)), np.maximum(err, 1e-16))
    ax1.set_xlabel("step")
    ax1.set_title("|imagined - real|")
    fig.tight_layout()
    image, data = out / "rollout.png", out / "rollout.csv"
    fig.savefig(image, dpi=110)
    plt.close(fig)
    d = real.shape[1]
    header = ["step"] + [f"imagined_{i}" for i in range(d)] + [f"real_{i}" for i in range(d)] + ["error"]
    rows = [[t, *imagined[t], *real[t], err[t]] for t in range(len(err))]
    _write_csv(data, header, rows)
    return [image, data]
