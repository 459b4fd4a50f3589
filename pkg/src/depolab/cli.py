"""``depolab`` command line: run, verify, plot, inspect-checkpoint."""
from __future__ import annotations

import argparse
import datetime as _dt
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from depolab.approx import load_checkpoint
from depolab.trainer.agent import TrainingAborted
from depolab.trainer.config import ConfigError, config_from_dict, config_hash, load_config, with_overrides
from depolab.trainer.metrics import write_manifest
from depolab.trainer.runners import run_from_config

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _err(msg: str) -> None:
    print(f"depolab: {msg}", file=sys.stderr)


# ---- run -----------------------------------------------------------------------------------

def cmd_run(config_path: str, seed: Optional[int] = None, out: Optional[str] = None,
            argv: Sequence[str] = ()) -> int:
    from depolab.trainer.artifacts import save_run_checkpoint

    path = Path(config_path)
    if not path.is_file():
        _err(f"config not found: {config_path}")
        return EXIT_USAGE
    raw = path.read_bytes()
    try:
        cfg = load_config(path)
        if seed is not None:
            cfg = with_overrides(cfg, seed=seed)
    except (ConfigError, ValueError) as exc:
        _err(f"invalid config {config_path}: {exc}")
        return EXIT_USAGE
    out_dir = Path(out) if out else Path("runs") / f"{cfg.name}-seed{cfg.seed}"
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = run_from_config(cfg)
    except TrainingAborted as exc:
        _err(str(exc))
        return EXIT_FAIL
    except (ValueError, KeyError, OSError) as exc:
        _err(f"run failed: {exc}")
        return EXIT_FAIL

    files = []
    for i, log in enumerate(result.logs):
        name = "metrics.csv" if i == 0 else f"metrics_agent{i}.csv"
        log.save(out_dir / name)
        files.append(name)
    save_run_checkpoint(result, cfg, out_dir / "checkpoint.npz")
    files.append("checkpoint.npz")
    files.append("manifest.json")
    manifest = {
        "config_path": str(path.resolve()),
        "config_sha256": config_hash(raw),
        "effective_config_sha256": config_hash(cfg),
        "seed": cfg.seed,
        "kind": cfg.kind,
        "variant": cfg.variant,
        "output_dir": str(out_dir.resolve()),
        "command": " ".join(["depolab", *argv]) if argv else f"depolab run {config_path}",
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "files": sorted(files),
    }
    write_manifest(out_dir / "manifest.json", manifest)
    final = result.log.rows[-1] if result.log.rows else {}
    summary = ", ".join(f"{k}={final[k]:.4g}" for k in ("success_rate", "mean_return", "planner_mse")
                        if k in final)
    print(f"wrote {out_dir}: {', '.join(sorted(files))}")
    if summary:
        print(f"final: {summary}")
    return EXIT_OK


# ---- verify --------------------------------------------------------------------------------

def cmd_verify(suite: str) -> int:
    from depolab.verify import SUITES, worst

    if suite not in SUITES:
        _err(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
        return EXIT_USAGE
    checks = SUITES[suite]()
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    w = worst(checks)
    print(f"{suite}: {len(checks) - len(failed)}/{len(checks)} passed; worst: {w.name} = {w.residual:.3e}")
    return EXIT_FAIL if failed else EXIT_OK


# ---- plot ----------------------------------------------------------------------------------

def cmd_plot(inputs: Sequence[str], kind: str, out: Optional[str] = None, seed: int = 0,
             steps: int = 20) -> int:
    from depolab import plotting
    from depolab.envs.gridworld import GridWorld
    from depolab.trainer.artifacts import policy_from_checkpoint

    if not inputs:
        _err("plot needs at least one input file")
        return EXIT_USAGE
    missing = [p for p in inputs if not Path(p).is_file()]
    if missing:
        _err(f"input not found: {', '.join(missing)}")
        return EXIT_USAGE
    out_dir = Path(out) if out else Path("plots")
    try:
        if kind == "curves":
            written = plotting.plot_curves(inputs, out_dir)
        else:
            if len(inputs) != 1:
                _err(f"--kind {kind} takes exactly one checkpoint")
                return EXIT_USAGE
            policy, env = policy_from_checkpoint(inputs[0])
            if kind == "heatmap":
                if not isinstance(env, GridWorld):
                    _err("heatmaps need a grid-world checkpoint")
                    return EXIT_USAGE
                written = plotting.plot_heatmap(policy, env, out_dir)
            else:
                if isinstance(env, GridWorld):
                    _err("rollout plots need a point-mass checkpoint")
                    return EXIT_USAGE
                s0 = env.sample_start(np.random.default_rng(seed))
                written = plotting.plot_rollout(policy, env, s0, steps, out_dir)
    except (ValueError, KeyError, OSError) as exc:
        _err(f"cannot plot: {exc}")
        return EXIT_FAIL
    for p in written:
        print(p)
    return EXIT_OK


# ---- inspect -------------------------------------------------------------------------------

def cmd_inspect(path: str) -> int:
    if not Path(path).is_file():
        _err(f"checkpoint not found: {path}")
        return EXIT_USAGE
    try:
        sections, manifest = load_checkpoint(path)
    except (ValueError, KeyError, OSError) as exc:
        _err(str(exc))
        return EXIT_FAIL
    print(f"checkpoint {path}")
    for name, pv in sections.items():
        print(f"  [{name}] {pv.values.size} values, |theta| = {pv.norm():.6g}")
        for pname, (offset, shape) in pv.layout.items():
            print(f"      {pname:<28s} offset {offset:<7d} shape {tuple(shape)}")
    cfg = manifest.get("config")
    if cfg is not None:
        parsed = config_from_dict(cfg)
        print(f"  config: name={parsed.name} kind={parsed.kind} variant={parsed.variant} "
              f"seed={parsed.seed} env={parsed.env.name}")
    for key in sorted(k for k in manifest if k != "config"):
        print(f"  {key}: {manifest[key]}")
    return EXIT_OK


# ---- entry point ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depolab", description="Decoupled-policy imitation lab.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train from a YAML config")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    r.add_argument("--out", default=None, help="output directory")

    v = sub.add_parser("verify", help="run a property suite")
    v.add_argument("--suite", required=True)

    pl = sub.add_parser("plot", help="curves from metrics files, heatmap/rollout from a checkpoint")
    pl.add_argument("inputs", nargs="*")
    pl.add_argument("--kind", choices=("curves", "heatmap", "rollout"), default="curves")
    pl.add_argument("--out", default=None)
    pl.add_argument("--seed", type=int, default=0, help="start-state seed for rollouts")

    i = sub.add_parser("inspect-checkpoint", help="list sections and manifest of a checkpoint")
    i.add_argument("checkpoint")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.seed, args.out, argv)
    if args.command == "verify":
        return cmd_verify(args.suite)
    if args.command == "plot":
        return cmd_plot(args.inputs, args.kind, args.out, args.seed)
    return cmd_inspect(args.checkpoint)


if __name__ == "__main__":
    sys.exit(main())
