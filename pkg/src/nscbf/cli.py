"""Command-line front end: run a seeded batch and write CSVs, a JSON summary and SVG plots.

Exit codes: 0 success, 1 configuration error, 2 batch failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import FIELD_TYPES, RunConfig, parse_config
from .dynamics import Trajectory
from .errors import ConfigError
from .montecarlo import run_trials, simulate_batch
from .safety_filter import DEFAULT_EPSILON, Box
from .scenarios import Scenario, multi_agent_swap, single_agent_boolean

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_BATCH = 2

PLOT_TRIALS = 20
PLOT_STRIDE = 10
RECORD_CHUNK = 25


def build_scenario(cfg: RunConfig) -> Scenario:
    """Scenario for a resolved config. Geometric preconditions surface as config errors."""
    try:
        if cfg.scenario == "single-boolean":
            return single_agent_boolean(sigma=cfg.sigma, kp=cfg.kp, x0=cfg.x0, horizon=cfg.horizon)
        return multi_agent_swap(n_agents=cfg.n_agents, collision_radius=cfg.collision_radius,
                                sigma=cfg.sigma, kp=cfg.kp, horizon=cfg.horizon)
    except ValueError as exc:
        raise ConfigError(str(exc), key="scenario") from None


def _bounds(cfg: RunConfig) -> Box | None:
    if cfg.u_max is None:
        return None
    return Box(lower=-cfg.u_max, upper=cfg.u_max)


def csv_header(n: int, m: int) -> list[str]:
    return ["t", *(f"x{i + 1}" for i in range(n)), *(f"u{j + 1}" for j in range(m)), "h", "active_leaves"]


def write_trajectory_csv(path, traj: Trajectory) -> None:
    """One row per sample. The final sample has no control applied, so its controls are ``nan``."""
    n = traj.states.shape[1]
    m = traj.controls.shape[1]
    times = traj.times.tolist()
    states = traj.states.tolist()
    controls = traj.controls.tolist()
    h = traj.h_values.tolist()
    tail = ["nan"] * m
    lines = [",".join(csv_header(n, m))]
    for k, t in enumerate(times):
        u = list(map(repr, controls[k])) if k < len(controls) else tail
        fields = [repr(t), *map(repr, states[k]), *u, repr(h[k]), ";".join(map(str, traj.active_leaves[k]))]
        lines.append(",".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def write_summary(path, summary, cfg: RunConfig) -> dict:
    doc = {"version": __version__, "config": cfg.to_dict(), **summary.to_dict()}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    return doc


def load_summary_config(path) -> RunConfig:
    """Recover the resolved run configuration stored in a summary file."""
    return RunConfig.from_dict(json.loads(Path(path).read_text())["config"])


def _control_runs(scenario: Scenario, cfg: RunConfig) -> dict:
    runs = {}
    for eps in (0.0, DEFAULT_EPSILON):
        res, trajs, _ = simulate_batch(scenario, [0], cfg.seed, dt=cfg.dt, epsilon=eps, filter_enabled=True,
                                       bounds=_bounds(cfg), slack_penalty=cfg.slack_penalty, record=True)
        label = f"epsilon = {eps:g}, trial 0"
        if res[0].failure is not None:
            label += f" ({res[0].failure['reason']} at t = {res[0].steps * cfg.dt:.3f} s)"
        runs[label] = (trajs[0].times, trajs[0].controls)
    return runs


def run(config: RunConfig) -> int:
    """Execute a batch and write all artifacts under ``config.output_dir``."""
    from .plots import control_figure, overview_figure

    cfg = config.resolved()
    scenario = build_scenario(cfg)
    out = Path(cfg.output_dir)
    traj_dir = out / "trajectories"
    plot_dir = out / "plots"
    traj_dir.mkdir(parents=True, exist_ok=True)
    plot_dir.mkdir(parents=True, exist_ok=True)

    n_csv = cfg.trials if cfg.csv_trials is None else min(cfg.csv_trials, cfg.trials)
    n_plot = min(PLOT_TRIALS, cfg.trials)
    paths: list[np.ndarray] = []

    def keep(result, traj):
        if traj is None:
            return
        if result.trial < n_csv:
            write_trajectory_csv(traj_dir / f"trial_{result.trial}.csv", traj)
        if result.trial < n_plot:
            paths.append(traj.states[::PLOT_STRIDE])

    kwargs = dict(dt=cfg.dt, epsilon=cfg.epsilon, filter_enabled=cfg.filter, bounds=_bounds(cfg),
                  slack_penalty=cfg.slack_penalty)
    n_record = max(n_csv, n_plot)
    if cfg.workers <= 1:
        summary = run_trials(scenario, cfg.trials, cfg.seed, record=True, on_trial=keep,
                             chunk_size=RECORD_CHUNK, **kwargs)
    else:
        summary = run_trials(scenario, cfg.trials, cfg.seed, workers=cfg.workers, **kwargs)
        # trials are seeded by index, so re-running a prefix reproduces them exactly
        for start in range(0, n_record, RECORD_CHUNK):
            trials = range(start, min(start + RECORD_CHUNK, n_record))
            res, trajs, _ = simulate_batch(scenario, trials, cfg.seed, record=True, **kwargs)
            for r, tr in zip(res, trajs):
                keep(r, tr)

    write_summary(out / "summary.json", summary, cfg)
    overview_figure(scenario, paths, plot_dir / "overview.svg")
    control_figure(_control_runs(scenario, cfg), plot_dir / "control.svg", agent_dim=scenario.agent_dim)

    print(f"{scenario.name}: {summary.n_trials} trials, safety rate {summary.safety_rate:.4f}, "
          f"{summary.failures['count']} failed -> {out}")
    if summary.failures["count"] == summary.n_trials:
        print("every trial failed", file=sys.stderr)
        return EXIT_BATCH
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nscbf", description="Run a seeded Monte Carlo batch of the NSCBF safety filter.")
    p.add_argument("--config", type=Path, help="flat 'key = value' configuration file")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    for key, kind in FIELD_TYPES.items():
        flag = "--" + key.replace("_", "-")
        if kind is bool:
            p.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None)
        elif kind is list:
            p.add_argument(flag, dest=key, type=float, nargs="+", default=None, metavar="V")
        else:
            p.add_argument(flag, dest=key, type=kind, default=None)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        text = args.config.read_text() if args.config is not None else ""
        overrides = {k: v for k, v in vars(args).items() if k in FIELD_TYPES and v is not None}
        cfg = parse_config(text, overrides)
    except (OSError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"batch failed: {exc}", file=sys.stderr)
        return EXIT_BATCH


if __name__ == "__main__":
    sys.exit(main())
