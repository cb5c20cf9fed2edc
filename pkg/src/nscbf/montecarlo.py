"""Seeded Monte Carlo batches with and without the safety filter.

Trials run in lockstep: a chunk of trials is advanced one Euler-Maruyama step
at a time with every per-trial quantity (leaf values, barrier rows, QP) held
in arrays. Each trial draws its noise from its own stream
``trial_seed(master_seed, k)`` and every array operation acts row-wise, so a
trial's result does not depend on which chunk or worker ran it.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .barrier_tree import DISTANCE_FLOOR, H_FLOOR
from .dynamics import ExitEvent, Trajectory, make_rng, n_steps, trial_seed, DEFAULT_DT
from .safety_filter import (DEFAULT_EPSILON, IDENTITY, Box, ClassK, batch_eval, constraint_rows_batch,
                            solve_filter)
from .qp_solver import solve_qp_batch
from .scenarios import Scenario
from .errors import BarrierSingularityError, InfeasibleQPError, SimulationError

NOISE_BLOCK = 2048


@dataclass
class TrialResult:
    trial: int
    min_h: float
    tv_control: float
    final_state: np.ndarray
    goal_error: float
    n_exits: int
    steps: int
    failure: dict | None = None

    @property
    def safe(self) -> bool:
        return self.failure is None and self.min_h >= 0.0


@dataclass
class MonteCarloSummary:
    n_trials: int
    safety_rate: float
    min_h: list[float]
    tv_control: list[float]
    goal_error: list[float]
    trials: list[int]
    qp_time: dict
    failures: dict
    violations: int
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def comparable(self) -> dict:
        """Everything except wall-clock timing."""
        d = self.to_dict()
        d.pop("qp_time")
        return d


def switching_metric(trajectory) -> float:
    """Total variation ``sum_k ||u_{k+1} - u_k||`` of the control sequence."""
    controls = trajectory.controls if isinstance(trajectory, Trajectory) else np.asarray(trajectory)
    if controls.shape[0] < 2:
        raise ValueError("switching metric needs at least two control samples")
    return float(np.sum(np.linalg.norm(np.diff(controls, axis=0), axis=1)))


def _reference_batch(reference, t, X):
    if getattr(reference, "batched", False):
        return reference(t, X)
    return np.stack([np.asarray(reference(t, x), dtype=float) for x in X])


def simulate_batch(scenario: Scenario, trials, master_seed: int, dt: float = DEFAULT_DT,
                   epsilon: float = DEFAULT_EPSILON, filter_enabled: bool = True,
                   alpha3: ClassK = IDENTITY, bounds: Box | None = None,
                   slack_penalty: float | None = None, record: bool = False,
                   timing_stride: int = 0, horizon: float | None = None):
    """Advance the given trials of ``scenario`` in lockstep.

    Returns ``(results, trajectories, timing)``: one :class:`TrialResult` per
    trial, the recorded :class:`Trajectory` objects when ``record`` is set
    (truncated at the failing step for failed trials), and scalar-path QP
    timings sampled every ``timing_stride`` steps on the chunk's first trial.
    """
    trials = [int(k) for k in trials]
    N = len(trials)
    model, tree = scenario.model, scenario.tree
    horizon = scenario.horizon if horizon is None else horizon
    if not dt > 0 or not horizon > dt:
        raise ValueError("need horizon > dt > 0")
    if not epsilon >= 0:
        raise ValueError("epsilon must be non-negative")
    steps = n_steps(horizon, dt)
    n, m, ell, L = model.state_dim, model.input_dim, model.noise_dim, len(tree)
    sqrt_dt = math.sqrt(dt)
    rngs = [make_rng(trial_seed(master_seed, k)) for k in trials]

    X = np.tile(scenario.x0, (N, 1))
    alive = np.ones(N, dtype=bool)
    failure: list[dict | None] = [None] * N
    last_step = np.full(N, steps)

    values = tree.leaf_values_batch(X)
    h, active = tree.select_batch(values)
    min_h = h.copy()
    tv = np.zeros(N)
    exits = np.zeros(N, dtype=int)
    prev_u = None

    if record:
        states = np.empty((N, steps + 1, n))
        controls = np.empty((N, steps, m))
        h_rec = np.empty((N, steps + 1))
        near_rec = np.zeros((N, steps + 1, L), dtype=bool)
        active_rec = np.empty((N, steps + 1), dtype=int)
        states[:, 0] = X
        h_rec[:, 0] = h
        active_rec[:, 0] = active
        near_rec[:, 0] = np.abs(values - h[:, None]) <= epsilon
        near_rec[np.arange(N), 0, active] = True

    lower = upper = None
    if bounds is not None:
        lower = None if bounds.lower is None else np.broadcast_to(np.asarray(bounds.lower, float), (m,))
        upper = None if bounds.upper is None else np.broadcast_to(np.asarray(bounds.upper, float), (m,))
    box_rows = []
    if upper is not None:
        box_rows += [(np.eye(m)[i], upper[i]) for i in np.flatnonzero(np.isfinite(upper))]
    if lower is not None:
        box_rows += [(-np.eye(m)[i], -lower[i]) for i in np.flatnonzero(np.isfinite(lower))]
    slack_scale = None if slack_penalty is None else 1.0 / math.sqrt(float(slack_penalty))

    timing: list[float] = []
    noise = None
    for k in range(steps):
        if k % NOISE_BLOCK == 0:
            block = min(NOISE_BLOCK, steps - k)
            noise = np.stack([rng.standard_normal((block, ell)) for rng in rngs], axis=1)
        t = k * dt
        u_ref = _reference_batch(scenario.reference, t, X)

        if filter_enabled:
            A, b, vals, dist = constraint_rows_batch(model, tree, X, alpha3)
            hh, act = tree.select_batch(vals)
            near = (np.abs(vals - hh[:, None]) <= epsilon) & (vals > H_FLOOR)
            near[np.arange(N), act] = True
            singular = alive & np.any(near & ((vals <= H_FLOOR) | (dist < DISTANCE_FLOOR)), axis=1)
            for i in np.flatnonzero(singular):
                failure[i] = {"reason": BarrierSingularityError.__name__, "step": k,
                              "message": f"h={hh[i]:.3g} at or below floor on an almost-active leaf"}
                alive[i] = False
                last_step[i] = k
            usable = near & alive[:, None]
            A = np.where(usable[..., None], A, 0.0)
            b = np.where(usable, b, 0.0)
            ref = u_ref
            if slack_scale is not None:
                A = np.concatenate([A, np.where(usable, -slack_scale, 0.0)[..., None]], axis=-1)
                slack_row = np.zeros((N, 1, m + 1))
                slack_row[:, 0, m] = -1.0
                A = np.concatenate([A, slack_row], axis=1)
                b = np.concatenate([b, np.zeros((N, 1))], axis=1)
                usable = np.concatenate([usable, alive[:, None]], axis=1)
                ref = np.concatenate([u_ref, np.zeros((N, 1))], axis=1)
            if box_rows:
                width = A.shape[-1]
                Ab = np.zeros((len(box_rows), width))
                Ab[:, :m] = [r[0] for r in box_rows]
                A = np.concatenate([A, np.broadcast_to(Ab, (N,) + Ab.shape)], axis=1)
                b = np.concatenate([b, np.tile([r[1] for r in box_rows], (N, 1))], axis=1)
                usable = np.concatenate([usable, np.repeat(alive[:, None], len(box_rows), axis=1)], axis=1)
            sol, _, _, infeasible = solve_qp_batch(A, b, ref, usable)
            U = sol[:, :m]
            for i in np.flatnonzero(infeasible & alive):
                failure[i] = {"reason": InfeasibleQPError.__name__, "step": k,
                              "message": "safety QP infeasible"}
                alive[i] = False
                last_step[i] = k
            if timing_stride and k % timing_stride == 0 and alive[0]:
                start = time.perf_counter()
                solve_filter(model, tree, X[0], u_ref[0], epsilon, alpha3, bounds, slack_penalty)
                timing.append(time.perf_counter() - start)
        else:
            U = u_ref

        if not np.any(alive):
            break
        live = np.flatnonzero(alive)
        U = np.where(alive[:, None], U, 0.0)
        F = batch_eval(model.drift, X)
        G = batch_eval(model.input_matrix, X)
        Sig = batch_eval(model.diffusion, X)
        gu = U @ G.T if G.ndim == 2 else np.einsum("nij,nj->ni", G, U)
        sn = noise[k % NOISE_BLOCK] @ Sig.T if Sig.ndim == 2 else np.einsum("nij,nj->ni", Sig, noise[k % NOISE_BLOCK])
        X_new = X + (F + gu) * dt + sn * sqrt_dt
        bad = alive & ~np.all(np.isfinite(X_new), axis=1)
        for i in np.flatnonzero(bad):
            failure[i] = {"reason": SimulationError.__name__, "step": k, "message": "state is not finite"}
            alive[i] = False
            last_step[i] = k
        X = np.where(alive[:, None], X_new, X)

        if prev_u is not None:
            tv[live] += np.sqrt(np.sum((U[live] - prev_u[live]) ** 2, axis=1))
        prev_u = U

        values = tree.leaf_values_batch(X)
        h_new, active_new = tree.select_batch(values)
        live = np.flatnonzero(alive)
        min_h[live] = np.minimum(min_h[live], h_new[live])
        exits[live] += active_new[live] != active[live]
        if record:
            controls[:, k] = U
            states[:, k + 1] = X
            h_rec[:, k + 1] = h_new
            active_rec[:, k + 1] = active_new
            near_rec[:, k + 1] = np.abs(values - h_new[:, None]) <= epsilon
            near_rec[np.arange(N), k + 1, active_new] = True
        active = np.where(alive, active_new, active)

    results = []
    for i, trial in enumerate(trials):
        results.append(TrialResult(
            trial=trial, min_h=float(min_h[i]), tv_control=float(tv[i]), final_state=X[i].copy(),
            goal_error=float(np.max(scenario.goal_errors(X[i]))), n_exits=int(exits[i]),
            steps=int(last_step[i]), failure=failure[i]))

    trajectories = None
    if record:
        times = np.arange(steps + 1) * dt
        trajectories = []
        for i in range(N):
            K = last_step[i]
            near_sets = [tuple(np.flatnonzero(row).tolist()) for row in near_rec[i, :K + 1]]
            act = active_rec[i, :K + 1]
            changes = np.flatnonzero(act[1:] != act[:-1]) + 1
            events = [ExitEvent(float(times[j]), int(act[j - 1]), int(act[j])) for j in changes]
            trajectories.append(Trajectory(times[:K + 1].copy(), states[i, :K + 1].copy(),
                                           controls[i, :K].copy(), h_rec[i, :K + 1].copy(), near_sets, events))
    return results, trajectories, timing


def _run_chunk(args):
    scenario, trials, master_seed, kwargs = args
    results, _, timing = simulate_batch(scenario, trials, master_seed, **kwargs)
    return results, timing


def summarize(results: list[TrialResult], timing: list[float], settings: dict | None = None) -> MonteCarloSummary:
    results = sorted(results, key=lambda r: r.trial)
    done = [r for r in results if r.failure is None]
    failed = [r for r in results if r.failure is not None]
    reasons: dict[str, int] = {}
    for r in failed:
        reasons[r.failure["reason"]] = reasons.get(r.failure["reason"], 0) + 1
    n = len(results)
    safe = sum(1 for r in done if r.min_h >= 0.0)
    t = np.asarray(timing, dtype=float)
    qp_time = {"samples": int(t.size)}
    if t.size:
        qp_time.update(mean=float(t.mean()), std=float(t.std()), median=float(np.median(t)), max=float(t.max()))
    return MonteCarloSummary(
        n_trials=n,
        safety_rate=safe / n if n else 0.0,
        min_h=[r.min_h for r in done],
        tv_control=[r.tv_control for r in done],
        goal_error=[r.goal_error for r in done],
        trials=[r.trial for r in done],
        qp_time=qp_time,
        failures={"count": len(failed), "reasons": reasons,
                  "trials": [dict(trial=r.trial, **r.failure) for r in failed]},
        violations=sum(1 for r in done if r.min_h < 0.0),
        settings=dict(settings or {}),
    )


def run_trials(scenario: Scenario, n_trials: int, master_seed: int, dt: float = DEFAULT_DT,
               epsilon: float = DEFAULT_EPSILON, filter_enabled: bool = True,
               alpha3: ClassK = IDENTITY, bounds: Box | None = None, slack_penalty: float | None = None,
               workers: int = 1, chunk_size: int = 100, timing_stride: int = 50,
               on_trial: Callable | None = None, record: bool = False) -> MonteCarloSummary:
    """Run ``n_trials`` seeded trials and reduce them to a summary.

    Trial ``k`` uses the noise stream ``trial_seed(master_seed, k)``. With
    ``record`` set, ``on_trial(result, trajectory)`` is called for each trial
    in index order (serial execution only).
    """
    if int(n_trials) != n_trials or n_trials < 1:
        raise ValueError(f"n_trials must be a positive integer, got {n_trials!r}")
    if chunk_size < 1:
        raise ValueError("chunk_size must be positive")
    kwargs = dict(dt=dt, epsilon=epsilon, filter_enabled=filter_enabled, alpha3=alpha3, bounds=bounds,
                  slack_penalty=slack_penalty, timing_stride=timing_stride if filter_enabled else 0)
    chunks = [list(range(s, min(s + chunk_size, n_trials))) for s in range(0, n_trials, chunk_size)]
    results: list[TrialResult] = []
    timing: list[float] = []
    if record or workers <= 1:
        for trials in chunks:
            res, trajs, tm = simulate_batch(scenario, trials, master_seed, record=record, **kwargs)
            results += res
            timing += tm
            if on_trial is not None:
                for r, tr in zip(res, trajs or [None] * len(res)):
                    on_trial(r, tr)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for res, tm in pool.map(_run_chunk, [(scenario, c, master_seed, kwargs) for c in chunks]):
                results += res
                timing += tm
                if on_trial is not None:
                    for r in res:
                        on_trial(r, None)
    settings = {"scenario": scenario.name, "master_seed": int(master_seed), "dt": dt, "epsilon": epsilon,
                "filter": bool(filter_enabled), "horizon": scenario.horizon}
    return summarize(results, timing, settings)
