"""Control-affine Itô SDE models and a seeded Euler-Maruyama closed-loop integrator.

A model describes

    dx = (f(x) + g(x) u) dt + sigma(x) dB

with ``f`` the drift, ``g`` the input matrix and ``sigma`` a diagonal diffusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ControllerError, DimensionError, SimulationError

DEFAULT_DT = 1e-3

Controller = Callable[[float, np.ndarray], np.ndarray]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


class ConstantMap:
    """State-independent map returning a fixed read-only array."""

    def __init__(self, value):
        self.value = _frozen(value)

    def __call__(self, x):
        return self.value

    def __repr__(self):
        return f"ConstantMap(shape={self.value.shape})"


class BlockDiagonalMap:
    """Stacks per-agent maps along the diagonal of the joint state."""

    def __init__(self, maps, state_slices, vector: bool):
        self.maps = list(maps)
        self.state_slices = list(state_slices)
        self.vector = vector

    def __call__(self, x):
        parts = [fn(x[s]) for fn, s in zip(self.maps, self.state_slices)]
        if self.vector:
            return np.concatenate(parts)
        rows = sum(p.shape[0] for p in parts)
        cols = sum(p.shape[1] for p in parts)
        out = np.zeros((rows, cols))
        r = c = 0
        for p in parts:
            out[r:r + p.shape[0], c:c + p.shape[1]] = p
            r += p.shape[0]
            c += p.shape[1]
        return out


@dataclass(frozen=True)
class SDEModel:
    """Control-affine SDE ``dx = (f + g u) dt + sigma dB``.

    ``drift``, ``input_matrix`` and ``diffusion`` map a state to an n-vector,
    an n x m matrix and an n x l matrix respectively. They must be pure.
    """

    state_dim: int
    input_dim: int
    noise_dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    input_matrix: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        for name in ("state_dim", "input_dim", "noise_dim"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")

    def check_assumptions(self, x) -> None:
        """Check that ``sigma(x)`` is diagonal with strictly positive entries and all maps are finite."""
        x = np.asarray(x, dtype=float)
        f, g, s = self.drift(x), self.input_matrix(x), self.diffusion(x)
        if f.shape != (self.state_dim,) or g.shape != (self.state_dim, self.input_dim) \
                or s.shape != (self.state_dim, self.noise_dim):
            raise DimensionError("model maps return inconsistent shapes")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g)) and np.all(np.isfinite(s))):
            raise ValueError("model evaluation is not finite")
        if self.state_dim != self.noise_dim:
            raise ValueError("diffusion must be square to be diagonal")
        if np.any(s - np.diag(np.diag(s))) or np.any(np.diag(s) <= 0):
            raise ValueError("diffusion must be diagonal with strictly positive entries")


def single_integrator(sigma: float) -> SDEModel:
    """Planar stochastic single integrator ``dx = u dt + sigma I dB``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    return SDEModel(
        state_dim=2, input_dim=2, noise_dim=2,
        drift=ConstantMap(np.zeros(2)),
        input_matrix=ConstantMap(np.eye(2)),
        diffusion=ConstantMap(sigma * np.eye(2)),
    )


def joint_model(agent_models: Sequence[SDEModel]) -> SDEModel:
    """Stack independent agent models into one block-diagonal joint model."""
    agent_models = list(agent_models)
    if not agent_models:
        raise ValueError("joint_model needs at least one agent model")
    if len(agent_models) == 1:
        return agent_models[0]

    slices = []
    start = 0
    for mdl in agent_models:
        slices.append(slice(start, start + mdl.state_dim))
        start += mdl.state_dim
    n = start
    m = sum(mdl.input_dim for mdl in agent_models)
    l = sum(mdl.noise_dim for mdl in agent_models)

    def stack(attr, vector):
        maps = [getattr(mdl, attr) for mdl in agent_models]
        if all(isinstance(fn, ConstantMap) for fn in maps):
            # constant blocks collapse to one constant joint map
            probe = BlockDiagonalMap(maps, slices, vector)(np.zeros(n))
            return ConstantMap(probe)
        return BlockDiagonalMap(maps, slices, vector)

    return SDEModel(
        state_dim=n, input_dim=m, noise_dim=l,
        drift=stack("drift", True),
        input_matrix=stack("input_matrix", False),
        diffusion=stack("diffusion", False),
    )


def euler_maruyama_step(model: SDEModel, x, u, dt: float, noise) -> np.ndarray:
    """One Euler-Maruyama step: ``x + (f + g u) dt + sigma sqrt(dt) noise``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    if x.shape != (model.state_dim,):
        raise DimensionError(f"state has shape {x.shape}, expected ({model.state_dim},)")
    if u.shape != (model.input_dim,):
        raise DimensionError(f"control has shape {u.shape}, expected ({model.input_dim},)")
    if noise.shape != (model.noise_dim,):
        raise DimensionError(f"noise has shape {noise.shape}, expected ({model.noise_dim},)")
    return _step(model, x, u, dt, math.sqrt(dt), noise)


def _step(model, x, u, dt, sqrt_dt, noise):
    return x + (model.drift(x) + model.input_matrix(x) @ u) * dt + (model.diffusion(x) @ noise) * sqrt_dt


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator from an int or a ``SeedSequence``."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.Philox(seed))


def trial_seed(master_seed: int, trial: int) -> np.random.SeedSequence:
    """Independent stream for trial ``trial``; depends only on ``(master_seed, trial)``."""
    return np.random.SeedSequence(int(master_seed), spawn_key=(int(trial),))


def n_steps(horizon: float, dt: float) -> int:
    # guard against 0.01/0.001 = 10.000000000000002
    return max(1, math.ceil(horizon / dt - 1e-9))


@dataclass(frozen=True)
class ExitEvent:
    """The selected leaf changed between two samples."""

    time: float
    from_leaf: int
    to_leaf: int


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    h_values: np.ndarray | None = None
    active_leaves: list[tuple[int, ...]] | None = None
    exit_events: list[ExitEvent] = field(default_factory=list)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def min_h(self) -> float:
        return float(np.min(self.h_values))


def simulate(model: SDEModel, controller: Controller, x0, horizon: float, dt: float = DEFAULT_DT,
             seed=0, tree=None, epsilon: float = 0.0) -> Trajectory:
    """Integrate the closed loop under zero-order hold.

    The controller is evaluated once per step. All noise is drawn up front from
    the stream identified by ``seed``, so equal inputs give bitwise-equal output.
    When ``tree`` is given, ``h``, the almost-active leaves (at ``epsilon``) and
    the exit events are recorded for every sample.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    if not horizon > dt:
        raise ValueError(f"horizon ({horizon!r}) must exceed dt ({dt!r})")
    x = np.array(x0, dtype=float)
    if x.shape != (model.state_dim,):
        raise DimensionError(f"x0 has shape {x.shape}, expected ({model.state_dim},)")

    steps = n_steps(horizon, dt)
    noise = make_rng(seed).standard_normal((steps, model.noise_dim))
    times = np.arange(steps + 1) * dt
    states = np.empty((steps + 1, model.state_dim))
    controls = np.empty((steps, model.input_dim))
    states[0] = x

    record = tree is not None
    if record:
        h_values = np.empty(steps + 1)
        active_sets = []
        events = []
        h_values[0], active, near = tree.probe(x, epsilon)
        active_sets.append(near)

    sqrt_dt = math.sqrt(dt)
    m = model.input_dim
    for k in range(steps):
        t = times[k]
        try:
            u = np.asarray(controller(t, x), dtype=float)
        except Exception as exc:
            raise ControllerError(k, float(t), exc) from exc
        if u.shape != (m,):
            raise ControllerError(k, float(t), DimensionError(f"control has shape {u.shape}, expected ({m},)"))
        controls[k] = u
        x = _step(model, x, u, dt, sqrt_dt, noise[k])
        if not np.all(np.isfinite(x)):
            raise SimulationError(k, "state is not finite")
        states[k + 1] = x
        if record:
            h_values[k + 1], new_active, near = tree.probe(x, epsilon)
            active_sets.append(near)
            if new_active != active:
                events.append(ExitEvent(float(times[k + 1]), active, new_active))
                active = new_active

    if not record:
        return Trajectory(times, states, controls)
    return Trajectory(times, states, controls, h_values, active_sets, events)
