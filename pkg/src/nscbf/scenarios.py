"""Benchmark scenarios: single agent with a Boolean safety formula, and the multi-agent antipodal swap."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .barrier_tree import BarrierTree, KeepInDisk, KeepOutDisk, Leaf, Max, Min, PairwiseSeparation
from .dynamics import SDEModel, joint_model, single_integrator

SIGMA = 0.025

GOAL = (1.8, 1.0)
OBSTACLE = ((1.2, 0.4), 0.6)
COVERAGE = (((0.0, -0.2), 1.1), ((0.5, 1.8), 1.4))

SINGLE_X0 = (-0.5, 0.0)
SINGLE_KP = 1.0
SINGLE_HORIZON = 10.0

SWAP_AGENTS = 6
SWAP_RADIUS = 0.1
SWAP_KP = 2.0
SWAP_HORIZON = 15.0


class ProportionalController:
    """``u(t, x) = gain * (goal - x)``; applied block-wise when ``goal`` is a joint vector.

    Also accepts a stack of states, one per row.
    """

    batched = True

    def __init__(self, goal, gain: float):
        if not gain > 0:
            raise ValueError(f"gain must be positive, got {gain!r}")
        self.goal = np.array(goal, dtype=float)
        self.gain = float(gain)

    def __call__(self, t, x):
        return self.gain * (self.goal - x)

    def __repr__(self):
        return f"ProportionalController(goal={self.goal.tolist()}, gain={self.gain})"


def proportional_controller(goal, gain: float) -> ProportionalController:
    return ProportionalController(goal, gain)


@dataclass
class Scenario:
    name: str
    model: SDEModel
    tree: BarrierTree
    reference: ProportionalController
    x0: np.ndarray
    horizon: float
    goals: list[np.ndarray]
    agent_dim: int = 2
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x0 = np.array(self.x0, dtype=float)
        if self.x0.shape != (self.model.state_dim,) or self.tree.state_dim != self.model.state_dim:
            raise ValueError("scenario dimensions are inconsistent")
        if not self.tree.value(self.x0) > 0:
            raise ValueError(f"{self.name}: initial state is not strictly safe")

    @property
    def n_agents(self) -> int:
        return len(self.goals)

    def goal_errors(self, x) -> np.ndarray:
        """Distance of each agent to its goal."""
        x = np.asarray(x, dtype=float).reshape(-1, self.agent_dim)
        return np.linalg.norm(x - np.asarray(self.goals), axis=1)


def single_agent_tree() -> BarrierTree:
    (oc, orad), ((n1c, n1r), (n2c, n2r)) = OBSTACLE, COVERAGE
    return BarrierTree(Min(
        Leaf(KeepOutDisk(oc, orad, name="obstacle")),
        Max(Leaf(KeepInDisk(n1c, n1r, name="coverage_1")),
            Leaf(KeepInDisk(n2c, n2r, name="coverage_2"))),
    ))


def single_agent_boolean(sigma: float = SIGMA, kp: float = SINGLE_KP, x0=SINGLE_X0,
                         horizon: float = SINGLE_HORIZON) -> Scenario:
    """Avoid the obstacle while staying inside at least one coverage disk, heading for an uncovered goal."""
    model = single_integrator(sigma)
    model.check_assumptions(np.asarray(x0, dtype=float))
    goal = np.array(GOAL)
    return Scenario(
        name="single-boolean", model=model, tree=single_agent_tree(),
        reference=ProportionalController(goal, kp), x0=np.array(x0, dtype=float),
        horizon=horizon, goals=[goal],
        params={"sigma": sigma, "kp": kp, "x0": list(map(float, x0)), "horizon": horizon},
    )


def swap_positions(n_agents: int) -> tuple[np.ndarray, np.ndarray]:
    """Start and goal of each agent: evenly spaced on the unit circle, goal at the antipode."""
    theta = 2.0 * np.pi * np.arange(n_agents) / n_agents
    start = np.column_stack([np.cos(theta), np.sin(theta)])
    return start, -start


def multi_agent_swap(n_agents: int = SWAP_AGENTS, collision_radius: float = SWAP_RADIUS,
                     sigma: float = SIGMA, kp: float = SWAP_KP, horizon: float = SWAP_HORIZON) -> Scenario:
    """Agents on the unit circle swap with their antipodes without pairwise collisions."""
    if int(n_agents) != n_agents or n_agents < 2:
        raise ValueError(f"n_agents must be an integer >= 2, got {n_agents!r}")
    if not collision_radius > 0:
        raise ValueError(f"collision_radius must be positive, got {collision_radius!r}")
    if not 2.0 * math.sin(math.pi / n_agents) > 2.0 * collision_radius:
        raise ValueError(
            f"{n_agents} agents with collision radius {collision_radius} start in collision")
    model = joint_model([single_integrator(sigma) for _ in range(n_agents)])
    start, goal = swap_positions(n_agents)
    model.check_assumptions(start.ravel())
    leaves = [Leaf(PairwiseSeparation(i, j, 2.0 * collision_radius))
              for i, j in combinations(range(n_agents), 2)]
    tree = BarrierTree(Min(*leaves), state_dim=2 * n_agents)
    return Scenario(
        name="multi-swap", model=model, tree=tree,
        reference=ProportionalController(goal.ravel(), kp), x0=start.ravel(),
        horizon=horizon, goals=list(goal),
        params={"sigma": sigma, "kp": kp, "n_agents": n_agents,
                "collision_radius": collision_radius, "horizon": horizon},
    )
