"""Static SVG figures: trajectories over the scenario geometry, and control signals vs time."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .barrier_tree import KeepInDisk, KeepOutDisk  # noqa: E402
from .scenarios import Scenario  # noqa: E402

SVG_SALT = "nscbf"


def _save(fig, path) -> None:
    # fixed hash salt and no date so reruns produce identical files
    with plt.rc_context({"svg.hashsalt": SVG_SALT}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _draw_geometry(ax, scenario: Scenario) -> None:
    for leaf in scenario.tree.leaves:
        if isinstance(leaf, KeepInDisk):
            ax.add_patch(plt.Circle(leaf.center, leaf.radius, fill=False, ls="--", color="tab:green"))
        elif isinstance(leaf, KeepOutDisk):
            ax.add_patch(plt.Circle(leaf.center, leaf.radius, color="tab:red", alpha=0.35))


def overview_figure(scenario: Scenario, paths: list[np.ndarray], path) -> None:
    """Draw each state path (``(T, n)`` arrays) agent by agent on top of the geometry."""
    fig, ax = plt.subplots(figsize=(6, 6))
    _draw_geometry(ax, scenario)
    d = scenario.agent_dim
    colors = plt.get_cmap("tab10")
    for states in paths:
        for a in range(scenario.n_agents):
            xy = states[:, a * d:a * d + 2]
            ax.plot(xy[:, 0], xy[:, 1], lw=0.6, alpha=0.5, color=colors(a % 10))
    x0 = scenario.x0.reshape(-1, d)
    goals = np.asarray(scenario.goals)
    ax.plot(x0[:, 0], x0[:, 1], "ko", ms=4, label="start")
    ax.plot(goals[:, 0], goals[:, 1], "k*", ms=9, label="goal")
    ax.set_aspect("equal")
    ax.autoscale_view()
    ax.set_xlabel("$x_1$")
    ax.set_ylabel("$x_2$")
    ax.set_title(f"{scenario.name}: {len(paths)} trajectories")
    ax.legend(loc="best")
    _save(fig, path)


def control_figure(runs: dict, path, agent_dim: int = 2) -> None:
    """Plot the first agent's control components against time, one panel per run.

    ``runs`` maps a label (for instance ``"eps=0"``) to ``(times, controls)``.
    """
    fig, axes = plt.subplots(len(runs), 1, figsize=(7, 2.6 * len(runs)), sharex=True, squeeze=False)
    for ax, (label, (times, controls)) in zip(axes[:, 0], runs.items()):
        for j in range(min(agent_dim, controls.shape[1])):
            ax.plot(times[:len(controls)], controls[:, j], lw=0.7, label=f"$u_{j + 1}$")
        ax.set_ylabel("control")
        ax.set_title(label)
        ax.legend(loc="upper right")
    axes[-1, 0].set_xlabel("t [s]")
    fig.tight_layout()
    _save(fig, path)
