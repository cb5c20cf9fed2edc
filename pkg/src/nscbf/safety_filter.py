"""Min-norm QP safety filter for non-smooth stochastic barrier functions.

For every leaf ``i`` in the almost-active set the filter enforces the Itô
condition on the reciprocal barrier ``B_i = 1/h_i``:

    dB_i/dx (f + g u) + 1/2 tr(sigma^T d2B_i/dx2 sigma) <= alpha3(h_i)

which is linear in ``u`` and stored as a row ``a^T u <= b``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .barrier_tree import H_FLOOR, BarrierTree, reciprocal_barrier
from .dynamics import ConstantMap, SDEModel
from .errors import BarrierSingularityError, InfeasibleQPError
from .qp_solver import QPProblem, QPSolution, solve_qp

DEFAULT_EPSILON = 0.05
DEFAULT_SLACK_PENALTY = 1e6


@dataclass(frozen=True)
class ClassK:
    """Class-K function ``s -> gain * s**exponent`` (identity when both are 1).

    Negative arguments are mapped by odd extension.
    """

    kind: str = "identity"
    gain: float = 1.0
    exponent: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "linear", "power"):
            raise ValueError(f"unknown class-K kind {self.kind!r}")
        if not (self.gain > 0 and self.exponent > 0):
            raise ValueError("class-K gain and exponent must be positive")
        if self.kind == "identity" and (self.gain != 1.0 or self.exponent != 1.0):
            raise ValueError("identity takes no parameters")
        if self.kind == "linear" and self.exponent != 1.0:
            raise ValueError("linear class-K has exponent 1")

    @classmethod
    def identity(cls) -> "ClassK":
        return cls()

    @classmethod
    def linear(cls, gain: float) -> "ClassK":
        return cls("linear", gain=gain)

    @classmethod
    def power(cls, exponent: float, gain: float = 1.0) -> "ClassK":
        return cls("power", gain=gain, exponent=exponent)

    def __call__(self, s):
        if self.kind == "identity":
            return s
        if self.kind == "linear":
            return self.gain * s
        if isinstance(s, np.ndarray):
            return np.copysign(self.gain * np.abs(s) ** self.exponent, s)
        return math.copysign(self.gain * abs(s) ** self.exponent, s)


IDENTITY = ClassK()


@dataclass(frozen=True)
class ConstraintRow:
    """``a^T u <= b`` for one leaf."""

    a: np.ndarray
    b: float
    leaf_index: int


@dataclass(frozen=True)
class Box:
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None


def constraint_row(model: SDEModel, tree: BarrierTree, leaf_index: int, x, alpha3: ClassK = IDENTITY,
                   h_floor: float = H_FLOOR) -> ConstraintRow:
    x = np.asarray(x, dtype=float)
    leaf = tree.leaves[leaf_index]
    h = leaf.value(x)
    try:
        _, grad_b, hess_b = reciprocal_barrier(h, leaf.gradient(x), leaf.hessian(x), floor=h_floor)
    except BarrierSingularityError as exc:
        if exc.leaf is None:
            exc.leaf = f"{leaf_index}:{leaf.name}"
        raise
    sigma = model.diffusion(x)
    ito = 0.5 * float(np.einsum("ij,ik,kj->", sigma, hess_b, sigma))
    a = model.input_matrix(x).T @ grad_b
    b = alpha3(h) - float(grad_b @ model.drift(x)) - ito
    return ConstraintRow(a, b, leaf_index)


def usable_leaves(tree: BarrierTree, x, epsilon: float) -> tuple[int, ...]:
    """Almost-active leaves that get a barrier row.

    A losing branch of a max node can come within ``epsilon`` of ``h`` while
    its own value is at or below zero, where ``1/h_j`` is undefined. Such
    leaves do not bound the safe set locally and are skipped. The active leaf
    is always kept, so a non-positive ``h`` still raises.
    """
    s = tree.almost_active(x, epsilon)
    values = tree.leaf_values(x)
    return tuple(i for i in s.near if i == s.active or values[i] > H_FLOOR)


def batch_eval(fn, X) -> np.ndarray:
    """Evaluate a model map on every row of ``X``; constant maps are returned unbroadcast."""
    if isinstance(fn, ConstantMap):
        return fn.value
    return np.stack([fn(x) for x in X])


def constraint_rows_batch(model: SDEModel, tree: BarrierTree, X, alpha3: ClassK = IDENTITY):
    """Rows for every leaf at every state of ``X``.

    Returns ``(A, b, values, dist)`` with ``A`` of shape ``(N, L, m)``. Uses
    ``tr(sigma^T hess_B sigma) = 2 grad_h^T S grad_h / h^3 - tr(hess_h S) / h^2``
    with ``S = sigma sigma^T``, so no Hessian is formed. Entries for leaves at
    or below the floor are not finite and must be masked by the caller.
    """
    X = np.asarray(X, dtype=float)
    F = batch_eval(model.drift, X)
    G = batch_eval(model.input_matrix, X)
    Sig = batch_eval(model.diffusion, X)
    S = Sig @ np.swapaxes(Sig, -1, -2)
    values, grads, trace_hs, dist = tree.leaf_terms_batch(X, S)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = 1.0 / values
        inv2 = inv * inv
        grad_b = -grads * inv2[..., None]
        A = grad_b @ G
        if S.ndim == 2:
            gsg = np.einsum("nli,ij,nlj->nl", grads, S, grads)
        else:
            gsg = np.einsum("nli,nij,nlj->nl", grads, S, grads)
        ito = 0.5 * (2.0 * gsg * inv2 * inv - trace_hs * inv2)
        drift = np.sum(grad_b * (F if F.ndim == 2 else F[None, :])[:, None, :], axis=-1)
        b = alpha3(values) - drift - ito
    return A, b, values, dist


@dataclass
class FilterOutput:
    u: np.ndarray
    rows: list[ConstraintRow]
    solution: QPSolution
    slack: float = 0.0


def solve_filter(model: SDEModel, tree: BarrierTree, x, u_ref, epsilon: float = DEFAULT_EPSILON,
                 alpha3: ClassK = IDENTITY, bounds: Box | None = None,
                 slack_penalty: float | None = None, near=None) -> FilterOutput:
    """Filter ``u_ref`` and return the control along with the rows and QP solution."""
    x = np.asarray(x, dtype=float)
    u_ref = np.asarray(u_ref, dtype=float)
    if near is None:
        near = usable_leaves(tree, x, epsilon)
    rows = [constraint_row(model, tree, i, x, alpha3) for i in near]
    m = u_ref.shape[0]
    lower = upper = None
    if bounds is not None and bounds.lower is not None:
        lower = np.broadcast_to(np.asarray(bounds.lower, dtype=float), (m,))
    if bounds is not None and bounds.upper is not None:
        upper = np.broadcast_to(np.asarray(bounds.upper, dtype=float), (m,))

    if slack_penalty is None:
        problem = QPProblem(u_ref, [(r.a, r.b) for r in rows], lower, upper)
        sol = solve_qp(problem)
        if not sol.optimal:
            raise InfeasibleQPError(
                f"safety QP infeasible at x={x.tolist()} (leaves {list(near)})", rows, sol.certificate)
        return FilterOutput(sol.u_star, rows, sol)

    # slack s >= 0 on every barrier row, weight w: substitute s = v / sqrt(w)
    # so the augmented objective stays a plain projection in (u, v)
    w = float(slack_penalty)
    if not w > 0:
        raise ValueError("slack_penalty must be positive")
    scale = 1.0 / math.sqrt(w)
    aug_rows = [(np.append(r.a, -scale), r.b) for r in rows]
    aug_rows.append((np.append(np.zeros(m), -1.0), 0.0))
    inf = np.full(1, np.inf)
    lo = None if lower is None else np.concatenate([lower, -inf])
    hi = None if upper is None else np.concatenate([upper, inf])
    sol = solve_qp(QPProblem(np.append(u_ref, 0.0), aug_rows, lo, hi))
    if not sol.optimal:
        raise InfeasibleQPError(f"input bounds infeasible at x={x.tolist()}", rows, sol.certificate)
    return FilterOutput(sol.u_star[:m], rows, sol, float(sol.u_star[m] * scale))


def filter_control(model: SDEModel, tree: BarrierTree, x, u_ref, epsilon: float = DEFAULT_EPSILON,
                   alpha3: ClassK = IDENTITY, bounds: Box | None = None,
                   slack_penalty: float | None = None) -> np.ndarray:
    """Closest control to ``u_ref`` satisfying the barrier condition of every almost-active leaf."""
    return solve_filter(model, tree, x, u_ref, epsilon, alpha3, bounds, slack_penalty).u


class SafetyFilter:
    """Feedback controller ``(t, x) -> u`` that filters a reference controller.

    Keeps per-step QP solve times and the largest slack used.
    """

    def __init__(self, model: SDEModel, tree: BarrierTree, reference, epsilon: float = DEFAULT_EPSILON,
                 alpha3: ClassK = IDENTITY, bounds: Box | None = None, slack_penalty: float | None = None):
        if not epsilon >= 0:
            raise ValueError(f"epsilon must be non-negative, got {epsilon!r}")
        self.model = model
        self.tree = tree
        self.reference = reference
        self.epsilon = epsilon
        self.alpha3 = alpha3
        self.bounds = bounds
        self.slack_penalty = slack_penalty
        self.solve_times: list[float] = []
        self.max_slack = 0.0

    def __call__(self, t, x):
        u_ref = self.reference(t, x)
        start = time.perf_counter()
        out = solve_filter(self.model, self.tree, x, u_ref, self.epsilon, self.alpha3,
                           self.bounds, self.slack_penalty)
        self.solve_times.append(time.perf_counter() - start)
        if out.slack > self.max_slack:
            self.max_slack = out.slack
        return out.u
