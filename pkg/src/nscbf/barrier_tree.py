"""Non-smooth safety functions built as min/max trees over smooth distance barriers.

``min`` encodes conjunction and ``max`` disjunction of the leaf conditions
``h_i(x) >= 0``. The leaf picked by descending the tree (argmin at min nodes,
argmax at max nodes) is the smooth piece that is active at ``x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import BarrierSingularityError, DimensionError

DISTANCE_FLOOR = 1e-9
H_FLOOR = 1e-9


def _sqnorm(d):
    """Sum of squares over the last axis, accumulated in a fixed order.

    Scalar and batched evaluations share this so they agree bit for bit.
    """
    acc = d[..., 0] * d[..., 0]
    for i in range(1, d.shape[-1]):
        acc = acc + d[..., i] * d[..., i]
    return acc


def _distance_hessian(d: np.ndarray, r: float) -> np.ndarray:
    """Hessian of ``y -> ||y||`` at ``y = d`` with ``r = ||d||``."""
    return (np.eye(d.shape[0]) - np.outer(d, d) / (r * r)) / r


@dataclass(frozen=True, eq=False)
class KeepOutDisk:
    """``h = ||x - c|| - radius``: stay outside the disk."""

    center: np.ndarray
    radius: float
    name: str = "keep_out"

    def __post_init__(self):
        object.__setattr__(self, "center", np.array(self.center, dtype=float))
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius!r}")

    sign = 1.0

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def _offset(self, x):
        d = x - self.center
        r = math.sqrt(_sqnorm(d))
        if r < DISTANCE_FLOOR:
            raise BarrierSingularityError(
                f"{self.name}: distance to center {r:.3g} below floor {DISTANCE_FLOOR:g}", leaf=self.name, value=r)
        return d, r

    def value(self, x) -> float:
        return self.sign * (math.sqrt(_sqnorm(x - self.center)) - self.radius)

    def gradient(self, x) -> np.ndarray:
        d, r = self._offset(x)
        return self.sign * d / r

    def hessian(self, x) -> np.ndarray:
        d, r = self._offset(x)
        return self.sign * _distance_hessian(d, r)


@dataclass(frozen=True, eq=False)
class KeepInDisk(KeepOutDisk):
    """``h = radius - ||x - c||``: stay inside the disk."""

    name: str = "keep_in"
    sign = -1.0


@dataclass(frozen=True, eq=False)
class PairwiseSeparation:
    """``h = ||x_i - x_j|| - min_distance`` on a stacked joint state."""

    agent_i: int
    agent_j: int
    min_distance: float
    per_agent_dim: int = 2
    name: str = ""

    def __post_init__(self):
        if self.agent_i == self.agent_j or min(self.agent_i, self.agent_j) < 0:
            raise ValueError("agent indices must be distinct and non-negative")
        if not self.min_distance > 0:
            raise ValueError(f"min_distance must be positive, got {self.min_distance!r}")
        if not self.name:
            object.__setattr__(self, "name", f"sep({self.agent_i},{self.agent_j})")

    @property
    def dim(self) -> int:
        # lower bound; the tree fixes the exact joint dimension
        return (max(self.agent_i, self.agent_j) + 1) * self.per_agent_dim

    def _blocks(self):
        k = self.per_agent_dim
        return slice(self.agent_i * k, (self.agent_i + 1) * k), slice(self.agent_j * k, (self.agent_j + 1) * k)

    def _offset(self, x):
        si, sj = self._blocks()
        d = x[si] - x[sj]
        r = math.sqrt(_sqnorm(d))
        if r < DISTANCE_FLOOR:
            raise BarrierSingularityError(
                f"{self.name}: agent distance {r:.3g} below floor {DISTANCE_FLOOR:g}", leaf=self.name, value=r)
        return si, sj, d, r

    def value(self, x) -> float:
        si, sj = self._blocks()
        return math.sqrt(_sqnorm(x[si] - x[sj])) - self.min_distance

    def gradient(self, x) -> np.ndarray:
        si, sj, d, r = self._offset(x)
        grad = np.zeros(x.shape[0])
        grad[si] = d / r
        grad[sj] = -d / r
        return grad

    def hessian(self, x) -> np.ndarray:
        si, sj, d, r = self._offset(x)
        block = _distance_hessian(d, r)
        n = x.shape[0]
        hess = np.zeros((n, n))
        hess[si, si] = block
        hess[sj, sj] = block
        hess[si, sj] = -block
        hess[sj, si] = -block
        return hess


SmoothBarrier = Union[KeepOutDisk, KeepInDisk, PairwiseSeparation]


def leaf_gradient(leaf: SmoothBarrier, x) -> np.ndarray:
    return leaf.gradient(np.asarray(x, dtype=float))


def leaf_hessian(leaf: SmoothBarrier, x) -> np.ndarray:
    return leaf.hessian(np.asarray(x, dtype=float))


def reciprocal_barrier(h: float, grad_h, hess_h, floor: float = H_FLOOR):
    """Reciprocal barrier ``B = 1/h`` with its gradient and Hessian.

    Returns ``(B, grad_B, hess_B)`` where ``grad_B = -grad_h / h^2`` and
    ``hess_B = 2 grad_h grad_h^T / h^3 - hess_h / h^2``.
    """
    if not h > floor:
        raise BarrierSingularityError(f"reciprocal barrier undefined at h={h:.3g} (floor {floor:g})", value=h)
    grad_h = np.asarray(grad_h, dtype=float)
    hess_h = np.asarray(hess_h, dtype=float)
    inv = 1.0 / h
    inv2 = inv * inv
    return inv, -grad_h * inv2, 2.0 * inv2 * inv * np.outer(grad_h, grad_h) - hess_h * inv2


# --- tree -----------------------------------------------------------------

@dataclass(frozen=True)
class Leaf:
    barrier: SmoothBarrier


@dataclass(frozen=True)
class Min:
    children: tuple

    def __init__(self, *children):
        if len(children) == 1 and isinstance(children[0], (list, tuple)):
            children = tuple(children[0])
        if not children:
            raise ValueError("Min needs at least one child")
        object.__setattr__(self, "children", tuple(_as_node(c) for c in children))


@dataclass(frozen=True)
class Max:
    children: tuple

    def __init__(self, *children):
        if len(children) == 1 and isinstance(children[0], (list, tuple)):
            children = tuple(children[0])
        if not children:
            raise ValueError("Max needs at least one child")
        object.__setattr__(self, "children", tuple(_as_node(c) for c in children))


Node = Union[Leaf, Min, Max]


def _as_node(obj) -> Node:
    if isinstance(obj, (Leaf, Min, Max)):
        return obj
    if isinstance(obj, (KeepOutDisk, PairwiseSeparation)):
        return Leaf(obj)
    raise TypeError(f"not a tree node or barrier: {obj!r}")


@dataclass(frozen=True)
class AlmostActiveSet:
    active: int
    near: tuple[int, ...]
    epsilon: float


class BarrierTree:
    """Immutable min/max tree over smooth barrier leaves.

    Leaves are numbered 0..N-1 in depth-first, left-to-right order. Ties at
    min/max nodes go to the lowest leaf index.
    """

    def __init__(self, root, state_dim: int | None = None):
        self.root = _as_node(root)
        leaves: list[SmoothBarrier] = []
        self._plan = self._compile(self.root, leaves)
        self.leaves: tuple[SmoothBarrier, ...] = tuple(leaves)
        dims = [leaf.dim for leaf in leaves if not isinstance(leaf, PairwiseSeparation)]
        lower = max(leaf.dim for leaf in leaves)
        if state_dim is None:
            state_dim = dims[0] if dims else lower
        if any(d != state_dim for d in dims) or state_dim < lower:
            raise DimensionError(f"leaf dimensions incompatible with state_dim={state_dim}")
        self.state_dim = int(state_dim)
        self._groups = self._vector_groups()

    @staticmethod
    def _compile(node, leaves):
        if isinstance(node, Leaf):
            leaves.append(node.barrier)
            return len(leaves) - 1
        op = min if isinstance(node, Min) else max
        return (op, tuple(BarrierTree._compile(c, leaves) for c in node.children))

    def _vector_groups(self):
        disks = [i for i, lf in enumerate(self.leaves) if isinstance(lf, KeepOutDisk)]
        groups = []
        if disks:
            groups.append(("disk", np.array(disks),
                           np.array([self.leaves[i].center for i in disks]),
                           np.array([self.leaves[i].radius for i in disks]),
                           np.array([self.leaves[i].sign for i in disks])))
        by_dim: dict[int, list[int]] = {}
        for i, lf in enumerate(self.leaves):
            if isinstance(lf, PairwiseSeparation):
                by_dim.setdefault(lf.per_agent_dim, []).append(i)
        for k, idx in by_dim.items():
            lv = [self.leaves[i] for i in idx]
            groups.append(("pair", np.array(idx), k,
                           np.array([lf.agent_i for lf in lv]), np.array([lf.agent_j for lf in lv]),
                           np.array([lf.min_distance for lf in lv])))
        return groups

    def __len__(self):
        return len(self.leaves)

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.state_dim,):
            raise DimensionError(f"state has shape {x.shape}, expected ({self.state_dim},)")
        return x

    def leaf_values(self, x) -> np.ndarray:
        """Values of every leaf at ``x``, indexed by leaf index."""
        x = self._check(x)
        out = np.empty(len(self.leaves))
        for grp in self._groups:
            if grp[0] == "disk":
                _, idx, centers, radii, signs = grp
                d = x - centers
                out[idx] = signs * (np.sqrt(_sqnorm(d)) - radii)
            else:
                _, idx, k, ai, aj, dmin = grp
                p = x.reshape(-1, k)
                d = p[ai] - p[aj]
                out[idx] = np.sqrt(_sqnorm(d)) - dmin
        return out

    def _reduce(self, plan, values):
        if isinstance(plan, int):
            return values[plan], plan
        op, children = plan
        results = [self._reduce(c, values) for c in children]
        if op is min:
            return min(results)
        # max value, lowest index on ties
        return min(results, key=lambda r: (-r[0], r[1]))

    def select(self, values) -> tuple[float, int]:
        """``(h, active leaf)`` from precomputed leaf values."""
        h, idx = self._reduce(self._plan, list(values))
        return float(h), int(idx)

    def value(self, x) -> float:
        return self.select(self.leaf_values(x))[0]

    def active_leaf(self, x) -> int:
        return self.select(self.leaf_values(x))[1]

    def almost_active(self, x, epsilon: float) -> AlmostActiveSet:
        if not epsilon >= 0:
            raise ValueError(f"epsilon must be non-negative, got {epsilon!r}")
        h, active, near = self.probe(x, epsilon)
        return AlmostActiveSet(active, near, float(epsilon))

    def probe(self, x, epsilon: float = 0.0):
        """``(h, active leaf, almost-active leaves)`` with a single leaf evaluation."""
        values = self.leaf_values(x)
        h, active = self.select(values)
        near = set(np.flatnonzero(np.abs(values - h) <= epsilon).tolist())
        near.add(active)
        return h, active, tuple(sorted(near))


    # --- batched evaluation over trials (rows of X) ---------------------------

    def leaf_values_batch(self, X) -> np.ndarray:
        """Leaf values for a batch of states, shape ``(N, L)``."""
        X = np.asarray(X, dtype=float)
        out = np.empty((X.shape[0], len(self.leaves)))
        for grp in self._groups:
            if grp[0] == "disk":
                _, idx, centers, radii, signs = grp
                d = X[:, None, :] - centers
                out[:, idx] = signs * (np.sqrt(_sqnorm(d)) - radii)
            else:
                _, idx, k, ai, aj, dmin = grp
                p = X.reshape(X.shape[0], -1, k)
                d = p[:, ai] - p[:, aj]
                out[:, idx] = np.sqrt(_sqnorm(d)) - dmin
        return out

    def _reduce_batch(self, plan, values):
        if isinstance(plan, int):
            return values[:, plan], np.full(values.shape[0], plan)
        op, children = plan
        parts = [self._reduce_batch(c, values) for c in children]
        if len(parts) == 1:
            return parts[0]
        vals = np.column_stack([p[0] for p in parts])
        idx = np.column_stack([p[1] for p in parts])
        # first occurrence wins; children hold increasing leaf-index ranges
        pick = np.argmin(vals, axis=1) if op is min else np.argmax(vals, axis=1)
        rows = np.arange(values.shape[0])
        return vals[rows, pick], idx[rows, pick]

    def select_batch(self, values) -> tuple[np.ndarray, np.ndarray]:
        return self._reduce_batch(self._plan, np.asarray(values, dtype=float))

    def probe_batch(self, X, epsilon: float = 0.0):
        """Batched ``probe``: ``(values, h, active, near_mask)``."""
        values = self.leaf_values_batch(X)
        h, active = self.select_batch(values)
        near = np.abs(values - h[:, None]) <= epsilon
        near[np.arange(values.shape[0]), active] = True
        return values, h, active, near

    def leaf_terms_batch(self, X, S):
        """Per-leaf data needed for the Itô barrier rows of a batch of states.

        ``S`` is ``sigma sigma^T``, either ``(n, n)`` or ``(N, n, n)``. Returns
        ``(values, grads, trace_HS, dist)`` where ``trace_HS = tr(hess_h S)``
        and ``dist`` is the distance each leaf differentiates through.
        """
        X = np.asarray(X, dtype=float)
        N, L, n = X.shape[0], len(self.leaves), self.state_dim
        values = np.empty((N, L))
        grads = np.zeros((N, L, n))
        trace_hs = np.empty((N, L))
        dist = np.empty((N, L))
        S = np.asarray(S, dtype=float)
        shared = S.ndim == 2
        for grp in self._groups:
            if grp[0] == "disk":
                _, idx, centers, radii, signs = grp
                d = X[:, None, :] - centers
                r = np.sqrt(_sqnorm(d))
                with np.errstate(divide="ignore", invalid="ignore"):
                    dh = d / r[..., None]
                if shared:
                    tr_s = np.trace(S)
                    dsd = np.einsum("nli,ij,nlj->nl", dh, S, dh)
                else:
                    tr_s = np.trace(S, axis1=1, axis2=2)[:, None]
                    dsd = np.einsum("nli,nij,nlj->nl", dh, S, dh)
                values[:, idx] = signs * (r - radii)
                grads[:, idx] = signs[:, None] * dh
                with np.errstate(divide="ignore", invalid="ignore"):
                    trace_hs[:, idx] = signs * (tr_s - dsd) / r
                dist[:, idx] = r
            else:
                _, idx, k, ai, aj, dmin = grp
                p = X.reshape(N, -1, k)
                d = p[:, ai] - p[:, aj]
                r = np.sqrt(_sqnorm(d))
                with np.errstate(divide="ignore", invalid="ignore"):
                    dh = d / r[..., None]
                cols_i = ai[:, None] * k + np.arange(k)
                cols_j = aj[:, None] * k + np.arange(k)
                slot = idx[:, None]
                grads[:, slot, cols_i] = dh
                grads[:, slot, cols_j] = -dh
                # tr(H_h S) = tr(H_d M) with M = S_ii + S_jj - S_ij - S_ji
                if shared:
                    M = (S[cols_i[:, :, None], cols_i[:, None, :]] + S[cols_j[:, :, None], cols_j[:, None, :]]
                         - S[cols_i[:, :, None], cols_j[:, None, :]] - S[cols_j[:, :, None], cols_i[:, None, :]])
                    tr_m = np.trace(M, axis1=1, axis2=2)
                    dmd = np.einsum("nli,lij,nlj->nl", dh, M, dh)
                else:
                    M = (S[:, cols_i[:, :, None], cols_i[:, None, :]] + S[:, cols_j[:, :, None], cols_j[:, None, :]]
                         - S[:, cols_i[:, :, None], cols_j[:, None, :]] - S[:, cols_j[:, :, None], cols_i[:, None, :]])
                    tr_m = np.trace(M, axis1=2, axis2=3)
                    dmd = np.einsum("nli,nlij,nlj->nl", dh, M, dh)
                values[:, idx] = r - dmin
                with np.errstate(divide="ignore", invalid="ignore"):
                    trace_hs[:, idx] = (tr_m - dmd) / r
                dist[:, idx] = r
        return values, grads, trace_hs, dist


def evaluate(tree: BarrierTree, x) -> float:
    """Composite barrier value ``h(x)``; ``>= 0`` iff the Boolean formula holds."""
    return tree.value(x)


def active_leaf(tree: BarrierTree, x) -> int:
    return tree.active_leaf(x)


def almost_active(tree: BarrierTree, x, epsilon: float) -> AlmostActiveSet:
    return tree.almost_active(x, epsilon)


def min_tree(barriers: Sequence[SmoothBarrier], state_dim: int | None = None) -> BarrierTree:
    return BarrierTree(Min(*[Leaf(b) for b in barriers]), state_dim=state_dim)
