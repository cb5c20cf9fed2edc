"""Exact dense solver for min-norm projection QPs.

Solves

    minimize    ||u - u_ref||^2
    subject to  a_i^T u <= b_i          (rows)
                lower <= u <= upper     (optional box)

with a dual active-set method: start from the unconstrained minimizer ``u_ref``
and repeatedly add the most violated row, dropping working-set rows whose
multipliers would turn negative. Every working set is solved in closed form as
an equality-constrained projection. Infeasibility is detected with a Farkas
certificate ``y >= 0, A^T y = 0, b^T y < 0``.

Multipliers follow the convention of the objective as written (no 1/2):
stationarity reads ``2 (u - u_ref) + sum_i lambda_i a_i = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_ROWS = 32

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"


@dataclass
class QPProblem:
    u_ref: np.ndarray
    rows: list = field(default_factory=list)
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        self.u_ref = np.array(self.u_ref, dtype=float).ravel()
        m = self.u_ref.shape[0]
        if m < 1:
            raise ValueError("u_ref must have at least one entry")
        rows = []
        for a, b in self.rows:
            a = np.array(a, dtype=float).ravel()
            if a.shape != (m,):
                raise ValueError(f"row has {a.shape[0]} entries, expected {m}")
            rows.append((a, float(b)))
        self.rows = rows
        if self.lower is not None:
            self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (m,)).copy()
        if self.upper is not None:
            self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (m,)).copy()

    @property
    def dim(self) -> int:
        return self.u_ref.shape[0]

    def constraints(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(A, b)``: the rows first, then finite upper bounds, then finite lower bounds."""
        m = self.dim
        a_rows = [a for a, _ in self.rows]
        b_vals = [b for _, b in self.rows]
        eye = np.eye(m)
        if self.upper is not None:
            for i in np.flatnonzero(np.isfinite(self.upper)):
                a_rows.append(eye[i])
                b_vals.append(self.upper[i])
        if self.lower is not None:
            for i in np.flatnonzero(np.isfinite(self.lower)):
                a_rows.append(-eye[i])
                b_vals.append(-self.lower[i])
        if not a_rows:
            return np.zeros((0, m)), np.zeros(0)
        return np.array(a_rows), np.array(b_vals)


@dataclass
class QPSolution:
    u_star: np.ndarray
    active_rows: tuple[int, ...]
    multipliers: np.ndarray
    status: str
    certificate: np.ndarray | None = None
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def _infeasible(m, n_rows, y, iterations=0) -> QPSolution:
    return QPSolution(np.full(m, np.nan), (), np.zeros(0), INFEASIBLE, y, iterations)


def solve_qp(p: QPProblem, tol: float = 1e-12) -> QPSolution:
    if len(p.rows) > MAX_ROWS:
        raise ValueError(f"{len(p.rows)} rows exceeds the dense solver limit of {MAX_ROWS}")
    A, b = p.constraints()
    u_ref = p.u_ref
    m = u_ref.shape[0]
    n_rows = A.shape[0]
    if n_rows == 0:
        return QPSolution(u_ref.copy(), (), np.zeros(0), OPTIMAL)

    row_norm2 = np.einsum("ij,ij->i", A, A)
    zero = row_norm2 == 0.0
    if np.any(zero & (b < 0)):
        y = np.zeros(n_rows)
        y[np.flatnonzero(zero & (b < 0))[0]] = 1.0
        return _infeasible(m, n_rows, y)
    usable = ~zero

    def slack_tol(u):
        return tol * (1.0 + np.abs(b) + np.sqrt(row_norm2) * np.linalg.norm(u))

    u = u_ref.copy()
    viol = A @ u - b
    if np.all(viol[usable] <= slack_tol(u)[usable]):
        return QPSolution(u, (), np.zeros(0), OPTIMAL)

    work: list[int] = []
    lam: dict[int, float] = {}  # multipliers of 1/2 ||u - u_ref||^2
    max_iter = 50 * (n_rows + m) + 100
    it = 0
    while True:
        viol = A @ u - b
        viol[~usable] = -np.inf
        if work:
            viol[work] = -np.inf
        excess = viol - slack_tol(u)
        p_idx = int(np.argmax(excess))
        if excess[p_idx] <= 0:
            break
        a_p = A[p_idx]
        lam_p = 0.0
        while True:
            it += 1
            if it > max_iter:
                raise RuntimeError("active-set iteration limit reached")
            if work:
                Aw = A[work]
                r = np.linalg.solve(Aw @ Aw.T, Aw @ a_p)
                z = Aw.T @ r - a_p
            else:
                r = np.zeros(0)
                z = -a_p
            zz = float(z @ z)

            # largest dual step keeping working multipliers non-negative
            t_dual, block = np.inf, -1
            for j, idx in enumerate(work):
                if r[j] > 0:
                    ratio = lam[idx] / r[j]
                    if ratio < t_dual:
                        t_dual, block = ratio, j

            if zz <= 1e-20 * row_norm2[p_idx]:
                if block < 0:
                    # a_p = A_w^T r with r <= 0: Farkas certificate
                    y = np.zeros(n_rows)
                    y[p_idx] = 1.0
                    for j, idx in enumerate(work):
                        y[idx] = -r[j]
                    return _infeasible(m, n_rows, y, it)
                t, full = t_dual, False
            else:
                t_primal = float(a_p @ u - b[p_idx]) / zz
                full = t_primal <= t_dual
                t = t_primal if full else t_dual

            u = u + t * z
            for j, idx in enumerate(work):
                lam[idx] -= t * r[j]
            lam_p += t
            if full:
                work.append(p_idx)
                lam[p_idx] = lam_p
                break
            dropped = work.pop(block)
            del lam[dropped]

    mult = np.array([2.0 * max(lam[i], 0.0) for i in work])
    return QPSolution(u, tuple(work), mult, OPTIMAL, None, it)


def verify_kkt(p: QPProblem, s: QPSolution, tol: float = 1e-8) -> bool:
    """Check stationarity, primal and dual feasibility and complementary slackness."""
    if s.status != OPTIMAL:
        return False
    A, b = p.constraints()
    u = np.asarray(s.u_star, dtype=float)
    lam = np.asarray(s.multipliers, dtype=float)
    if len(lam) != len(s.active_rows) or not np.all(np.isfinite(u)):
        return False
    grad = 2.0 * (u - p.u_ref)
    if s.active_rows:
        grad = grad + A[list(s.active_rows)].T @ lam
    if np.linalg.norm(grad) > tol:
        return False
    if A.shape[0] and np.any(A @ u - b > tol):
        return False
    if np.any(lam < -tol):
        return False
    if s.active_rows:
        resid = A[list(s.active_rows)] @ u - b[list(s.active_rows)]
        if np.any(np.abs(lam * resid) > tol):
            return False
    return True


def solve_qp_batch(A, b, u_ref, usable=None, tol: float = 1e-12):
    """Solve ``N`` independent projection QPs of the same shape in lockstep.

    ``A`` is ``(N, K, m)``, ``b`` is ``(N, K)`` and ``u_ref`` is ``(N, m)``.
    Rows with ``usable`` False are ignored. Each problem follows the same
    sequence of working-set steps as :func:`solve_qp`, so the result for one
    problem does not depend on the others in the batch.

    Returns ``(u, multipliers, working, infeasible)`` with multipliers in the
    same convention as :class:`QPSolution`.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    u = np.array(u_ref, dtype=float)
    N, K, m = A.shape
    if usable is None:
        usable = np.ones((N, K), dtype=bool)
    usable = usable.copy()
    row_norm2 = np.sum(A * A, axis=-1)
    zero = usable & (row_norm2 == 0.0)
    infeasible = np.any(zero & (b < 0), axis=1)
    usable &= ~zero

    lam = np.zeros((N, K))
    work = np.zeros((N, K), dtype=bool)
    if K == 0:
        return u, lam, work, infeasible
    a_norm = np.sqrt(row_norm2)
    abs_b = np.abs(b)
    # per-problem state: current row being added (-1: pick a new one) and its multiplier
    p_row = np.full(N, -1)
    lam_p = np.zeros(N)
    done = infeasible.copy()
    eye = np.eye(K)
    rng_n = np.arange(N)
    max_iter = 50 * (K + m) + 100
    for _ in range(max_iter):
        pick = ~done & (p_row < 0)
        if np.any(pick):
            ip = np.flatnonzero(pick)
            up = u[ip]
            viol = np.sum(A[ip] * up[:, None, :], axis=-1) - b[ip]
            excess = viol - tol * (1.0 + abs_b[ip] + a_norm[ip] * np.sqrt(np.sum(up * up, axis=-1))[:, None])
            excess[~usable[ip] | work[ip]] = -np.inf
            best = np.argmax(excess, axis=1)
            violated = excess[np.arange(ip.size), best] > 0
            done[ip[~violated]] = True
            p_row[ip[violated]] = best[violated]
            lam_p[ip[violated]] = 0.0
        step = ~done & (p_row >= 0)
        if not np.any(step):
            break
        i = np.flatnonzero(step)
        Ai, wi, p = A[i], work[i], p_row[i]
        a_p = Ai[np.arange(i.size), p]
        gram = np.einsum("nkm,njm->nkj", Ai, Ai)
        both = wi[:, :, None] & wi[:, None, :]
        system = np.where(both, gram, eye)
        rhs = np.where(wi, np.sum(Ai * a_p[:, None, :], axis=-1), 0.0)
        r = np.linalg.solve(system, rhs[..., None])[..., 0]
        r = np.where(wi, r, 0.0)
        z = np.sum(Ai * r[..., None], axis=1) - a_p
        zz = np.sum(z * z, axis=-1)

        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(wi & (r > 0), lam[i] / r, np.inf)
        block = np.argmin(ratio, axis=1)
        t_dual = ratio[np.arange(i.size), block]
        dependent = zz <= 1e-20 * row_norm2[i, p]
        dead = dependent & ~np.isfinite(t_dual)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_primal = (np.sum(a_p * u[i], axis=-1) - b[i, p]) / zz
        full = ~dependent & (t_primal <= t_dual)
        t = np.where(full, t_primal, t_dual)
        t = np.where(dead, 0.0, t)

        live = ~dead
        il = i[live]
        u[il] = u[il] + t[live, None] * z[live]
        lam[il] = lam[il] - t[live, None] * r[live]
        lam_p[il] = lam_p[il] + t[live]

        infeasible[i[dead]] = True
        done[i[dead]] = True
        p_row[i[dead]] = -1

        fi = i[full]
        work[fi, p[full]] = True
        lam[fi, p[full]] = lam_p[fi]
        p_row[fi] = -1

        part = live & ~full
        pi = i[part]
        work[pi, block[part]] = False
        lam[pi, block[part]] = 0.0
    else:
        raise RuntimeError("batched active-set iteration limit reached")

    lam = np.where(work, 2.0 * np.maximum(lam, 0.0), 0.0)
    u[infeasible] = np.nan
    return u, lam, work, infeasible
