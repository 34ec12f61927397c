"""Two-stage projection of a latent vector onto the feasible hybrid-action set.

The latent ``z`` is split into a logit block (one entry per job/robot pair)
and a knot block.  Logits pick the assignment (argmax or maximum-weight
matching restricted to admissible pairs); knots are mapped to the nearest
point of the stage polytope by an exact active-set QP.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .constraints import (
    Assignment,
    ConstraintSystem,
    HybridAction,
    ProblemScale,
    Region,
    State,
    feasible_discrete,
    is_decision_point,
)

PAD_SENTINEL = 1e9
KKT_TOL = 1e-6
SINGLE = "single"
BATCH = "batch"


class ProjectionError(RuntimeError):
    pass


class QpError(ProjectionError):
    """QP did not converge; ``residual`` carries the best KKT residual seen."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (best KKT residual {residual:.3e})")
        self.residual = residual


@dataclass
class QpSolution:
    x: np.ndarray
    duals: np.ndarray
    kkt_residual: float
    iterations: int


def latent_size(scale: ProblemScale, knot_dim: int = 3) -> int:
    return scale.jobs * scale.robots + knot_dim


def decode(z, scale: ProblemScale, knot_dim: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Split ``z`` into a (jobs, robots) logit matrix and a knot vector."""
    z = np.asarray(z, dtype=float).ravel()
    n_logits = scale.jobs * scale.robots
    if z.size != n_logits + knot_dim:
        raise ValueError(f"latent length {z.size} != J*K + P = {n_logits + knot_dim}")
    return z[:n_logits].reshape(scale.jobs, scale.robots), z[n_logits:].copy()


# ---------------------------------------------------------------- assignment

def hungarian(cost) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost assignment of a rectangular matrix.

    The matrix is padded to square with ``PAD_SENTINEL`` and solved with the
    shortest-augmenting-path form of the Kuhn-Munkres algorithm (row
    potentials ``u``, column potentials ``v``).  Returns the ``min(rows,
    cols)`` real cells and their total cost.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.size == 0:
        raise ValueError("hungarian needs a non-empty 2-D matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian needs a finite matrix")
    n_rows, n_cols = cost.shape
    n = max(n_rows, n_cols)
    square = np.full((n, n), PAD_SENTINEL)
    square[:n_rows, :n_cols] = cost

    # 1-based arrays; column 0 is the virtual start column
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=int)  # owner[j] = row matched to column j
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = square[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while True:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
            if j0 == 0:
                break

    pairs = []
    for j in range(1, n + 1):
        i = owner[j] - 1
        if i < n_rows and j - 1 < n_cols:
            pairs.append((int(i), j - 1))
    pairs.sort()
    total = float(sum(cost[i, j] for i, j in pairs))
    return pairs, total


def project_discrete(u, feasible: Iterable[Assignment], mode: str = SINGLE) -> list[Assignment]:
    """Admissible assignment maximising the summed logits.

    ``single`` returns the best single pair (ties broken by lowest
    (job, robot)); ``batch`` returns a maximum-weight matching of ready jobs
    to idle robots.
    """
    u = np.asarray(u, dtype=float)
    feasible = sorted(feasible, key=lambda a: (a.job, a.robot))
    if not feasible:
        raise ProjectionError("no admissible assignment: caller must check is_decision_point")
    if mode == SINGLE:
        best = feasible[0]
        best_score = u[best.job, best.robot]
        for a in feasible[1:]:
            score = u[a.job, a.robot]
            if score > best_score:
                best, best_score = a, score
        return [best]
    if mode != BATCH:
        raise ValueError(f"unknown projection mode {mode!r}")

    jobs = sorted({a.job for a in feasible})
    robots = sorted({a.robot for a in feasible})
    stage_of = {a.job: a.stage for a in feasible}
    row = {j: r for r, j in enumerate(jobs)}
    col = {k: c for c, k in enumerate(robots)}
    mask = np.zeros((len(jobs), len(robots)), dtype=bool)
    for a in feasible:
        mask[row[a.job], col[a.robot]] = True
    sub = u[np.ix_(jobs, robots)]
    # shift so masked cells are strictly worse than any admissible one
    cost = np.where(mask, -sub, PAD_SENTINEL)
    pairs, _ = hungarian(cost)
    chosen = [Assignment(jobs[r], stage_of[jobs[r]], robots[c]) for r, c in pairs if mask[r, c]]
    return sorted(chosen, key=lambda a: (a.job, a.robot))


# ---------------------------------------------------------------- continuous

def kkt_residual(x, v, G, h, lam) -> float:
    """Max-norm residual of the projection KKT system (all four conditions)."""
    slack = G @ x - h
    stationarity = np.max(np.abs(x - v + G.T @ lam)) if lam.size else np.max(np.abs(x - v), initial=0.0)
    primal = max(0.0, float(np.max(slack, initial=-np.inf)))
    dual = max(0.0, float(np.max(-lam, initial=-np.inf)))
    comp = float(np.max(np.abs(lam * slack), initial=0.0))
    return float(max(stationarity, primal, dual, comp))


def _active_set_projection(v, G, h, x0, max_iter):
    """Primal active-set method for ``min ||x - v||^2 s.t. G x <= h``.

    Starts from a feasible ``x0``; each iteration solves the equality-
    constrained projection on the working set via its normal equations.
    """
    x = x0.astype(float).copy()
    m = G.shape[0]
    working: list[int] = []
    lam = np.zeros(m)
    for it in range(1, max_iter + 1):
        if working:
            Gw = G[working]
            rhs = Gw @ v - h[working]
            mult = np.linalg.solve(Gw @ Gw.T, rhs)
            target = v - Gw.T @ mult
        else:
            mult = np.zeros(0)
            target = v.copy()
        step = target - x
        if np.max(np.abs(step)) <= 1e-14 * max(1.0, np.max(np.abs(x))):
            lam[:] = 0.0
            lam[working] = mult
            if not working or np.min(mult) >= -1e-12:
                lam = np.maximum(lam, 0.0)
                return target, lam, it
            working.pop(int(np.argmin(mult)))
            continue
        Gs = G @ step
        slack = h - G @ x
        alpha, block = 1.0, -1
        for i in range(m):
            if i in working or Gs[i] <= 1e-15:
                continue
            ratio = max(slack[i], 0.0) / Gs[i]
            if ratio < alpha:
                alpha, block = ratio, i
        x = x + alpha * step
        if block >= 0:
            working.append(block)
    raise QpError("active-set projection exceeded the iteration limit", kkt_residual(x, v, G, h, lam))


def _admm_projection(v, G, h, max_iter, rho=1.0, tol=1e-10):
    """Operator-splitting fallback: ``x = v - G^T lam`` with slack ``s <= h``."""
    m, n = G.shape
    K = np.eye(n) + rho * G.T @ G
    chol = np.linalg.cholesky(K)
    s = np.minimum(G @ v, h)
    y = np.zeros(m)
    x = v.copy()
    for it in range(1, max_iter + 1):
        rhs = v + G.T @ (rho * s - y)
        x = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        Gx = G @ x
        s_new = np.minimum(Gx + y / rho, h)
        y = y + rho * (Gx - s_new)
        r_prim = np.max(np.abs(Gx - s_new))
        r_dual = rho * np.max(np.abs(G.T @ (s_new - s)))
        s = s_new
        if r_prim < tol and r_dual < tol:
            break
    return x, np.maximum(y, 0.0), it


def _polish(v, G, h, x_approx, active_tol=1e-7):
    """Re-solve the equality system on the active set suggested by ``x_approx``."""
    active = np.flatnonzero(G @ x_approx - h > -active_tol)
    lam = np.zeros(G.shape[0])
    if active.size == 0:
        return v.copy(), lam
    Gw = G[active]
    mult, *_ = np.linalg.lstsq(Gw @ Gw.T, Gw @ v - h[active], rcond=None)
    lam[active] = np.maximum(mult, 0.0)
    return v - Gw.T @ mult, lam


def project_continuous(v, region: Region, *, start: Optional[np.ndarray] = None,
                       max_iter: int = 10_000, admm_rows: int = 64) -> QpSolution:
    """Euclidean projection of ``v`` onto ``region`` with a KKT certificate."""
    v = np.asarray(v, dtype=float).ravel()
    if v.shape != (region.dim,):
        raise ValueError(f"knot vector has length {v.size}, region expects {region.dim}")
    if not np.all(np.isfinite(v)):
        raise ValueError("knot vector must be finite")
    G, h = region.G, region.h
    if np.all(G @ v <= h):
        return QpSolution(v.copy(), np.zeros(G.shape[0]), 0.0, 0)
    # the clamp is the projection onto the box; if it also meets the coupling
    # rows it is the answer, with box multipliers read off the overshoot
    clamped = np.minimum(np.maximum(v, region.lower), region.upper)
    if not region.A.size or np.all(region.A @ clamped <= region.b):
        lam = np.concatenate([np.maximum(v - region.upper, 0.0), np.maximum(region.lower - v, 0.0),
                              np.zeros(region.A.shape[0])])
        res = kkt_residual(clamped, v, G, h, lam)
        if res <= KKT_TOL:
            return QpSolution(clamped, lam, res, 0)

    if G.shape[0] <= admm_rows:
        if start is None:
            start = region.interior_point()[0]
        x, lam, iters = _active_set_projection(v, G, h, start, max_iter)
    else:
        x, lam, iters = _admm_projection(v, G, h, max_iter)
        x, lam = _polish(v, G, h, x)
    # clip round-off on active box faces so the point is exactly feasible there
    x = np.minimum(np.maximum(x, region.lower), region.upper)
    res = kkt_residual(x, v, G, h, lam)
    if res > KKT_TOL:
        raise QpError("projection failed the KKT check", res)
    return QpSolution(x, lam, res, iters)


# ---------------------------------------------------------------- composite

@dataclass
class Projection:
    """Feasible action plus solver statistics for logging."""

    action: HybridAction
    qp_iterations: int
    kkt_residual: float


def project(system: ConstraintSystem, state: State, z, scale: ProblemScale,
            mode: str = SINGLE) -> Projection:
    """Map latent ``z`` to a hybrid action satisfying every constraint in ``state``."""
    if not is_decision_point(state):
        raise ProjectionError("state is not a decision point")
    u, v = decode(z, scale, system.knot_dim)
    chosen = project_discrete(u, feasible_discrete(state), mode)
    knots, iters, worst = [], 0, 0.0
    cache: dict[int, QpSolution] = {}
    for a in chosen:
        if a.stage not in cache:
            cache[a.stage] = project_continuous(v, system.continuous_region(a.stage),
                                                start=system.interior[a.stage])
        sol = cache[a.stage]
        knots.append(sol.x.copy())
        iters += sol.iterations
        worst = max(worst, sol.kkt_residual)
    return Projection(HybridAction(tuple(chosen), tuple(knots)), iters, worst)


def estimate_lipschitz(system: ConstraintSystem, state: State, scale: ProblemScale,
                       n_pairs: int, seed=None, step: float = 1.0) -> float:
    """Largest observed ratio ``|Pi(z1)_c - Pi(z2)_c| / |z1 - z2|``.

    Only pairs whose discrete outcome coincides are counted; the second
    latent is a random perturbation of the first with norm up to ``step``.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    L = latent_size(scale, system.knot_dim)
    lo, hi = system.bounding_box()
    best = 0.0
    for _ in range(n_pairs):
        z1 = rng.normal(size=L)
        z1[-system.knot_dim:] = rng.uniform(lo - 1.0, hi + 1.0)
        delta = rng.normal(size=L)
        delta *= rng.uniform(1e-3, step) / np.linalg.norm(delta)
        z2 = z1 + delta
        p1 = project(system, state, z1, scale).action
        p2 = project(system, state, z2, scale).action
        if p1.discrete != p2.discrete:
            continue
        num = np.linalg.norm(np.concatenate(p1.continuous) - np.concatenate(p2.continuous))
        best = max(best, num / np.linalg.norm(delta))
    return float(best)
