"""Deterministic solver for convex quadratic programs with nonnegativity and
group-sum equality constraints.

The iteration alternates a proximal quadratic (gradient) step with projection
onto the scaled simplex of each equality block, plus an exact line search along
the projected direction and a periodic active-set polish that solves the KKT
system on the currently-free coordinates. Everything is deterministic: fixed
iteration order, no randomized pivoting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STATUS_OPTIMAL = "optimal"
STATUS_MAX_ITER = "max_iter"
STATUS_INFEASIBLE = "infeasible"

_FREE_EPS = 1e-12
_POLISH_EVERY = 25


@dataclass(frozen=True)
class QuadraticProgram:
    """min 0.5 w'Qw + c'w  subject to  sum(w[idx]) = target per block and w >= 0."""

    Q: np.ndarray
    c: np.ndarray
    equalities: tuple[tuple[tuple[int, ...], float], ...] = ()

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        c = np.asarray(self.c, dtype=float).ravel()
        if Q.shape != (c.size, c.size):
            raise ValueError("Q must be square and match c")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "c", c)
        seen: set[int] = set()
        cleaned = []
        for idx, target in self.equalities:
            idx = tuple(int(i) for i in idx)
            if len(idx) == 0:
                raise ValueError("equality blocks must be nonempty")
            if any(i < 0 or i >= c.size for i in idx):
                raise ValueError("equality index out of range")
            if seen & set(idx):
                raise ValueError("equality blocks must be disjoint")
            seen.update(idx)
            cleaned.append((idx, float(target)))
        object.__setattr__(self, "equalities", tuple(cleaned))

    @property
    def n(self) -> int:
        return self.c.size


@dataclass
class QPSolution:
    w: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    status: str
    diagonal_shift: float = 0.0
    diagnostics: dict = field(default_factory=dict)


def project_simplex(v: np.ndarray, total: float) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum(w) = total}."""
    v = np.asarray(v, dtype=float)
    if total < 0:
        raise ValueError("cannot project onto a simplex with negative total")
    if total == 0.0:
        return np.zeros_like(v)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    ks = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def _project_feasible(v: np.ndarray, qp: QuadraticProgram) -> np.ndarray:
    w = np.maximum(v, 0.0)
    for idx, target in qp.equalities:
        w[list(idx)] = project_simplex(v[list(idx)], target)
    return w


def _feasible_start(qp: QuadraticProgram) -> np.ndarray:
    w = np.zeros(qp.n)
    for idx, target in qp.equalities:
        w[list(idx)] = target / len(idx)
    return w


def _spectral_bound(Q: np.ndarray) -> float:
    # Power iteration from a fixed start; generous head-room since it
    # approaches the spectral norm from below.
    v = np.ones(Q.shape[0]) / np.sqrt(Q.shape[0])
    norm = 0.0
    for _ in range(60):
        v = Q @ v
        norm = float(np.linalg.norm(v))
        if norm <= 1e-300:
            return 0.0
        v /= norm
    return 1.25 * norm


def _reduced_min_eigenvalue(Q: np.ndarray, qp: QuadraticProgram) -> float:
    """Smallest eigenvalue of Q restricted to the equality-constraint null space."""
    n = qp.n
    P = np.eye(n)
    for idx, _ in qp.equalities:
        e = np.zeros(n)
        e[list(idx)] = 1.0 / np.sqrt(len(idx))
        P -= np.outer(e, e)
    M = P @ Q @ P
    M = 0.5 * (M + M.T)
    return float(np.linalg.eigvalsh(M)[0])


def _kkt_solve(free, Qs, c, qp):
    """Equality-constrained solve on the free coordinates; returns the candidate
    full vector and the per-block multipliers (None on numerical failure)."""
    rows = []
    targets = []
    block_of = np.full(qp.n, -1)
    for k, (idx, target) in enumerate(qp.equalities):
        block_of[list(idx)] = k
        inside = np.isin(free, np.asarray(idx))
        if not inside.any():
            if target > _FREE_EPS:
                return None, None, block_of
            continue
        rows.append((k, inside.astype(float)))
        targets.append(target)
    m = len(rows)
    kkt = np.zeros((free.size + m, free.size + m))
    kkt[: free.size, : free.size] = Qs[np.ix_(free, free)]
    rhs = np.concatenate([-c[free], np.asarray(targets, dtype=float)])
    if m:
        E = np.vstack([r for _, r in rows])
        kkt[: free.size, free.size :] = E.T
        kkt[free.size :, : free.size] = E
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    if not np.all(np.isfinite(sol)):
        return None, None, block_of
    cand = np.zeros(qp.n)
    cand[free] = sol[: free.size]
    lams = np.zeros(len(qp.equalities))
    for j, (k, _) in enumerate(rows):
        lams[k] = -sol[free.size + j]
    return cand, lams, block_of


def _polish(w, Qs, c, qp, objective, rounds: int = 3, tol: float = 1e-10):
    """Active-set refinement: repeatedly solve the KKT system on the free set,
    dropping negative coordinates and releasing dual-infeasible ones. Only
    feasible candidates that do not increase the objective are accepted."""
    best = w
    best_obj = objective(w)
    free = np.nonzero(w > _FREE_EPS)[0]
    for _ in range(rounds):
        if free.size == 0:
            break
        cand, lams, block_of = _kkt_solve(free, Qs, c, qp)
        if cand is None:
            break
        negative = cand.min() < -1e-11
        feasible = _project_feasible(cand, qp)
        feas_obj = objective(feasible)
        improved = feas_obj <= best_obj + 1e-12 * (1.0 + abs(best_obj))
        if feas_obj <= best_obj:
            best, best_obj = feasible, feas_obj
        if negative:
            # shrink the working set and retry
            worst = int(free[np.argmin(cand[free])])
            free = free[free != worst]
            continue
        # dual feasibility on the active bound
        g = Qs @ feasible + c
        reduced = g.copy()
        covered = block_of >= 0
        reduced[covered] -= lams[block_of[covered]]
        zeroed = np.nonzero(feasible <= _FREE_EPS)[0]
        viol = zeroed[reduced[zeroed] < -tol]
        if viol.size == 0:
            if improved:
                return feasible  # KKT-certified on this working set
            break
        release = int(viol[np.argmin(reduced[viol])])
        free = np.unique(np.append(np.nonzero(feasible > _FREE_EPS)[0], release))
    return best


def solve_qp(
    qp: QuadraticProgram,
    tol: float = 1e-8,
    max_iter: int = 50000,
    trace: list | None = None,
) -> QPSolution:
    """Solve the QP; status 'optimal' certifies a fixed-point (KKT) residual <= tol.

    If the objective turns out to be indefinite along the feasible directions
    (possible from floating-point round-off in distance-based objectives), the
    smallest diagonal shift restoring positive semidefiniteness on that subspace
    is applied and the solve restarts once; the shift is recorded.
    """
    for _, target in qp.equalities:
        if target < 0:
            return QPSolution(
                np.zeros(qp.n), float("nan"), float("inf"), 0, STATUS_INFEASIBLE
            )

    Q = 0.5 * (qp.Q + qp.Q.T)
    shift = 0.0
    repaired = False
    iterations = 0

    while True:
        Qs = Q if shift == 0.0 else Q + shift * np.eye(qp.n)

        def objective(w, _Qs=Qs):
            return float(0.5 * w @ (_Qs @ w) + qp.c @ w)

        def natural_residual(w, g):
            # Unit-step fixed-point residual; zero exactly at KKT points.
            return float(np.max(np.abs(w - _project_feasible(w - g, qp))))

        L = _spectral_bound(Qs)
        eta = 1.0 / max(L, tol)
        w = _feasible_start(qp)
        if trace is not None:
            trace.append(objective(w))
        residual = float("inf")
        indefinite = False

        while iterations < max_iter:
            iterations += 1
            g = Qs @ w + qp.c
            residual = natural_residual(w, g)
            if residual <= tol:
                break
            proposal = _project_feasible(w - eta * g, qp)
            d = proposal - w
            dQd = float(d @ (Qs @ d))
            dnorm2 = float(d @ d)
            if dnorm2 == 0.0:
                break
            if dQd < -1e-12 * max(L, 1.0) * dnorm2:
                indefinite = True
                break
            gd = float(g @ d)
            if gd >= 0.0 or not np.isfinite(gd):
                break  # step is below numerical resolution; certify below
            neg = d < 0
            alpha_max = float(np.min(w[neg] / -d[neg])) if np.any(neg) else np.inf
            if dQd > 0:
                alpha = min(-gd / dQd, alpha_max)  # exact minimizer along d
            else:
                alpha = min(alpha_max, 1e6)
            w = _project_feasible(w + alpha * d, qp)
            if iterations % _POLISH_EVERY == 0:
                w = _polish(w, Qs, qp.c, qp, objective)
            if trace is not None:
                trace.append(objective(w))

        if indefinite and not repaired:
            repaired = True
            lam_min = _reduced_min_eigenvalue(Q, qp)
            new_shift = max(0.0, -lam_min) + 1e-12
            if new_shift > shift:
                shift = new_shift
            if trace is not None:
                trace.clear()
            continue  # restart; a second detection falls through below

        # Final refinement, exact feasibility, and a fresh certificate.
        w = _project_feasible(w, qp)
        w = _polish(w, Qs, qp.c, qp, objective, rounds=30)
        residual = natural_residual(w, Qs @ w + qp.c)
        status = STATUS_OPTIMAL if residual <= tol else STATUS_MAX_ITER
        final_obj = float(0.5 * w @ (Q @ w) + qp.c @ w)
        if trace is not None:
            trace.append(objective(w))
        return QPSolution(w, final_obj, residual, iterations, status, shift)
