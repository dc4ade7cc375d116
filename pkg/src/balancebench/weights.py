"""Balancing weights for treatment-effect estimation.

Four methods: inverse-propensity weighting with optional trimming or Hajek
rescaling, energy-distance balancing (a QP over group simplexes), kernel
optimal matching (ridge-regularized kernel QPs), and tailored-loss-function
propensity scores (penalized scoring-rule maximization in an RKHS).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .kernels import KernelSpec, distance_matrix, gram_matrix, median_heuristic
from .qpsolver import QuadraticProgram, solve_qp
from .scenarios import expit

ESTIMANDS = ("ATE", "ATT")
METHODS = ("iptw", "eb", "kom", "tlf")
POSTPROCS = ("trim99", "cap99", "hajek", "none")

KOM_RIDGE_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0)
TLF_LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 1e-1)
TLF_GAMMA_GRID = (0.1, 0.5, 1.0, 2.0)


@dataclass
class BalanceWeights:
    """Per-observation nonnegative weights tagged with estimand and method.

    Trimmed observations carry weight 0 and kept_mask False; estimators must
    consume kept entries only.
    """

    values: np.ndarray
    estimand: str
    method: str
    kept_mask: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def effective_sample_size(w: np.ndarray) -> float:
    w = np.asarray(w, dtype=float)
    denom = float(np.sum(w**2))
    if denom == 0.0:
        return 0.0
    return float(np.sum(w)) ** 2 / denom


def _validate_groups(T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    T = np.asarray(T, dtype=float)
    if not np.all((T == 0.0) | (T == 1.0)):
        raise ValueError("treatment indicator must be 0/1")
    treated = np.nonzero(T == 1.0)[0]
    control = np.nonzero(T == 0.0)[0]
    if treated.size == 0 or control.size == 0:
        raise ValueError("both treatment groups must be nonempty")
    return treated, control


def _check_estimand(estimand: str) -> None:
    if estimand not in ESTIMANDS:
        raise ValueError(f"unknown estimand {estimand!r}; expected one of {ESTIMANDS}")


def _finish(values, estimand, method, kept, T, extra=None) -> BalanceWeights:
    diagnostics = {
        "max_weight": float(values[kept].max()) if kept.any() else 0.0,
        "ess_treated": effective_sample_size(values[(T == 1.0) & kept]),
        "ess_control": effective_sample_size(values[(T == 0.0) & kept]),
        "solver_status": "closed_form",
    }
    if extra:
        diagnostics.update(extra)
    return BalanceWeights(values, estimand, method, kept, diagnostics)


# ---------------------------------------------------------------------------
# IPTW
# ---------------------------------------------------------------------------

def iptw_weights(
    e_hat: np.ndarray,
    T: np.ndarray,
    estimand: str,
    postproc: str = "trim99",
) -> BalanceWeights:
    """Inverse-probability weights with the requested post-processing.

    trim99 zeroes observations whose raw weight strictly exceeds the empirical
    99th percentile of all raw weights (linear interpolation) and leaves the
    survivors unrescaled; cap99 truncates each group's weights at that group's
    own 99th percentile (nothing removed); hajek rescales each kept group to
    sum to one.
    """
    _check_estimand(estimand)
    if postproc not in POSTPROCS:
        raise ValueError(f"unknown postproc {postproc!r}; expected one of {POSTPROCS}")
    e = np.asarray(e_hat, dtype=float)
    T = np.asarray(T, dtype=float)
    if np.any(e <= 0.0) or np.any(e >= 1.0):
        raise ValueError("propensity scores must lie strictly inside (0, 1)")
    treated, control = _validate_groups(T)
    n = T.size
    if estimand == "ATE":
        w = (T / e + (1.0 - T) / (1.0 - e)) / n
    else:
        w = np.where(T == 1.0, 1.0 / treated.size, e / ((1.0 - e) * treated.size))

    kept = np.ones(n, dtype=bool)
    if postproc == "trim99":
        cutoff = float(np.percentile(w, 99.0))
        kept = w <= cutoff
        w = np.where(kept, w, 0.0)
    elif postproc == "cap99":
        w = np.asarray(w, dtype=float).copy()
        for grp in (treated, control):
            w[grp] = np.minimum(w[grp], np.percentile(w[grp], 99.0))
    elif postproc == "hajek":
        for grp in (treated, control):
            total = w[grp].sum()
            w[grp] = w[grp] / total
    return _finish(w, estimand, "iptw", kept, T, {"postproc": postproc})


# ---------------------------------------------------------------------------
# Energy balancing
# ---------------------------------------------------------------------------

def _rows_all_identical(X: np.ndarray) -> bool:
    return bool(np.all(X == X[0]))


def _uniform_weights(T, estimand, method) -> BalanceWeights:
    treated, control = _validate_groups(T)
    w = np.empty(T.size)
    w[treated] = 1.0 / treated.size
    w[control] = 1.0 / control.size
    kept = np.ones(T.size, dtype=bool)
    return _finish(w, estimand, method, kept, np.asarray(T, float), {"solver_status": "degenerate_uniform"})


def energy_distance_objective(D: np.ndarray, w: np.ndarray, T: np.ndarray, estimand: str) -> float:
    """Direct evaluation of the weighted energy-distance objective.

    `w` is on the pre-normalization scale (each group summing to its size).
    Used for diagnostics and as an independent check on the QP expansion.
    """
    T = np.asarray(T, dtype=float)
    treated = T == 1.0
    control = ~treated
    n = T.size
    n1 = int(treated.sum())
    n0 = n - n1

    def against_pool(group_mask, size):
        wg = w[group_mask]
        dg = D[group_mask]
        term1 = 2.0 / (size * n) * float(wg @ dg.sum(axis=1))
        term2 = -1.0 / size**2 * float(wg @ D[np.ix_(group_mask, group_mask)] @ wg)
        term3 = -1.0 / n**2 * float(D.sum())
        return term1 + term2 + term3

    def between(w0, w1):
        term1 = 2.0 / (n0 * n1) * float(w0 @ D[np.ix_(control, treated)] @ w1)
        term2 = -1.0 / n0**2 * float(w0 @ D[np.ix_(control, control)] @ w0)
        term3 = -1.0 / n1**2 * float(w1 @ D[np.ix_(treated, treated)] @ w1)
        return term1 + term2 + term3

    if estimand == "ATE":
        return against_pool(control, n0) + against_pool(treated, n1) + between(w[control], w[treated])
    return between(w[control], np.ones(n1))


def energy_balance(X: np.ndarray, T: np.ndarray, estimand: str) -> BalanceWeights:
    """Weights minimizing the discrete energy distance between the weighted
    group distributions and their targets; group sums normalized to one."""
    _check_estimand(estimand)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    T = np.asarray(T, dtype=float)
    treated, control = _validate_groups(T)
    if _rows_all_identical(X):
        return _uniform_weights(T, estimand, "eb")
    n = T.size
    n1, n0 = treated.size, control.size
    D = distance_matrix(X)

    if estimand == "ATE":
        Q = np.zeros((n, n))
        Q[np.ix_(control, control)] = -(4.0 / n0**2) * D[np.ix_(control, control)]
        Q[np.ix_(treated, treated)] = -(4.0 / n1**2) * D[np.ix_(treated, treated)]
        cross = (2.0 / (n0 * n1)) * D[np.ix_(control, treated)]
        Q[np.ix_(control, treated)] = cross
        Q[np.ix_(treated, control)] = cross.T
        c = np.empty(n)
        rowsums = D.sum(axis=1)
        c[control] = (2.0 / (n0 * n)) * rowsums[control]
        c[treated] = (2.0 / (n1 * n)) * rowsums[treated]
        qp = QuadraticProgram(Q, c, ((tuple(treated), float(n1)), (tuple(control), float(n0))))
        sol = solve_qp(qp)
        raw = sol.w
    else:
        Q = -(2.0 / n0**2) * D[np.ix_(control, control)]
        c = (2.0 / (n0 * n1)) * D[np.ix_(control, treated)].sum(axis=1)
        qp = QuadraticProgram(Q, c, ((tuple(range(n0)), float(n0)),))
        sol = solve_qp(qp)
        raw = np.ones(n)
        raw[control] = sol.w

    w = np.zeros(n)
    w[treated] = raw[treated] / raw[treated].sum() if raw[treated].sum() > 0 else 0.0
    w[control] = raw[control] / raw[control].sum() if raw[control].sum() > 0 else 0.0
    kept = np.ones(n, dtype=bool)
    extra = {
        "solver_status": sol.status,
        "solver_iterations": sol.iterations,
        "kkt_residual": sol.kkt_residual,
        "diagonal_shift": sol.diagonal_shift,
        "energy_objective": energy_distance_objective(D, raw, T, estimand),
    }
    return _finish(w, estimand, "eb", kept, T, extra)


# ---------------------------------------------------------------------------
# Kernel optimal matching
# ---------------------------------------------------------------------------

def gp_ridge_selection(K_group: np.ndarray, y_group: np.ndarray, grid=KOM_RIDGE_GRID):
    """Ridge from the Gaussian-process marginal likelihood of the (centered)
    group outcomes, with the signal amplitude profiled out in closed form so the
    ridge plays the noise-to-signal role. The grid evidence is combined by an
    evidence-weighted geometric mean (the likelihood surface is nearly flat for
    weak binary signals, so a hard argmax flips between extremes). Falls back to
    1.0 if every evaluation fails numerically."""
    y = np.asarray(y_group, dtype=float)
    yc = y - y.mean()
    m = y.size
    lmls, lams = [], []
    for lam in grid:
        try:
            L = np.linalg.cholesky(K_group + lam * np.eye(m))
        except np.linalg.LinAlgError:
            continue
        z = np.linalg.solve(L, yc)
        quad = float(z @ z)
        if not np.isfinite(quad) or quad <= 0.0:
            continue
        # amplitude maximized analytically at quad/m
        lml = -0.5 * m * np.log(quad / m) - float(np.log(np.diag(L)).sum())
        if np.isfinite(lml):
            lmls.append(lml)
            lams.append(lam)
    if not lams:
        return 1.0, {"ridge_fallback": True}
    weights = np.exp(np.asarray(lmls) - max(lmls))
    weights /= weights.sum()
    ridge = float(np.exp(weights @ np.log(lams)))
    return ridge, {"ridge_fallback": False, "ridge_evidence_max": float(max(lmls))}


def kom_weights(
    X: np.ndarray,
    T: np.ndarray,
    Y: np.ndarray,
    estimand: str,
    kernel: KernelSpec | None = None,
) -> BalanceWeights:
    """Kernel-optimal-matching weights: minimize the worst-case bias quadratic
    over group simplexes, with per-group ridge chosen by GP marginal likelihood."""
    _check_estimand(estimand)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    T = np.asarray(T, dtype=float)
    Y = np.asarray(Y, dtype=float)
    treated, control = _validate_groups(T)
    if _rows_all_identical(X):
        return _uniform_weights(T, estimand, "kom")
    if kernel is None:
        kernel = KernelSpec("gaussian", median_heuristic(X))
    n = T.size
    n1, n0 = treated.size, control.size
    K = gram_matrix(kernel, X)

    lam0, diag0 = gp_ridge_selection(K[np.ix_(control, control)], Y[control])
    extra = {"kernel_scale": kernel.scale, "ridge_control": lam0, **{f"control_{k}": v for k, v in diag0.items()}}

    if estimand == "ATE":
        lam1, diag1 = gp_ridge_selection(K[np.ix_(treated, treated)], Y[treated])
        extra.update({"ridge_treated": lam1, **{f"treated_{k}": v for k, v in diag1.items()}})
        Q = np.zeros((n, n))
        Q[np.ix_(control, control)] = 2.0 * (K[np.ix_(control, control)] + lam0 * np.eye(n0))
        Q[np.ix_(treated, treated)] = 2.0 * (K[np.ix_(treated, treated)] + lam1 * np.eye(n1))
        c = -(2.0 / n) * K.sum(axis=0)
        qp = QuadraticProgram(Q, c, ((tuple(treated), 1.0), (tuple(control), 1.0)))
        sol = solve_qp(qp)
        w = sol.w.copy()
    else:
        Q = 2.0 * (K[np.ix_(control, control)] + lam0 * np.eye(n0))
        c = -(2.0 / n1) * K[np.ix_(treated, control)].sum(axis=0)
        qp = QuadraticProgram(Q, c, ((tuple(range(n0)), 1.0),))
        sol = solve_qp(qp)
        w = np.empty(n)
        w[treated] = 1.0 / n1
        w[control] = sol.w

    kept = np.ones(n, dtype=bool)
    extra.update(
        {
            "solver_status": sol.status,
            "solver_iterations": sol.iterations,
            "kkt_residual": sol.kkt_residual,
            "diagonal_shift": sol.diagonal_shift,
        }
    )
    return _finish(w, estimand, "kom", kept, T, extra)


# ---------------------------------------------------------------------------
# Tailored loss functions
# ---------------------------------------------------------------------------

@dataclass
class TlfModel:
    """Penalized RKHS propensity model p(x) = logit^-1(intercept + sum_j alpha_j K(x, X_j))."""

    alpha: np.ndarray
    intercept: float
    kernel: KernelSpec
    lam: float
    gram: np.ndarray
    converged: bool = True


def tlf_score(q, t, estimand: str):
    """Scoring rule tailored to the estimand, evaluated elementwise."""
    _check_estimand(estimand)
    q = np.asarray(q, dtype=float)
    t = np.asarray(t, dtype=float)
    logodds = np.log(q) - np.log1p(-q)
    if estimand == "ATE":
        return (2.0 * t - 1.0) * logodds - t / q - (1.0 - t) / (1.0 - q)
    return -(1.0 - t) * logodds - t / q


def _tlf_value_grad(K, T, intercept, alpha, lam, estimand):
    n = T.size
    eta = intercept + K @ alpha
    p = np.clip(expit(eta), 1e-12, 1.0 - 1e-12)
    if estimand == "ATE":
        s = (2.0 * T - 1.0) * eta - T / p - (1.0 - T) / (1.0 - p)
        u = T / p - (1.0 - T) / (1.0 - p)
    else:
        s = -(1.0 - T) * eta - T / p
        u = T * (1.0 - p) / p - (1.0 - T)
    value = float(s.mean()) - lam * float(alpha @ (K @ alpha))
    grad_alpha = K @ (u / n - 2.0 * lam * alpha)
    grad_intercept = float(u.mean())
    return value, grad_intercept, grad_alpha


def tlf_fit(
    X: np.ndarray,
    T: np.ndarray,
    estimand: str,
    lam: float,
    gamma: float,
    max_iter: int = 5000,
    gtol: float = 1e-6,
) -> TlfModel:
    """Maximize the penalized tailored scoring rule by gradient ascent with
    backtracking, starting from alpha = 0 and the marginal log-odds intercept."""
    _check_estimand(estimand)
    if lam < 0 or gamma <= 0:
        raise ValueError("need lam >= 0 and gamma > 0")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    T = np.asarray(T, dtype=float)
    _validate_groups(T)
    kernel = KernelSpec("laplacian", gamma)
    K = gram_matrix(kernel, X)
    return _tlf_fit_gram(K, T, estimand, lam, kernel, max_iter, gtol)


def _tlf_fit_gram(K, T, estimand, lam, kernel, max_iter=5000, gtol=1e-6) -> TlfModel:
    n = T.size
    rate = min(max(T.mean(), 1e-6), 1.0 - 1e-6)
    intercept = float(np.log(rate / (1.0 - rate)))
    alpha = np.zeros(n)
    value, g0, ga = _tlf_value_grad(K, T, intercept, alpha, lam, estimand)
    if not np.isfinite(value):
        raise NumericError("tailored-loss objective is non-finite at the start point")
    step = 1.0
    converged = False
    for _ in range(max_iter):
        gnorm = max(abs(g0), float(np.max(np.abs(ga))) if ga.size else 0.0)
        if gnorm < gtol:
            converged = True
            break
        gsq = g0 * g0 + float(ga @ ga)
        accepted = False
        while step >= 1e-18:
            cand_i = intercept + step * g0
            cand_a = alpha + step * ga
            cand_v, cand_g0, cand_ga = _tlf_value_grad(K, T, cand_i, cand_a, lam, estimand)
            if np.isfinite(cand_v) and cand_v >= value + 1e-4 * step * gsq:
                intercept, alpha = cand_i, cand_a
                value, g0, ga = cand_v, cand_g0, cand_ga
                step = min(step * 2.0, 1e6)
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
    if not np.isfinite(value):
        raise NumericError("tailored-loss objective became non-finite")
    return TlfModel(alpha, intercept, kernel, lam, K, converged)


def tlf_predict(model: TlfModel, X: np.ndarray, train_X: np.ndarray | None = None) -> np.ndarray:
    """Fitted propensities; with train_X given, evaluates on new rows."""
    if train_X is None:
        eta = model.intercept + model.gram @ model.alpha
    else:
        cross = gram_matrix(model.kernel, np.atleast_2d(X), np.atleast_2d(train_X))
        eta = model.intercept + cross @ model.alpha
    return np.clip(expit(eta), 1e-12, 1.0 - 1e-12)


_TLF_CACHE: dict = {}
_TLF_LOCK = threading.Lock()


def select_tlf_hyper(
    X: np.ndarray,
    T: np.ndarray,
    estimand: str,
    lambdas=TLF_LAMBDA_GRID,
    gammas=TLF_GAMMA_GRID,
    folds: int = 5,
) -> tuple[float, float]:
    """Pick (lambda, gamma) by 5-fold cross-validated mean tailored score."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    T = np.asarray(T, dtype=float)
    n = T.size
    fold_id = np.arange(n) % folds
    best = (float(lambdas[0]), float(gammas[0]))
    best_score = -np.inf
    for gamma in gammas:
        K = gram_matrix(KernelSpec("laplacian", gamma), X)
        for lam in lambdas:
            fold_scores = []
            for f in range(folds):
                test = fold_id == f
                train = ~test
                t_train = T[train]
                if t_train.min() == t_train.max():
                    continue
                K_tr = K[np.ix_(train, train)]
                model = _tlf_fit_gram(
                    K_tr, t_train, estimand, lam, KernelSpec("laplacian", gamma), max_iter=2000
                )
                eta = model.intercept + K[np.ix_(test, train)] @ model.alpha
                p = np.clip(expit(eta), 1e-12, 1.0 - 1e-12)
                fold_scores.append(float(tlf_score(p, T[test], estimand).mean()))
            if not fold_scores:
                continue
            score = float(np.mean(fold_scores))
            if score > best_score:
                best_score = score
                best = (float(lam), float(gamma))
    return best


def cached_tlf_hyper(cache_key, X, T, estimand) -> tuple[float, float]:
    """Write-once per-key hyperparameter selection (thread-safe)."""
    with _TLF_LOCK:
        if cache_key in _TLF_CACHE:
            return _TLF_CACHE[cache_key]
    hyper = select_tlf_hyper(X, T, estimand)
    with _TLF_LOCK:
        return _TLF_CACHE.setdefault(cache_key, hyper)


def tlf_weights(
    X: np.ndarray,
    T: np.ndarray,
    estimand: str,
    hyper: dict | None = None,
    cache_key=None,
) -> BalanceWeights:
    """IPTW-formula weights from the tailored-loss propensity fit, normalized so
    each group's weights sum to one. hyper=None triggers cross-validated selection
    (cached under cache_key when given)."""
    _check_estimand(estimand)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    T = np.asarray(T, dtype=float)
    treated, control = _validate_groups(T)
    if _rows_all_identical(X):
        return _uniform_weights(T, estimand, "tlf")
    if hyper is None:
        if cache_key is not None:
            lam, gamma = cached_tlf_hyper(cache_key, X, T, estimand)
        else:
            lam, gamma = select_tlf_hyper(X, T, estimand)
    else:
        lam, gamma = float(hyper["lambda"]), float(hyper["gamma"])

    model = tlf_fit(X, T, estimand, lam, gamma)
    p = tlf_predict(model, X)
    n = T.size
    n1 = treated.size
    if estimand == "ATE":
        w = (T / p + (1.0 - T) / (1.0 - p)) / n
    else:
        w = np.where(T == 1.0, 1.0 / n1, p / ((1.0 - p) * n1))
    w[treated] = w[treated] / w[treated].sum()
    w[control] = w[control] / w[control].sum()
    kept = np.ones(n, dtype=bool)
    extra = {
        "solver_status": "converged" if model.converged else "max_iter",
        "lambda": lam,
        "gamma": gamma,
    }
    return _finish(w, estimand, "tlf", kept, T, extra)


def weights_to_csv(weight_sets: list[BalanceWeights], path) -> None:
    """Debug export with columns index,method,estimand,weight,kept."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "method", "estimand", "weight", "kept"])
        for bw in weight_sets:
            for i, (w, k) in enumerate(zip(bw.values, bw.kept_mask)):
                writer.writerow([i, bw.method, bw.estimand, repr(float(w)), bool(k)])
