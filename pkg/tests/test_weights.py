import numpy as np
import pytest

import balancebench as bb
from balancebench.estimators import weighted_average
from balancebench.kernels import KernelSpec, distance_matrix, gram_matrix
from balancebench.weights import (
    effective_sample_size,
    energy_distance_objective,
    select_tlf_hyper,
    tlf_fit,
    tlf_predict,
    tlf_score,
    tlf_weights,
)


# ---------------------------------------------------------------------------
# IPTW
# ---------------------------------------------------------------------------

def test_iptw_ate_constant_propensity():
    e = np.full(4, 0.5)
    T = np.array([1.0, 0.0, 1.0, 0.0])
    bw = bb.iptw_weights(e, T, "ATE", "none")
    np.testing.assert_allclose(bw.values, 0.5)
    assert bw.kept_mask.all()


def test_iptw_att_constant_propensity():
    bw = bb.iptw_weights(np.array([0.5, 0.5]), np.array([1.0, 0.0]), "ATT", "none")
    np.testing.assert_allclose(bw.values, [1.0, 1.0])


def test_iptw_validation():
    T = np.array([1.0, 0.0])
    with pytest.raises(ValueError):
        bb.iptw_weights(np.array([0.0, 0.5]), T, "ATE", "none")
    with pytest.raises(ValueError):
        bb.iptw_weights(np.array([0.5, 0.5]), np.array([1.0, 1.0]), "ATE", "none")
    with pytest.raises(ValueError):
        bb.iptw_weights(np.array([0.5, 0.5]), T, "ATM", "none")
    with pytest.raises(ValueError):
        bb.iptw_weights(np.array([0.5, 0.5]), T, "ATE", "chop")


def test_trim99_matches_sort_oracle():
    rng = np.random.default_rng(0)
    n = 200
    e = np.clip(rng.beta(2, 4, n), 0.02, 0.98)
    T = (rng.random(n) < e).astype(float)
    if T.sum() == 0 or T.sum() == n:
        T[0], T[1] = 1.0, 0.0
    bw = bb.iptw_weights(e, T, "ATE", "trim99")
    raw = (T / e + (1 - T) / (1 - e)) / n

    # oracle: manual type-7 quantile from the full sort
    srt = np.sort(raw)
    pos = 0.99 * (n - 1)
    lo, hi = int(np.floor(pos)), int(np.ceil(pos))
    cutoff = srt[lo] + (pos - lo) * (srt[hi] - srt[lo])
    expected_kept = raw <= cutoff
    np.testing.assert_array_equal(bw.kept_mask, expected_kept)
    assert np.all(bw.values[~bw.kept_mask] == 0.0)
    np.testing.assert_allclose(bw.values[bw.kept_mask], raw[expected_kept])


def test_hajek_group_sums():
    rng = np.random.default_rng(1)
    e = np.clip(rng.random(50), 0.05, 0.95)
    T = (rng.random(50) < 0.4).astype(float)
    for estimand in ("ATE", "ATT"):
        bw = bb.iptw_weights(e, T, estimand, "hajek")
        assert bw.values[T == 1].sum() == pytest.approx(1.0, abs=1e-12)
        assert bw.values[T == 0].sum() == pytest.approx(1.0, abs=1e-12)


def test_cap99_truncates_per_group():
    rng = np.random.default_rng(2)
    e = np.clip(rng.random(300), 0.01, 0.99)
    T = (rng.random(300) < 0.4).astype(float)
    raw = (T / e + (1 - T) / (1 - e)) / 300
    bw = bb.iptw_weights(e, T, "ATE", "cap99")
    assert bw.kept_mask.all()
    for grp in (T == 1.0, T == 0.0):
        cut = np.percentile(raw[grp], 99.0)
        np.testing.assert_allclose(bw.values[grp], np.minimum(raw[grp], cut))


def test_att_treated_weights_fixed():
    spec = bb.build_scenario("common", "low", 120, 3)
    ds = bb.generate_dataset(spec, bb.replication_rng(spec, 0))
    n1 = ds.n1
    for maker in (
        lambda: bb.iptw_weights(ds.e_true, ds.T, "ATT", "none"),
        lambda: bb.energy_balance(ds.X, ds.T, "ATT"),
        lambda: bb.kom_weights(ds.X, ds.T, ds.Y, "ATT"),
        lambda: tlf_weights(ds.X, ds.T, "ATT", hyper={"lambda": 0.01, "gamma": 0.5}),
    ):
        bw = maker()
        np.testing.assert_allclose(bw.values[ds.T == 1], 1.0 / n1, atol=1e-12)
        assert np.all(bw.values >= 0)
        assert np.all(np.isfinite(bw.values))


def test_effective_sample_size():
    assert effective_sample_size(np.ones(8)) == pytest.approx(8.0)
    assert effective_sample_size(np.array([1.0, 0.0, 0.0])) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# Energy balancing
# ---------------------------------------------------------------------------

def test_energy_identical_rows_gives_uniform():
    X = np.ones((10, 10))
    T = np.array([1.0] * 3 + [0.0] * 7)
    bw = bb.energy_balance(X, T, "ATE")
    np.testing.assert_allclose(bw.values[T == 1], 1 / 3)
    np.testing.assert_allclose(bw.values[T == 0], 1 / 7)
    assert bw.diagnostics["solver_status"] == "degenerate_uniform"


def test_energy_objective_no_worse_than_uniform():
    spec = bb.build_scenario("rare", "moderate", 150, 9)
    ds = bb.generate_dataset(spec, bb.replication_rng(spec, 2))
    D = distance_matrix(ds.X)
    for estimand in ("ATE", "ATT"):
        bw = bb.energy_balance(ds.X, ds.T, estimand)
        raw = bw.values.copy()
        raw[ds.T == 1] *= ds.n1
        raw[ds.T == 0] *= ds.n0
        opt = energy_distance_objective(D, raw, ds.T, estimand)
        uniform = energy_distance_objective(D, np.ones(ds.n), ds.T, estimand)
        assert opt <= uniform + 1e-10
        assert bw.values[ds.T == 1].sum() == pytest.approx(1.0, abs=1e-9)
        assert bw.values[ds.T == 0].sum() == pytest.approx(1.0, abs=1e-9)


def _staged_grid_oracle(fn, dim, total, steps=(0.08, 0.008, 0.0008, 0.00008)):
    """Minimize fn over the scaled simplex by staged grid refinement."""

    def simplex_grid(center, radius, step):
        axes = []
        for k in range(dim - 1):
            lo = max(0.0, center[k] - radius)
            hi = min(total, center[k] + radius)
            axes.append(np.arange(lo, hi + step / 2, step))
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim - 1)
        last = total - pts.sum(axis=1)
        ok = last >= -1e-12
        return np.column_stack([pts[ok], np.maximum(last[ok], 0.0)])

    center = np.full(dim, total / dim)
    radius = total
    best = None
    for step in steps:
        pts = simplex_grid(center, radius, step)
        vals = fn(pts)
        best = pts[int(np.argmin(vals))]
        center = best
        radius = 3 * step
    return best


def test_energy_att_matches_grid_oracle():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((6, 2))
    T = np.array([1.0, 1.0, 0.0, 0.0, 0.0, 0.0])
    bw = bb.energy_balance(X, T, "ATT")
    control = np.nonzero(T == 0.0)[0]
    treated = np.nonzero(T == 1.0)[0]

    # scalar-formula pieces: 2 E|Wc - Ut| - E|Wc - Wc'| - E|Ut - Ut'|
    cross_mean = np.array(
        [np.mean([np.linalg.norm(X[i] - X[j]) for j in treated]) for i in control]
    )
    within_cc = np.array(
        [[np.linalg.norm(X[i] - X[j]) for j in control] for i in control]
    )
    within_t = float(np.mean([np.linalg.norm(X[i] - X[j]) for i in treated for j in treated]))

    def direct_energy(pts):
        w = pts / 4.0
        return 2 * w @ cross_mean - np.einsum("ri,ij,rj->r", w, within_cc, w) - within_t

    best = _staged_grid_oracle(direct_energy, dim=4, total=4.0)
    np.testing.assert_allclose(bw.values[control] * 4.0, best, atol=1e-3)


def test_energy_weights_permutation_equivariant():
    spec = bb.build_scenario("common", "low", 80, 5)
    ds = bb.generate_dataset(spec, bb.replication_rng(spec, 1))
    bw = bb.energy_balance(ds.X, ds.T, "ATE")
    perm = np.random.default_rng(0).permutation(ds.n)
    bw_p = bb.energy_balance(ds.X[perm], ds.T[perm], "ATE")
    np.testing.assert_allclose(bw_p.values, bw.values[perm], atol=1e-6)


# ---------------------------------------------------------------------------
# Kernel optimal matching
# ---------------------------------------------------------------------------

def test_kom_att_single_control():
    X = np.vstack([np.random.default_rng(0).standard_normal((4, 3)), [[0.0, 0.0, 0.0]]])
    T = np.array([1.0, 1.0, 1.0, 1.0, 0.0])
    bw = bb.kom_weights(X, T, np.array([1.0, 0.0, 1.0, 0.0, 1.0]), "ATT")
    assert bw.values[4] == pytest.approx(1.0, abs=1e-9)


def test_kom_att_matches_grid_oracle():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((5, 2))
    T = np.array([1.0, 1.0, 0.0, 0.0, 0.0])
    Y = (rng.random(5) < 0.4).astype(float)
    kernel = KernelSpec("gaussian", 1.3)
    bw = bb.kom_weights(X, T, Y, "ATT", kernel=kernel)
    lam = bw.diagnostics["ridge_control"]
    K = gram_matrix(kernel, X)
    control = T == 0.0
    Q = 2.0 * (K[np.ix_(control, control)] + lam * np.eye(3))
    c = -(2.0 / 2) * K[np.ix_(T == 1.0, control)].sum(axis=0)

    grid = np.arange(0.0, 1.0001, 0.001)
    pts = []
    for w0 in grid:
        w1 = np.arange(0.0, 1.0 - w0 + 5e-4, 0.001)
        pts.append(np.column_stack([np.full(w1.size, w0), w1, 1.0 - w0 - w1]))
    pts = np.vstack(pts)
    vals = 0.5 * np.einsum("ij,jk,ik->i", pts, Q, pts) + pts @ c
    best = pts[int(np.argmin(vals))]
    np.testing.assert_allclose(bw.values[control], best, atol=2e-3)


def test_kom_large_ridge_shrinks_to_uniform():
    spec = bb.build_scenario("common", "low", 100, 8)
    ds = bb.generate_dataset(spec, bb.replication_rng(spec, 0))
    kernel = KernelSpec("gaussian", 2.0)
    control = ds.T == 0.0
    n0 = int(control.sum())

    def max_dev(lam):
        from balancebench.kernels import gram_matrix as gm
        from balancebench.qpsolver import QuadraticProgram, solve_qp

        K = gm(kernel, ds.X)
        Q = 2.0 * (K[np.ix_(control, control)] + lam * np.eye(n0))
        c = -(2.0 / ds.n1) * K[np.ix_(~control, control)].sum(axis=0)
        sol = solve_qp(QuadraticProgram(Q, c, ((tuple(range(n0)), 1.0),)))
        return np.max(np.abs(sol.w - 1.0 / n0))

    assert max_dev(100.0) < max_dev(1.0)
    assert max_dev(100.0) < 2.0 / n0


def test_kom_identical_rows_uniform():
    X = np.zeros((12, 10))
    T = np.array([1.0] * 4 + [0.0] * 8)
    bw = bb.kom_weights(X, T, np.zeros(12), "ATE")
    np.testing.assert_allclose(bw.values[T == 1], 0.25)
    np.testing.assert_allclose(bw.values[T == 0], 0.125)


def test_kom_ate_group_sums():
    spec = bb.build_scenario("common", "moderate", 120, 10)
    ds = bb.generate_dataset(spec, bb.replication_rng(spec, 0))
    bw = bb.kom_weights(ds.X, ds.T, ds.Y, "ATE")
    assert bw.values[ds.T == 1].sum() == pytest.approx(1.0, abs=1e-6)
    assert bw.values[ds.T == 0].sum() == pytest.approx(1.0, abs=1e-6)
    assert np.all(bw.values >= 0)


# ---------------------------------------------------------------------------
# Tailored loss functions
# ---------------------------------------------------------------------------

def test_tlf_score_values():
    assert tlf_score(0.5, 1.0, "ATE") == pytest.approx(-2.0)
    assert tlf_score(0.5, 0.0, "ATT") == pytest.approx(0.0)
    assert tlf_score(0.5, 0.0, "ATE") == pytest.approx(-2.0)
    assert tlf_score(0.25, 1.0, "ATT") == pytest.approx(-4.0)


def test_tlf_gradient_matches_finite_differences():
    spec = bb.build_scenario("common", "low", 20, 3)
    ds = bb.generate_dataset(spec, bb.replication_rng(spec, 0))
    K = gram_matrix(KernelSpec("laplacian", 0.5), ds.X)
    from balancebench.weights import _tlf_value_grad

    rng = np.random.default_rng(1)
    alpha = 0.05 * rng.standard_normal(20)
    b0, lam, eps = -0.3, 1e-3, 1e-5
    for estimand in ("ATE", "ATT"):
        _, g0, ga = _tlf_value_grad(K, ds.T, b0, alpha, lam, estimand)
        up = _tlf_value_grad(K, ds.T, b0 + eps, alpha, lam, estimand)[0]
        dn = _tlf_value_grad(K, ds.T, b0 - eps, alpha, lam, estimand)[0]
        assert g0 == pytest.approx((up - dn) / (2 * eps), rel=1e-4)
        for j in (0, 9, 19):
            da, db = alpha.copy(), alpha.copy()
            da[j] += eps
            db[j] -= eps
            up = _tlf_value_grad(K, ds.T, b0, da, lam, estimand)[0]
            dn = _tlf_value_grad(K, ds.T, b0, db, lam, estimand)[0]
            assert ga[j] == pytest.approx((up - dn) / (2 * eps), rel=1e-4)


def test_tlf_weight_sums():
    spec = bb.build_scenario("rare", "low", 150, 6)
    ds = bb.generate_dataset(spec, bb.replication_rng(spec, 0))
    for estimand in ("ATE", "ATT"):
        bw = tlf_weights(ds.X, ds.T, estimand, hyper={"lambda": 1e-2, "gamma": 0.5})
        assert bw.values[ds.T == 1].sum() == pytest.approx(1.0, abs=1e-6)
        assert bw.values[ds.T == 0].sum() == pytest.approx(1.0, abs=1e-6)


def test_tlf_huge_penalty_collapses_to_intercept():
    spec = bb.build_scenario("common", "low", 100, 2)
    ds = bb.generate_dataset(spec, bb.replication_rng(spec, 0))
    model = tlf_fit(ds.X, ds.T, "ATE", lam=1e6, gamma=0.5)
    assert np.max(np.abs(model.alpha)) < 1e-4
    bw = tlf_weights(ds.X, ds.T, "ATE", hyper={"lambda": 1e6, "gamma": 0.5})
    hajek = bb.iptw_weights(np.full(ds.n, ds.n1 / ds.n), ds.T, "ATE", "hajek")
    np.testing.assert_allclose(bw.values, hajek.values, atol=1e-3)


def test_tlf_recovers_constant_propensity():
    rng = np.random.default_rng(12)
    X = bb.sample_covariates(1000, rng)
    T = (rng.random(1000) < 0.3).astype(float)
    model = tlf_fit(X, T, "ATE", lam=1e-1, gamma=0.5)
    p = tlf_predict(model, X)
    assert np.max(np.abs(p - T.mean())) < 0.05


def test_tlf_hyper_selection_is_deterministic_and_on_grid():
    spec = bb.build_scenario("common", "low", 120, 4)
    ds = bb.generate_dataset(spec, bb.replication_rng(spec, 0))
    lam, gamma = select_tlf_hyper(ds.X, ds.T, "ATE", lambdas=(1e-3, 1e-2), gammas=(0.5, 1.0), folds=3)
    lam2, gamma2 = select_tlf_hyper(ds.X, ds.T, "ATE", lambdas=(1e-3, 1e-2), gammas=(0.5, 1.0), folds=3)
    assert (lam, gamma) == (lam2, gamma2)
    assert lam in (1e-3, 1e-2) and gamma in (0.5, 1.0)


def test_weights_csv_export(tmp_path):
    spec = bb.build_scenario("common", "low", 30, 3)
    ds = bb.generate_dataset(spec, bb.replication_rng(spec, 0))
    bw = bb.iptw_weights(ds.e_true, ds.T, "ATE", "trim99")
    path = tmp_path / "w.csv"
    from balancebench.weights import weights_to_csv

    weights_to_csv([bw], path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "index,method,estimand,weight,kept"
    assert len(lines) == 31


def test_iptw_oracle_unbiased_over_replications():
    # small-sample Monte Carlo: raw oracle weights give an unbiased WA-ATE
    spec = bb.build_scenario("common", "low", 200, 77)
    vals = []
    for rep in range(600):
        ds = bb.generate_dataset(spec, bb.replication_rng(spec, rep))
        bw = bb.iptw_weights(ds.e_true, ds.T, "ATE", "none")
        vals.append(weighted_average(ds.Y, ds.T, bw).value)
    v = np.asarray(vals)
    mc_se = v.std(ddof=1) / np.sqrt(v.size)
    assert abs(v.mean()) <= 3 * mc_se
