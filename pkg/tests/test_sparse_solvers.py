import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blindsep import sparse_solvers as ss


def cplx(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def kkt_residual(H, y, x, lam):
    """Independent KKT check for 1/2||y - Hx||^2 + lam ||x||_1."""
    c = H.conj().T @ (y - H @ x)
    worst = 0.0
    for cj, xj in zip(c, x):
        if xj == 0:
            worst = max(worst, abs(cj) - lam)
        else:
            worst = max(worst, abs(cj - lam * xj / abs(xj)))
    return worst


TIGHT = ss.SolverParams(inner_tol=1e-12, inner_max_iters=100_000)


# ------------------------------------------------------------ soft threshold


def test_soft_threshold_examples():
    assert ss.soft_threshold(3 + 4j, 5) == 0
    assert ss.soft_threshold(3 + 4j, 0) == 3 + 4j
    assert ss.soft_threshold(6 + 8j, 5) == pytest.approx(3 + 4j, abs=1e-15)
    assert ss.soft_threshold(0j, 1.0) == 0


@given(st.complex_numbers(max_magnitude=1e6, allow_nan=False, allow_infinity=False),
       st.floats(0, 1e6, allow_nan=False))
def test_soft_threshold_shrinks_magnitude_keeps_phase(v, tau):
    out = ss.soft_threshold(v, tau)
    assert abs(out) == pytest.approx(max(abs(v) - tau, 0.0), rel=1e-12, abs=1e-9)
    if out != 0:
        assert abs(out / abs(out) - v / abs(v)) < 1e-9


# ----------------------------------------------------------------- LASSO


def test_lasso_zero_above_critical_lambda():
    rng = np.random.default_rng(0)
    H, y = cplx(rng, (6, 9)), cplx(rng, 6)
    lam = np.abs(H.conj().T @ y).max()
    np.testing.assert_array_equal(ss.lasso_column(H, y, lam * 1.0001), 0)


def test_lasso_unregularized_is_least_squares():
    rng = np.random.default_rng(1)
    H, y = cplx(rng, (10, 4)), cplx(rng, 10)
    x = ss.lasso_column(H, y, 0.0, TIGHT)
    np.testing.assert_allclose(x, np.linalg.lstsq(H, y, rcond=None)[0], atol=1e-9)


def test_lasso_identity_closed_form():
    x = ss.lasso_column(np.eye(2), np.array([2.0, 0.1]), 0.5, TIGHT)
    np.testing.assert_allclose(x, [1.5, 0.0], atol=1e-12)


def test_lasso_unitary_is_soft_threshold():
    rng = np.random.default_rng(2)
    Q, _ = np.linalg.qr(cplx(rng, (5, 5)))
    y = cplx(rng, 5)
    x = ss.lasso_column(Q, y, 0.3, TIGHT)
    np.testing.assert_allclose(x, ss.soft_threshold(Q.conj().T @ y, 0.3), atol=1e-10)


@pytest.mark.property
@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 8), st.integers(2, 12), st.floats(1e-3, 1.0))
def test_lasso_kkt_certificate(seed, M, N, lam):
    rng = np.random.default_rng(seed)
    H, y = cplx(rng, (M, N)), cplx(rng, M)
    x = ss.lasso_column(H, y, lam, ss.SolverParams(inner_tol=1e-7, inner_max_iters=200_000))
    assert kkt_residual(H, y, x, lam) <= 1e-6
    # never worse than the trivial solution
    f = lambda z: 0.5 * np.linalg.norm(y - H @ z) ** 2 + lam * np.abs(z).sum()
    assert f(x) <= f(np.zeros(N)) + 1e-12


def test_lasso_matches_convex_reference():
    cp = pytest.importorskip("cvxpy")
    rng = np.random.default_rng(3)
    H, y = cplx(rng, (6, 10)), cplx(rng, 6)
    lam = 0.2
    x = ss.lasso_column(H, y, lam, TIGHT)
    z = cp.Variable(10, complex=True)
    cp.Problem(cp.Minimize(0.5 * cp.sum_squares(y - H @ z) + lam * cp.norm1(z))).solve()
    f = lambda v: 0.5 * np.linalg.norm(y - H @ v) ** 2 + lam * np.abs(v).sum()
    assert f(x) <= f(z.value) + 1e-7


def test_two_engines_agree():
    rng = np.random.default_rng(4)
    H, Y = cplx(rng, (8, 6)), cplx(rng, (8, 30))
    G, B = H.conj().T @ H, H.conj().T @ Y
    w = rng.uniform(0, 2, 30)
    V = cplx(rng, (6, 30))
    X1, ok1, _ = ss.prox_grad(G, B, 0.1, w, V, tol=1e-11, max_iters=50_000)
    X2, ok2, _ = ss.coordinate_descent(G, B, 0.1, w, V, tol=1e-11, max_iters=50_000)
    assert ok1.all() and ok2.all()
    np.testing.assert_allclose(X1, X2, atol=1e-9)


def test_prox_grad_trace_is_monotone():
    rng = np.random.default_rng(5)
    H, y = cplx(rng, (10, 20)), cplx(rng, 10)
    trace = []
    ss.lasso_column(H, y, 0.05, ss.SolverParams(inner_tol=1e-8, inner_max_iters=50_000), trace=trace)
    assert len(trace) > 2
    # non-increasing up to floating-point rounding of the objective
    assert np.all(np.diff(trace) <= 1e-12 * abs(trace[0]))


def test_lasso_reports_non_convergence_with_iterate():
    rng = np.random.default_rng(6)
    H, y = cplx(rng, (10, 20)), cplx(rng, 10)
    with pytest.raises(ss.ConvergenceError) as err:
        ss.lasso_column(H, y, 1e-4, ss.SolverParams(inner_tol=1e-14, inner_max_iters=1))
    assert err.value.iterate is not None and err.value.iterate.shape == (20,)
    assert "column" in err.value.where


def test_solver_params_validation():
    with pytest.raises(ValueError):
        ss.SolverParams(lam=-1)
    with pytest.raises(ValueError):
        ss.SolverParams(mu=float("inf"))
    with pytest.raises(ValueError):
        ss.SolverParams(admm_iters=0)
    with pytest.raises(ValueError):
        ss.SolverParams(inner_tol=0)


# ------------------------------------------------------------------- OMP


def test_omp_single_atom_and_zero():
    rng = np.random.default_rng(7)
    H = cplx(rng, (6, 8))
    H /= np.linalg.norm(H, axis=0)
    x = ss.omp_column(H, 3 * H[:, 2], sparsity=1)
    expected = np.zeros(8, complex)
    expected[2] = 3
    np.testing.assert_allclose(x, expected, atol=1e-12)
    np.testing.assert_array_equal(ss.omp_column(H, np.zeros(6), sparsity=2), 0)


def test_omp_least_squares_on_support():
    rng = np.random.default_rng(8)
    H, y = cplx(rng, (10, 15)), cplx(rng, 10)
    x = ss.omp_column(H, y, sparsity=4)
    S = np.flatnonzero(x)
    assert len(S) <= 4
    # residual orthogonal to the selected atoms
    r = y - H @ x
    np.testing.assert_allclose(H[:, S].conj().T @ r, 0, atol=1e-10)


def test_omp_residual_stop():
    rng = np.random.default_rng(9)
    H = cplx(rng, (10, 15))
    x0 = np.zeros(15, complex)
    x0[[1, 7]] = [1.0, -2.0]
    x = ss.omp_column(H, H @ x0, residual_tol=1e-9)
    np.testing.assert_allclose(x, x0, atol=1e-9)


def test_omp_support_recovery_rate():
    rng = np.random.default_rng(10)
    hits = 0
    for _ in range(200):
        H = cplx(rng, (20, 30))
        H /= np.linalg.norm(H, axis=0)
        support = rng.choice(30, 3, replace=False)
        x0 = np.zeros(30, complex)
        x0[support] = rng.standard_normal(3)
        x0[support] += np.sign(x0[support]) * 0.3  # keep amplitudes away from zero
        y = H @ x0 + np.sqrt(1e-3) * cplx(rng, 20)
        hits += set(np.flatnonzero(ss.omp_column(H, y, sparsity=3))) == set(support)
    assert hits / 200 >= 0.9


def test_omp_singular_subdictionary():
    # two identical atoms: the second pick makes the restricted Gram matrix singular
    H = np.array([[1.0, 1.0], [0.0, 0.0]], dtype=complex)
    with pytest.raises(ss.NumericalError):
        ss.omp_column(H, np.array([1.0, 0.5]), sparsity=2)


def test_default_sparsity():
    assert ss.default_sparsity(30, 0.0022, 0.02) == 3


# ----------------------------------------------------------- smooth LASSO


def reference_objective(H, X, Y, lam, mu):
    total = 0.0
    for t in range(Y.shape[1]):
        total += np.sum(np.abs(Y[:, t] - H @ X[:, t]) ** 2) + lam * np.sum(np.abs(X[:, t]))
        if t > 0:
            total += mu * np.sum(np.abs(X[:, t] - X[:, t - 1]) ** 2)
    return total


def test_smooth_lasso_objective_identities():
    rng = np.random.default_rng(11)
    H, X, Y = cplx(rng, (3, 4)), cplx(rng, (4, 6)), cplx(rng, (3, 6))
    assert ss.smooth_lasso_objective(H, np.zeros((4, 6)), Y, 0.3, 0.7) == pytest.approx(np.linalg.norm(Y) ** 2)
    assert ss.smooth_lasso_objective(H, X, Y, 0.3, 0.7) == pytest.approx(reference_objective(H, X, Y, 0.3, 0.7), rel=1e-12)
    sep = sum(ss.smooth_lasso_objective(H, X[:, [t]], Y[:, [t]], 0.3, 0.0) for t in range(6))
    assert ss.smooth_lasso_objective(H, X, Y, 0.3, 0.0) == pytest.approx(sep, rel=1e-12)


def well_posed(seed, M=10, N=6, T=8):
    rng = np.random.default_rng(seed)
    return cplx(rng, (M, N)), cplx(rng, (M, T))


@pytest.mark.property
@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 2.0))
def test_seq_with_zero_mu_is_columnwise_lasso(seed, lam):
    H, Y = well_posed(seed)
    Xs = ss.smooth_lasso_seq(H, Y, ss.SolverParams(lam=lam, mu=0.0, inner_tol=1e-12, inner_max_iters=100_000)).signal
    Xl = ss.lasso_column(H, Y, lam / 2, TIGHT)
    assert np.abs(Xs - Xl).max() <= 1e-8


def test_seq_columns_satisfy_chained_subproblems():
    H, Y = well_posed(12, M=6, N=9, T=10)
    lam, mu = 0.2, 0.8
    X = ss.smooth_lasso_seq(H, Y, ss.SolverParams(lam=lam, mu=mu, inner_tol=1e-10, inner_max_iters=100_000)).signal
    # column t minimizes ||y - Hx||^2 + lam|x|_1 + mu||x - x(t-1)||^2, i.e. half of it is a
    # LASSO on the stacked system [H; sqrt(mu) I] x ~ [y; sqrt(mu) x(t-1)] with weight lam/2
    for t in range(10):
        if t == 0:
            Ht, yt = H, Y[:, 0]
        else:
            Ht = np.vstack([H, np.sqrt(mu) * np.eye(9)])
            yt = np.concatenate([Y[:, t], np.sqrt(mu) * X[:, t - 1]])
        assert kkt_residual(Ht, yt, X[:, t], lam / 2) <= 1e-8


def test_seq_large_mu_freezes_constant_source():
    rng = np.random.default_rng(13)
    H = cplx(rng, (6, 4))
    x = np.array([1.0, 0, 0, 0.5])
    Y = np.outer(H @ x, np.ones(12))
    X = ss.smooth_lasso_seq(H, Y, ss.SolverParams(lam=0.0, mu=1e6, inner_tol=1e-10, inner_max_iters=100_000)).signal
    assert np.abs(np.diff(X, axis=1)).max() <= 1e-3


@pytest.mark.property
def test_admm_single_column_is_lasso():
    H, Y = well_posed(14, T=1)
    p = ss.SolverParams(lam=0.4, mu=3.0, inner_tol=1e-12, inner_max_iters=100_000)
    Xa = ss.smooth_lasso_admm(H, Y, p).signal
    Xl = ss.lasso_column(H, Y, 0.2, TIGHT)
    assert np.abs(Xa - Xl).max() <= 1e-8


def test_admm_matches_convex_reference():
    cp = pytest.importorskip("cvxpy")
    rng = np.random.default_rng(15)
    M, N, T = 3, 4, 5
    H = cplx(rng, (M, N))
    X0 = np.where(rng.random((N, T)) < 0.5, rng.standard_normal((N, T)), 0)
    Y = H @ X0 + 0.05 * cplx(rng, (M, T))
    lam, mu = 0.1, 0.5
    Z = cp.Variable((N, T), complex=True)
    obj = cp.sum_squares(Y - H @ Z) + lam * cp.sum(cp.abs(Z)) + mu * cp.sum_squares(Z[:, 1:] - Z[:, :-1])
    cp.Problem(cp.Minimize(obj)).solve()
    ref = ss.smooth_lasso_objective(H, Z.value, Y, lam, mu)
    # default operating point: 30 iterations, rho = 0.1, all-ones multipliers
    sol = ss.smooth_lasso_admm(H, Y, ss.SolverParams(lam=lam, mu=mu, rho=0.1, admm_iters=30, inner_tol=1e-10))
    assert sol.objective_trace[-1] <= 1.01 * ref
    assert sol.residual_trace[-1] <= sol.residual_trace[0]
    np.testing.assert_array_equal(sol.multipliers.shape, (N, T - 1))


def test_admm_converges_to_exact_optimum_with_more_iterations():
    H, Y = well_posed(16, M=5, N=6, T=12)
    p = ss.SolverParams(lam=0.1, mu=0.5, rho=1.0, admm_iters=800, inner_tol=1e-12, inner_max_iters=100_000)
    sol = ss.smooth_lasso_admm(H, Y, p)
    assert sol.residual_trace[-1] <= 1e-8
    # optimality of the joint problem: perturbing any entry cannot lower the objective
    X = sol.signal
    f0 = ss.smooth_lasso_objective(H, X, Y, 0.1, 0.5)
    rng = np.random.default_rng(0)
    for _ in range(50):
        D = 1e-4 * cplx(rng, X.shape)
        assert ss.smooth_lasso_objective(H, X + D, Y, 0.1, 0.5) >= f0 - 1e-9


def test_admm_custom_multipliers_and_rho_validation():
    H, Y = well_posed(17, T=4)
    p = ss.SolverParams(lam=0.1, mu=0.5, admm_iters=3)
    sol = ss.smooth_lasso_admm(H, Y, p, init_multipliers=np.zeros((6, 3)))
    assert sol.signal.shape == (6, 4)
    with pytest.raises(ValueError):
        ss.smooth_lasso_admm(H, Y, ss.SolverParams(rho=0.0))


def test_solvers_never_worse_than_zero():
    H, Y = well_posed(18, M=5, N=8, T=20)
    p = ss.SolverParams(lam=0.3, mu=0.2, inner_tol=1e-8)
    zero = ss.smooth_lasso_objective(H, np.zeros((8, 20)), Y, 0.3, 0.2)
    for solver in (ss.smooth_lasso_seq, ss.smooth_lasso_admm):
        X = solver(H, Y, p).signal
        assert ss.smooth_lasso_objective(H, X, Y, 0.3, 0.2) <= zero


def test_runtime_scales_linearly_in_horizon():
    rng = np.random.default_rng(19)
    H = cplx(rng, (20, 30))
    H /= np.linalg.norm(H, axis=0)
    p = ss.SolverParams(lam=0.05, mu=0.01, admm_iters=5, inner_tol=1e-4)

    def timed(solver, T):
        Y = cplx(rng, (20, T))
        best = np.inf
        for _ in range(3):
            t0 = time.perf_counter()
            solver(H, Y, p)
            best = min(best, time.perf_counter() - t0)
        return best

    for solver in (ss.smooth_lasso_seq, ss.smooth_lasso_admm):
        timed(solver, 50)  # warm up
        ratio = timed(solver, 4000) / timed(solver, 2000)
        assert 1.2 < ratio < 3.5, (solver.__name__, ratio)
