import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import smooth_data
from rkhs_calib.calibrate import fit
from rkhs_calib.errors import CalibError, NumericError, UsageError
from rkhs_calib.kernel import SobolevCubic, gram
from rkhs_calib.model import builtin, identity_model, sample_physical
from rkhs_calib.select import (
    _build,
    default_grid,
    gcv,
    linearize,
    select_lambda,
    sigma2_hat,
    smoother_matrix,
    smoother_solution,
    trace_smoother,
    working_residual,
)


def _random_system(seed, n, q):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0, 1, n))
    k = SobolevCubic(0, 1)
    V, Phi = k.null_basis().design(x), gram(k, x)
    w = rng.uniform(0.3, 2.0, (n, q)) * rng.choice([-1, 1], (1, q))
    return _build(x.reshape(-1, 1), w, rng.standard_normal(n), V, Phi)


def _spline_hat(x, lam, lower, upper):
    """Dense smoothing-spline hat matrix from the KKT system of the penalised problem."""
    k = SobolevCubic(lower, upper)
    V, Phi = k.null_basis().design(x), gram(k, x)
    n, m = V.shape
    K = np.block([[Phi + n * lam * np.eye(n), V], [V.T, np.zeros((m, m))]])
    rhs = np.vstack([np.eye(n), np.zeros((m, n))])
    beta = np.linalg.solve(K, rhs)[:n]
    return np.eye(n) - n * lam * beta


def _ridge_hat(sys, lam):
    """Hat matrix of min |ybar - sum_j W_j (V a_j + Phi b_j)|^2 + n lam sum_j b_j' Phi b_j."""
    n, q, k = sys.n, sys.q, sys.k
    X = np.hstack([np.hstack([sys.w[:, [j]] * sys.V, sys.w[:, [j]] * sys.Phi]) for j in range(q)])
    P = np.zeros((X.shape[1],) * 2)
    p = k + n
    for j in range(q):
        P[j * p + k:(j + 1) * p, j * p + k:(j + 1) * p] = sys.Phi
    return X @ np.linalg.pinv(X.T @ X + n * lam * P) @ X.T


def _identity_system(data, lam):
    est = fit(data, identity_model(), SobolevCubic(*data.domain), lam)
    return linearize(est, data, identity_model())


def test_linearize_identity_model():
    data = smooth_data(0, n=12)
    sys = _identity_system(data, 1e-3)
    np.testing.assert_array_equal(sys.w, 1.0)
    np.testing.assert_allclose(sys.ybar, data.y[:, 0], atol=1e-12)
    np.testing.assert_allclose(sys.Phiw, sys.Phi, atol=0)
    np.testing.assert_allclose(sys.Vw, sys.V, atol=0)


def test_linearize_setting3_is_exact():
    model, s = builtin(3)
    data = sample_physical(s, 20, 1)
    est = fit(data, model, SobolevCubic(*s.domain), 1e-3)
    sys = linearize(est, data, model)
    np.testing.assert_allclose(sys.ybar, data.y[:, 0], atol=1e-12)


def test_stacking_contract():
    sys = _random_system(0, 5, 2)
    assert sys.Y.size == 10
    np.testing.assert_array_equal(sys.Y[:5], sys.Y[5:])
    np.testing.assert_array_equal(sys.Vw[:5], sys.Vw[5:])
    for j in range(2):
        blk = sys.Phiw[:5, 5 * j:5 * (j + 1)]
        np.testing.assert_allclose(blk, blk.T, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 8), st.integers(1, 2))
def test_qr_invariants(seed, n, q):
    sys = _random_system(seed, n, q)
    assert np.max(np.abs(sys.F1.T @ sys.F2)) < 1e-10
    assert np.max(np.abs(sys.F2.T @ sys.F2 - np.eye(sys.F2.shape[1]))) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 8), st.integers(1, 2), st.floats(-6, 1))
def test_smoother_equals_coefficient_form(seed, n, q, loglam):
    sys = _random_system(seed, n, q)
    lam = 10.0**loglam
    A = smoother_matrix(sys, lam)
    alpha, beta_w = smoother_solution(sys, lam)
    fitted = sys.Vw @ alpha + sys.Phiw @ beta_w
    assert np.max(np.abs(A @ sys.Y - fitted)) < 1e-8
    assert np.max(np.abs(sys.Vw.T @ beta_w)) < 1e-8


@pytest.mark.parametrize("q", [1, 2])
def test_large_lambda_limit_is_projection(q):
    sys = _random_system(3, 8, q)
    A = smoother_matrix(sys, 1e12)
    assert np.max(np.abs(A - sys.F1 @ sys.F1.T)) < 1e-6


def test_smoother_symmetric_for_q1():
    sys = _random_system(4, 8, 1)
    A = smoother_matrix(sys, 1e-3)
    assert np.max(np.abs(A - A.T)) < 1e-10


@pytest.mark.parametrize("q", [1, 2])
def test_trace_non_increasing(q):
    sys = _random_system(5, 8, q)
    tr = [trace_smoother(sys, lam) for lam in np.logspace(-8, 4, 30)]
    assert all(b <= a + 1e-9 for a, b in zip(tr, tr[1:]))


def test_lambda_must_be_positive():
    sys = _random_system(6, 6, 1)
    with pytest.raises(UsageError):
        smoother_matrix(sys, 0.0)


@pytest.mark.parametrize("seed", range(4))
def test_identity_smoother_matches_spline_hat(seed):
    data = smooth_data(seed, n=25)
    lam = 1e-4
    sys = _identity_system(data, lam)
    H = _spline_hat(data.x[:, 0], lam, *data.domain)
    assert np.max(np.abs(smoother_matrix(sys, lam) - H)) < 1e-8
    y = data.y[:, 0]
    r = y - H @ y
    tr = np.trace(np.eye(data.n) - H)
    oracle = (r @ r / data.n) / (tr / data.n) ** 2
    for crit in ("working", "stacked"):
        assert gcv(sys, lam, crit) == pytest.approx(oracle, rel=1e-8)
        assert sigma2_hat(sys, lam, crit) == pytest.approx(r @ r / tr, rel=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_working_smoother_matches_direct_ridge_oracle(seed):
    sys = _random_system(seed, 8, 2)
    lam = 10.0 ** (-1 - seed)
    H = _ridge_hat(sys, lam)
    resid, tr = working_residual(sys, lam)
    assert np.max(np.abs(resid - (sys.ybar - H @ sys.ybar))) < 1e-8
    assert tr == pytest.approx(sys.n - np.trace(H), rel=1e-8)


def test_stacked_blocks_repeat_one_fit():
    sys = _random_system(11, 7, 2)
    AY = smoother_matrix(sys, 1e-3) @ sys.Y
    np.testing.assert_allclose(AY[:7], AY[7:], atol=1e-10)


def test_gcv_properties():
    sys = _random_system(7, 8, 1)
    lam = 1e-3
    g = gcv(sys, lam)
    assert g >= 0 and np.isfinite(g)
    scaled = _build(sys.anchors, sys.w, 3.0 * sys.ybar, sys.V, sys.Phi)
    assert gcv(scaled, lam) == pytest.approx(9.0 * g, rel=1e-10)
    proj = _build(sys.anchors, sys.w, sys.Vw @ np.array([1.5, -0.3]), sys.V, sys.Phi)
    assert gcv(proj, 1e8) < 1e-16


def test_sigma2_exact_fit_and_permutation():
    sys = _random_system(8, 8, 1)
    exact = _build(sys.anchors, sys.w, sys.Vw @ np.array([0.2, 1.0]), sys.V, sys.Phi)
    assert sigma2_hat(exact, 1e-2) < 1e-20
    perm = np.random.default_rng(0).permutation(8)
    shuffled = _build(sys.anchors[perm], sys.w[perm], sys.ybar[perm], sys.V[perm], sys.Phi[np.ix_(perm, perm)])
    assert sigma2_hat(shuffled, 1e-3) == pytest.approx(sigma2_hat(sys, 1e-3), rel=1e-10)


def test_sigma2_recovers_noise_level():
    data = smooth_data(21, n=200, lo=0.0, hi=10.0, noise=0.1)
    res = select_lambda(data, identity_model(), SobolevCubic(*data.domain))
    s2 = sigma2_hat(res.system, res.lam)
    assert 0.005 <= s2 <= 0.02


def test_select_single_point_grid(identity_problem):
    data, model, kernel = identity_problem
    res = select_lambda(data, model, kernel, grid=[1e-3])
    assert res.lam == 1e-3 and len(res.curve) == 1
    assert res.estimate.lam == 1e-3


def test_select_rejects_bad_grid(identity_problem):
    data, model, kernel = identity_problem
    with pytest.raises(UsageError):
        select_lambda(data, model, kernel, grid=[])
    with pytest.raises(UsageError):
        select_lambda(data, model, kernel, grid=[1e-3, -1.0])


def test_select_all_failures_aggregate():
    model, s = builtin(1)
    data = sample_physical(s, 10, 0)
    with pytest.raises(CalibError, match="all fits failed"):
        select_lambda(data, model, SobolevCubic(*s.domain), grid=[1e-3, 1e-2], init=np.full((10, 1), np.nan))


def test_selected_lambda_interior():
    grid = default_grid()
    interior = 0
    for seed in range(100):
        data = smooth_data(seed, n=40)
        res = select_lambda(data, identity_model(), SobolevCubic(*data.domain), grid=grid)
        interior += grid[0] < res.lam < grid[-1]
    assert interior >= 90


def test_degenerate_smoother_raises():
    sys = _random_system(9, 2, 1)  # two points: F2 is empty, tr(I - A) = 0
    with pytest.raises(NumericError):
        gcv(sys, 1e-3)
