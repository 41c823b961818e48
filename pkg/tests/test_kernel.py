import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from rkhs_calib.errors import DomainError, ParameterError
from rkhs_calib.kernel import (
    Matern,
    NullBasis,
    SobolevCubic,
    SquaredExponential,
    gram,
    kernel_eval,
    null_design,
    parse_kernel,
)


def _sympy_cubic(s, t):
    x = sp.Symbol("x")
    b2 = sp.bernoulli(2, x)
    b4 = sp.bernoulli(4, x)
    s, t = sp.Rational(s), sp.Rational(t)
    return float(b2.subs(x, s) * b2.subs(x, t) / 4 - b4.subs(x, abs(s - t)) / 24)


def test_matern_zero_distance_is_one():
    assert kernel_eval(Matern(0.5, 1.0), 0.3, 0.3) == 1.0


def test_matern_half_closed_form_at_unit_distance():
    assert kernel_eval(Matern(0.5, 1.0), 0.0, 1.0) == pytest.approx(np.exp(-np.sqrt(2)), abs=1e-12)
    assert kernel_eval(Matern(0.5, 1.0), 0.0, 1.0) == pytest.approx(0.243117, abs=1e-6)


@pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
def test_matern_closed_forms_match_bessel(nu):
    k = Matern(nu, 1.3)
    r = np.linspace(0.0, 5.0, 101)
    np.testing.assert_allclose(k.from_distance(r), k.from_distance(r, closed_form=False), rtol=0, atol=1e-10)


def test_matern_general_nu_against_direct_bessel():
    k = Matern(1.2, 0.7)
    r = np.array([0.1, 0.5, 2.0])
    z = 2 * np.sqrt(1.2) * 0.7 * r
    direct = z**1.2 * special.kv(1.2, z) / (special.gamma(1.2) * 2**0.2)
    np.testing.assert_allclose(k.from_distance(r), direct, rtol=1e-12)


@pytest.mark.parametrize("s,t", [("0", "0"), ("1/4", "1/4"), ("1/4", "3/4"), ("1/10", "9/10"), ("1/3", "1")])
def test_cubic_matches_symbolic_bernoulli(s, t):
    k = SobolevCubic()
    assert kernel_eval(k, float(sp.Rational(s)), float(sp.Rational(t))) == pytest.approx(_sympy_cubic(s, t), abs=1e-15)


def test_cubic_reference_values():
    # B2 = x^2 - x + 1/6, so k(0, 0) = 1/144 + 1/720 = 1/120
    k = SobolevCubic()
    assert kernel_eval(k, 0.0, 0.0) == pytest.approx(1 / 120, abs=1e-15)
    assert kernel_eval(k, 0.25, 0.25) == pytest.approx(0.25 * (1 / 16 - 1 / 4 + 1 / 6) ** 2 + 1 / 720, abs=1e-15)


def test_cubic_gram_two_points_symmetric_equal_diagonal():
    G = gram(SobolevCubic(), [0.25, 0.75])
    assert G.shape == (2, 2)
    assert G[0, 0] == pytest.approx(G[1, 1], abs=1e-15)
    assert G[0, 1] == G[1, 0]


def test_cubic_rescaled_domain():
    k = SobolevCubic(np.pi, 3 * np.pi)
    assert kernel_eval(k, 2 * np.pi, 2.5 * np.pi) == pytest.approx(kernel_eval(SobolevCubic(), 0.5, 0.75), abs=1e-15)


def test_cubic_outside_domain_raises():
    with pytest.raises(DomainError):
        kernel_eval(SobolevCubic(), 1.2, 0.5)


@pytest.mark.parametrize("ctor", [lambda: Matern(0.0, 1.0), lambda: Matern(1.0, -2.0),
                                  lambda: SquaredExponential((1.0, 0.0), 1.0), lambda: SquaredExponential((1.0,), 0.0),
                                  lambda: SobolevCubic(1.0, 1.0)])
def test_non_positive_parameters_rejected(ctor):
    with pytest.raises(ParameterError):
        ctor()


def test_gram_single_point():
    k = Matern(1.5, 2.0)
    np.testing.assert_array_equal(gram(k, [0.4]), [[1.0]])


def test_matern_gram_exactly_symmetric():
    pts = np.random.default_rng(0).uniform(size=(10, 2))
    G = gram(Matern(1.5, 1.0), pts)
    assert np.array_equal(G, G.T)


def test_squared_exponential_zero_distance_is_variance():
    k = SquaredExponential((0.5, 2.0), 3.0)
    assert kernel_eval(k, [0.1, 0.2], [0.1, 0.2]) == pytest.approx(3.0)


def test_null_design_examples():
    V = null_design(SobolevCubic().null_basis(), [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(V, [[1, -0.5], [1, 0], [1, 0.5]])
    assert null_design(NullBasis("linear"), []).shape == (0, 2)
    pts = np.random.default_rng(3).uniform(size=5)
    assert np.linalg.matrix_rank(null_design(SobolevCubic().null_basis(), pts)) == 2


def test_linear_function_in_null_space():
    x = np.linspace(0, 1, 17)
    V = null_design(SobolevCubic().null_basis(), x)
    coef, *_ = np.linalg.lstsq(V, x, rcond=None)
    assert np.max(np.abs(V @ coef - x)) < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=3, max_value=25), st.integers(min_value=0, max_value=10_000),
       st.sampled_from(["cubic", "matern:0.5:1.0", "matern:1.5:3.0", "matern:2.2:0.5"]))
def test_projected_gram_is_psd(n, seed, spec):
    pts = np.random.default_rng(seed).uniform(size=n)
    k = parse_kernel(spec)
    G = gram(k, pts)
    assert np.array_equal(G, G.T)
    V = null_design(k.null_basis(), pts)
    Q, _ = np.linalg.qr(V, mode="complete")
    F2 = Q[:, V.shape[1]:]
    eig = np.linalg.eigvalsh(F2.T @ G @ F2)
    assert eig.min() >= -1e-8 * max(np.trace(G), 1e-300)


def test_parse_kernel_grammar():
    k = parse_kernel("matern:1.5:2.0")
    assert isinstance(k, Matern) and k.nu == 1.5 and k.phi == 2.0
    c = parse_kernel("cubic", (1.0, 2.0))
    assert (c.lower, c.upper) == (1.0, 2.0)
    s = parse_kernel("sqexp:0.5,2:1.5")
    assert s.lengthscales == (0.5, 2.0) and s.variance == 1.5
    assert parse_kernel(s.spec) == s
    for bad in ("matern:1.5", "spline", "sqexp:a:1", "matern:0:1"):
        with pytest.raises(ParameterError):
            parse_kernel(bad)


def test_gram_jitter_scales_with_mean_diagonal():
    k = Matern(0.5, 1.0)
    G0, G1 = gram(k, [0.0, 1.0]), gram(k, [0.0, 1.0], jitter=1e-10)
    np.testing.assert_allclose(np.diag(G1 - G0), 1e-10)
