import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bayespk import autodiff as ad
from bayespk.autodiff import Dual, NonFiniteGradient, NonFiniteValue, gradient

finite = st.floats(-3.0, 3.0)
positive = st.floats(0.1, 5.0)


def fd_grad(f, x, rel_h=1e-5):
    """Central differences with h = rel_h * max(1, |x_i|)."""
    x = np.asarray(x, float)
    g = np.empty_like(x)
    for i in range(x.size):
        h = rel_h * max(1.0, abs(x[i]))
        up, dn = x.copy(), x.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2 * h)
    return g


def d1(f, x):
    """Derivative of a scalar function via one seeded direction."""
    out = f(Dual(np.float64(x), np.ones(1)))
    return float(out.der[0])


def test_hand_derivative():
    v, g = gradient(lambda x: x[0] * x[1] + ad.sin(x[0]), [0.0, 3.0])
    assert v == 0.0
    np.testing.assert_allclose(g, [4.0, 0.0], atol=0)


def test_constant_function_zero_gradient():
    v, g = gradient(lambda x: 7.5, [1.0, 2.0, 3.0])
    assert v == 7.5 and np.array_equal(g, np.zeros(3))


def test_chunked_equals_unchunked():
    f = lambda x: ad.asum(ad.exp(0.1 * x) * ad.log(1.0 + x * x))
    x = np.linspace(0.1, 2.0, 19)
    _, g_all = gradient(f, x)
    _, g_8 = gradient(f, x, chunk_size=8)
    np.testing.assert_array_equal(g_all, g_8)


def test_nonfinite_value_and_gradient():
    with pytest.raises(NonFiniteValue):
        gradient(lambda x: ad.log(x[0]), [-1.0])
    with pytest.raises(NonFiniteGradient):
        gradient(lambda x: ad.sqrt(x[0]), [0.0])


@given(a=finite, b=positive)
def test_arithmetic_chain_rule(a, b):
    cases = [
        (lambda x: x + b, 1.0),
        (lambda x: b - x, -1.0),
        (lambda x: x * x * b, 2 * a * b),
        (lambda x: b / (x * x + 1.0), -2 * a * b / (a * a + 1) ** 2),
        (lambda x: ad.exp(x * b), b * math.exp(a * b)),
        (lambda x: ad.sin(x) * ad.cos(x), math.cos(2 * a)),
    ]
    for f, expect in cases:
        assert d1(f, a) == pytest.approx(expect, rel=1e-12, abs=1e-12)


@given(x=positive, p=st.floats(-2.0, 2.0))
def test_log_pow_sqrt(x, p):
    assert d1(ad.log, x) == pytest.approx(1 / x, rel=1e-14)
    assert d1(ad.sqrt, x) == pytest.approx(0.5 / math.sqrt(x), rel=1e-14)
    assert d1(lambda z: z ** p, x) == pytest.approx(p * x ** (p - 1), rel=1e-12)
    assert d1(lambda z: p ** 2 + 0.5 ** z, x) == pytest.approx(math.log(0.5) * 0.5 ** x, rel=1e-12)


def test_min_max_subgradient_at_ties():
    # at a tie the first argument's derivative is used
    assert d1(lambda z: ad.fmin(z, 1.0), 1.0) == 1.0
    assert d1(lambda z: ad.fmin(1.0, z), 1.0) == 0.0
    assert d1(lambda z: ad.fmax(z * 2.0, 2.0), 1.0) == 2.0
    assert d1(lambda z: ad.fmax(z, 5.0), 1.0) == 0.0


@given(y=positive, mu=finite, s=positive)
def test_lognormal_kernel_gradient(y, mu, s):
    f = lambda x: ad.lognormal_lpdf(x[0], x[1], x[2])
    v, g = gradient(f, [y, mu, s])
    from scipy.stats import lognorm
    assert v == pytest.approx(lognorm.logpdf(y, s, scale=math.exp(mu)), rel=1e-12, abs=1e-12)
    z = (math.log(y) - mu) / s
    np.testing.assert_allclose(g, [-(z / s + 1) / y, z / s, (z * z - 1) / s], rtol=1e-10, atol=1e-12)


@given(x=finite, mu=finite, s=positive)
def test_normal_kernel(x, mu, s):
    from scipy.stats import norm
    v, g = gradient(lambda t: ad.normal_lpdf(t[0], t[1], t[2]), [x, mu, s])
    assert v == pytest.approx(norm.logpdf(x, mu, s), rel=1e-12, abs=1e-12)
    z = (x - mu) / s
    np.testing.assert_allclose(g, [-z / s, z / s, (z * z - 1) / s], rtol=1e-10, atol=1e-12)


@given(x=st.floats(-1e-3, 1e-3))
def test_exprel_smooth_through_zero(x):
    ref = 1.0 if x == 0 else math.expm1(x) / x
    assert float(ad.exprel(x)) == pytest.approx(ref, rel=1e-13)
    # d/dx exprel(x) -> 1/2 at 0
    expect = 0.5 if abs(x) < 1e-8 else (math.exp(x) * x - math.expm1(x)) / (x * x)
    assert d1(ad.exprel, x) == pytest.approx(expect, rel=1e-6)


def test_array_broadcasting_and_indexing():
    v = Dual.variable([1.0, 2.0, 3.0])
    y = ad.stack([v[0] * v[1], v[2] ** 2])
    assert y.der.shape == (2, 3)
    np.testing.assert_array_equal(y.der, [[2.0, 1.0, 0.0], [0.0, 0.0, 6.0]])
    np.testing.assert_array_equal(v[np.array([2, 0])].val, [3.0, 1.0])


def test_solve_and_matvec_derivatives():
    A0 = np.array([[3.0, 1.0], [1.0, 2.0]])
    b0 = np.array([1.0, -1.0])

    def f(x):
        A = ad.stack([ad.stack([x[0], x[1]]), ad.stack([x[1], x[2]])])
        sol = ad.solve(A, b0)
        return ad.asum(ad.matvec(A, sol) * sol)

    x0 = np.array([A0[0, 0], A0[0, 1], A0[1, 1]])
    _, g = gradient(f, x0)

    def fv(x):
        A = np.array([[x[0], x[1]], [x[1], x[2]]])
        s = np.linalg.solve(A, b0)
        return float((A @ s) @ s)

    np.testing.assert_allclose(g, fd_grad(fv, x0), rtol=1e-6)


@given(st.lists(st.floats(0.2, 4.0), min_size=2, max_size=6))
def test_random_composite_matches_finite_differences(xs):
    def f(x):
        return ad.asum(ad.log1p(x * x) * ad.exp(-0.3 * x)) + ad.sqrt(ad.asum(x * x)) / (1.0 + x[0])
    x = np.array(xs)
    _, g = gradient(f, x)
    fv = lambda z: float(f(z))
    np.testing.assert_allclose(g, fd_grad(fv, x), rtol=1e-6, atol=1e-8)
