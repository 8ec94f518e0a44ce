import math

import numpy as np
import pytest

from bandlimit import kernels as K
from bandlimit.oracle import quadrature_atomic

RTOL = 1e-6
ATOL = 1e-9

# generic grid for ops defined on all of R
_X_ANY = [-2.1, -0.7, 0.0, 0.6, 1.8]
_SIG_ANY = [0.12, 0.45, 1.1]


def _pairs(op: str, kernel: str):
    """In-domain (x, sigma) pairs: compact supports stay clear of the op's
    singularities, matching how the compact rule truncates before calling."""
    if op in ("recip", "sqrt", "log"):
        xs = [0.4, 0.9, 1.7, 3.2] + ([-1.3, -2.6] if op == "recip" else [])
        return [(x, frac * abs(x) / K.SQRT6)
                for x in xs for frac in (0.25, 0.6, 0.95)]
    if op == "tan":
        return [(x, frac * (math.pi / 2 - abs(x)) / K.SQRT6)
                for x in (-1.1, -0.4, 0.0, 0.3, 0.9)
                for frac in (0.25, 0.6, 0.95)]
    if op in ("sinh", "cosh", "exp") and kernel == "gaussian":
        # keep exp(2x + 2s^2) in comfortable float range
        return [(x, s) for x in _X_ANY for s in (0.12, 0.45, 0.9)]
    return [(x, s) for x in _X_ANY for s in _SIG_ANY]


def _closed_form(op, power, kernel, x, sigma, want_square):
    if kernel == "gaussian":
        # read the table entry directly: mean may exist without the square
        fo = K.forms(op, power)
        fn = fo.g_square if want_square else fo.g_mean
        return float(fn(x, sigma))
    got = K.smooth_atomic(op, kernel, x, sigma, power=power)
    return float(got.square if want_square else got.mean)


def _check_row(op, power, kernel, want_square):
    for x, sigma in _pairs(op, kernel):
        val = _closed_form(op, power, kernel, x, sigma, want_square)
        ref = quadrature_atomic(op, kernel, x, sigma,
                                want_square=want_square, power=power)
        assert math.isclose(val, ref, rel_tol=RTOL, abs_tol=ATOL), (
            f"{op}(p={power}) {kernel} {'square' if want_square else 'mean'} "
            f"at x={x} sigma={sigma}: closed={val} quad={ref}")


@pytest.mark.parametrize("op,power,kernel", K.TABLE_ROWS,
                         ids=lambda v: str(v))
def test_table_mean_matches_quadrature(op, power, kernel):
    _check_row(op, power, kernel, want_square=False)


@pytest.mark.parametrize("op,power,kernel", K.TABLE_ROWS,
                         ids=lambda v: str(v))
def test_table_square_matches_quadrature(op, power, kernel):
    if kernel == "gaussian" and not K.has_gaussian(op, power,
                                                   want_square=True):
        with pytest.raises(K.NoClosedForm):
            K.gaussian_mean_square(op, 0.5, 0.1, power)
        return
    _check_row(op, power, kernel, want_square=True)


def test_second_moment_dominates_squared_mean():
    for op, power, kernel in K.TABLE_ROWS:
        for x, sigma in _pairs(op, kernel):
            if kernel == "gaussian" and not K.has_gaussian(op, power):
                continue
            got = K.smooth_atomic(op, kernel, x, sigma, power=power)
            assert float(got.square) - float(got.mean) ** 2 >= -1e-9, (
                op, power, kernel, x, sigma)


def test_sigma_zero_is_exact_evaluation():
    for op, power, kernel in K.TABLE_ROWS:
        x = 0.7 if op in ("recip", "sqrt", "log", "tan") else -1.3
        got = K.smooth_atomic(op, kernel, x, 0.0, power=power)
        f = K.forms(op, power).f
        assert float(got.mean) == pytest.approx(float(f(x)), abs=0)
        assert float(got.square) == pytest.approx(float(f(x)) ** 2, abs=0)


def test_hermite_matches_explicit_normal_moments():
    x, s = 1.3, 0.7
    a = -s * s
    assert K.hermite_generalized(0, a, x) == pytest.approx(1.0)
    assert K.hermite_generalized(1, a, x) == pytest.approx(x)
    assert K.hermite_generalized(2, a, x) == pytest.approx(x * x + s * s)
    assert K.hermite_generalized(3, a, x) == pytest.approx(
        x ** 3 + 3 * x * s * s)
    assert K.hermite_generalized(4, a, x) == pytest.approx(
        x ** 4 + 6 * x * x * s * s + 3 * s ** 4)
    # alpha = 0 collapses to plain powers
    assert K.hermite_generalized(6, 0.0, 2.0) == pytest.approx(64.0)
    with pytest.raises(ValueError):
        K.hermite_generalized(9, a, x)


def test_periodic_antiderivative_assembly():
    spec = K.fract_period_spec()
    xs = np.array([-3.25, -0.5, 0.0, 0.75, 2.5, 6.1])
    F, F2 = K.periodic_antiderivatives(spec, xs)
    np.testing.assert_allclose(F, K._F1_fract(xs), atol=1e-12)
    np.testing.assert_allclose(F2, K._F2_fract(xs), atol=1e-12)
    # the worked example: two whole periods contribute 2 * 1/2, the
    # residual half-period contributes 0.5^2 / 2
    assert float(K.periodic_antiderivatives(spec, 2.5)[0]) == \
        pytest.approx(1.125)


def test_periodic_antiderivatives_are_smooth_at_integers():
    spec = K.fract_square_period_spec()
    eps = 1e-7
    for k in (-2.0, 0.0, 3.0):
        Fm, F2m = K.periodic_antiderivatives(spec, k - eps)
        Fp, F2p = K.periodic_antiderivatives(spec, k + eps)
        assert abs(Fp - Fm) < 1e-6          # F continuous
        assert abs(F2p - F2m) < 1e-6        # F2 continuous
        # F2' = F: central difference of F2 agrees with F at the joint
        F0, F20 = K.periodic_antiderivatives(spec, k)
        assert (F2p - F2m) / (2 * eps) == pytest.approx(float(F0), abs=1e-5)


def test_smooth_periodic_agrees_with_fract_row():
    for x in (-1.7, 0.2, 3.9):
        for sigma in (0.1, 0.6):
            want = K.smooth_atomic("fract", "box", x, sigma)
            got_mean = K.smooth_periodic(K.fract_period_spec(), "box",
                                         x, sigma)
            got_sq = K.smooth_periodic(K.fract_square_period_spec(), "box",
                                       x, sigma)
            assert float(got_mean) == pytest.approx(float(want.mean),
                                                    rel=1e-12)
            assert float(got_sq) == pytest.approx(float(want.square),
                                                  rel=1e-12)
            want_t = K.smooth_atomic("fract", "tent", x, sigma)
            got_t = K.smooth_periodic(K.fract_period_spec(), "tent",
                                      x, sigma)
            assert float(got_t) == pytest.approx(float(want_t.mean),
                                                 rel=1e-10)


def test_tent_matches_quadrature_spot_checks():
    cases = [("powi", 2), ("powi", 5), ("sin", None), ("floor", None),
             ("heaviside", None), ("fract", None), ("exp", None)]
    for op, power in cases:
        for x, sigma in ((0.35, 0.3), (-1.2, 0.8)):
            got = K.smooth_atomic(op, "tent", x, sigma, power=power)
            for want_square, val in ((False, got.mean), (True, got.square)):
                ref = quadrature_atomic(op, "tent", x, sigma,
                                        want_square=want_square, power=power)
                assert math.isclose(float(val), ref,
                                    rel_tol=1e-6, abs_tol=1e-9), (
                    op, power, x, sigma, want_square)


def test_missing_forms_raise():
    for op in ("recip", "sqrt", "log", "tan", "tanh", "fract", "floor",
               "ceil"):
        assert not K.has_gaussian(op)
        with pytest.raises(K.NoClosedForm):
            K.gaussian_mean_square(op, 1.0, 0.1)
    for op in ("tan", "tanh"):
        assert not K.has_tent(op)
        with pytest.raises(K.NoClosedForm):
            K.tent_interval(op, 0.2, 0.05)
    assert K.has_tent("sin") and K.has_tent("floor")
    assert K.has_gaussian("powi", 4, want_square=True)
    assert not K.has_gaussian("powi", 5, want_square=True)
    assert K.has_gaussian("powi", 8, want_square=False)
    with pytest.raises(ValueError):
        K.forms("powi", 9)
    with pytest.raises(ValueError):
        K.forms("sin", 2)
    with pytest.raises(ValueError):
        K.forms("madeup")
    with pytest.raises(ValueError):
        K.kernel_halfwidth("gaussian", 0.5)


def test_singularity_distance():
    np.testing.assert_allclose(K.singularity_distance("recip", [-2.0, 0.5]),
                               [2.0, 0.5])
    assert float(K.singularity_distance("tan", 0.0)) == \
        pytest.approx(math.pi / 2)
    assert float(K.singularity_distance("tan", math.pi / 2 + 0.1)) == \
        pytest.approx(0.1)
    assert np.isinf(K.singularity_distance("sin", 1000.0))
    np.testing.assert_allclose(K.singularity_distance("log", [-3.0, 2.0]),
                               [0.0, 2.0])


def test_degenerate_interval_collapses_to_midpoint():
    m, s = K.box_interval("sin", 1.0, 1.0 + 1e-16)
    assert float(m) == pytest.approx(math.sin(1.0), rel=1e-12)
    assert float(s) == pytest.approx(math.sin(1.0) ** 2, rel=1e-12)
    m, s = K.tent_interval("exp", -0.5, 0.0)
    assert float(m) == pytest.approx(math.exp(-0.5), rel=1e-12)


def test_heaviside_zero_convention():
    f = K.forms("heaviside").f
    assert float(f(0.0)) == 0.0 and float(f(1e-12)) == 1.0
    # gaussian mean at the step is exactly one half regardless of convention
    m, _ = K.gaussian_mean_square("heaviside", 0.0, 0.3)
    assert float(m) == pytest.approx(0.5)


def test_ceil_is_reflected_floor():
    xs = np.linspace(-3.2, 3.2, 7)
    for sigma in (0.2, 0.7):
        c = K.smooth_atomic("ceil", "box", xs, sigma)
        fl = K.smooth_atomic("floor", "box", -xs, sigma)
        np.testing.assert_allclose(np.asarray(c.mean),
                                   -np.asarray(fl.mean), atol=1e-10)
        np.testing.assert_allclose(np.asarray(c.square),
                                   np.asarray(fl.square), atol=1e-10)
