import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gsvr.gaussian import (DegenerateGaussianError, Gaussians, InvalidParameterError, activate_attributes,
                           build_covariance, gaussian_weight, invert_covariance, sigmoid)

mp.mp.dps = 40
finite = st.floats(-20, 20, allow_nan=False)


def mp_covariance(scale, theta):
    c, s = mp.cos(theta), mp.sin(theta)
    R = mp.matrix([[c, -s], [s, c]])
    S = mp.matrix([[scale[0], 0], [0, scale[1]]])
    return R * S * S.T * R.T


def test_covariance_axis_aligned():
    np.testing.assert_array_equal(build_covariance(np.array([2.0, 3.0]), 0.0), [[4, 0], [0, 9]])


def test_covariance_quarter_turn():
    np.testing.assert_allclose(build_covariance(np.array([2.0, 3.0]), np.pi / 2), [[9, 0], [0, 4]], atol=1e-12)


def test_covariance_matches_matrix_product():
    ref = mp_covariance((1, 2), mp.pi / 6)
    got = build_covariance(np.array([1.0, 2.0]), np.pi / 6)
    for i in range(2):
        for j in range(2):
            assert got[i, j] == pytest.approx(float(ref[i, j]), abs=1e-14)


def test_covariance_rejects_bad_input():
    with pytest.raises(InvalidParameterError):
        build_covariance(np.array([np.nan, 1.0]), 0.0)
    with pytest.raises(InvalidParameterError):
        build_covariance(np.array([1.0, 1.0]), np.inf)
    with pytest.raises(InvalidParameterError):
        build_covariance(np.array([0.0, 1.0]), 0.0)


@given(finite, finite, finite)
def test_covariance_spd(sx_raw, sy_raw, theta_raw):
    sx, sy = math.exp(sx_raw / 4), math.exp(sy_raw / 4)
    cov = build_covariance(np.array([sx, sy]), math.pi * math.tanh(theta_raw))
    assert cov[0, 1] == cov[1, 0]
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2
    assert det == pytest.approx((sx * sy) ** 2, rel=1e-6, abs=1e-300)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_weight_at_centre_is_one():
    cov = build_covariance(np.array([0.3, 0.7]), 0.4)
    assert gaussian_weight(cov, np.array([0.1, -0.2]), np.array([0.1, -0.2])) == 1.0


def test_weight_unit_isotropic():
    assert gaussian_weight(np.eye(2), np.zeros(2), np.array([1.0, 0.0])) == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert math.exp(-0.5) == pytest.approx(0.6065, abs=1e-4)


def test_weight_matches_closed_form_inverse():
    cov = mp_covariance((mp.mpf("0.5"), mp.mpf("0.25")), mp.pi / 4)
    inv = cov ** -1
    d = mp.matrix([[mp.mpf("0.1")], [mp.mpf("0.2")]])
    ref = mp.exp(-(d.T * inv * d)[0] / 2)
    got = gaussian_weight(build_covariance(np.array([0.5, 0.25]), np.pi / 4), np.zeros(2), np.array([0.1, 0.2]))
    assert got == pytest.approx(float(ref), rel=1e-12)


@given(st.floats(0, 2 * math.pi), st.floats(-math.pi, math.pi), st.floats(0.1, 5), st.floats(0.1, 5),
       st.floats(-3, 3), st.floats(-3, 3))
def test_weight_rotation_invariant(phi, theta, sx, sy, dx, dy):
    cov = build_covariance(np.array([sx, sy]), theta)
    R = np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])
    d = np.array([dx, dy])
    a = gaussian_weight(cov, np.zeros(2), d)
    b = gaussian_weight(R @ cov @ R.T, np.zeros(2), R @ d)
    assert b == pytest.approx(a, abs=1e-10)


def test_invert_rejects_degenerate():
    with pytest.raises(DegenerateGaussianError):
        invert_covariance(np.diag([1e-7, 1e-7]))


def test_sigmoid_extremes():
    x = np.array([-1000.0, -50.0, 0.0, 50.0, 1000.0])
    y = sigmoid(x)
    assert np.all(np.isfinite(y))
    assert y[2] == 0.5
    assert y[0] == 0.0 and y[-1] == 1.0
    assert 0 < y[1] < 1e-20


def _gaussians(n=3, rng=None):
    rng = rng or np.random.default_rng(0)
    return Gaussians(rng.uniform(-1, 1, (n, 2)), rng.normal(0, 1, (n, 2)), rng.normal(0, 3, n),
                     rng.normal(0, 1, (n, 3)), np.zeros((n, 3, 2)), rng.normal(0, 1, n))


def test_activation_ranges():
    g = _gaussians(200)
    assert np.all(g.scale > 0)
    assert np.all(np.abs(g.theta) < math.pi)
    assert np.all((g.alpha > 0) & (g.alpha < 1))


def test_activate_identity_with_zero_deltas():
    g = _gaussians()
    d = activate_attributes(g, np.zeros((3, 8)))
    np.testing.assert_array_equal(d.scale, np.exp(g.s_raw))
    np.testing.assert_array_equal(d.theta, math.pi * np.tanh(g.theta_raw))
    np.testing.assert_array_equal(d.color, g.color)
    np.testing.assert_array_equal(d.mu, g.mu)


def test_activate_scale_delta():
    g = _gaussians(1)
    g.s_raw[:] = 0.0
    deltas = np.zeros((1, 8))
    deltas[0, 2:4] = (0.1, -0.2)
    np.testing.assert_allclose(activate_attributes(g, deltas).scale[0], [1.1, 0.8], rtol=1e-15)


def test_activate_rotation_delta():
    g = _gaussians(1)
    g.theta_raw[:] = 10.0
    deltas = np.zeros((1, 8))
    deltas[0, 4] = 0.05
    ref = mp.pi * mp.tanh(10) + mp.mpf("0.05")
    assert activate_attributes(g, deltas).theta[0] == pytest.approx(float(ref), rel=1e-15)


def test_activate_clamps_scale():
    g = _gaussians(1)
    deltas = np.zeros((1, 8))
    deltas[0, 2] = -100.0
    assert activate_attributes(g, deltas).scale[0, 0] == 1e-6
