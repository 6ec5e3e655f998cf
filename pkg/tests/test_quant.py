import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gsvr.quant import (ATTRIBUTE_CLASS, BitPlan, channel_ranges, channel_view, dequantize_array, dequantize_minmax,
                        fake_quantize, quantize_array, quantize_minmax, round_half_away)


def test_bitplan_defaults_and_validation():
    p = BitPlan()
    assert (p.position, p.color, p.other, p.plane) == (16, 16, 8, 16)
    assert p.bits_for("mu") == 16 and p.bits_for("poly") == 8 and p.bits_for("plane_xt") == 16
    assert set(ATTRIBUTE_CLASS) == {"mu", "s_raw", "theta_raw", "color", "poly", "alpha_raw",
                                    "plane_xy", "plane_xt", "plane_yt"}
    with pytest.raises(ValueError):
        BitPlan(position=12)


def test_round_half_away():
    np.testing.assert_array_equal(round_half_away(np.array([0.5, 1.5, 2.5, -0.5, 127.5])), [1, 2, 3, -1, 128])


def test_quantize_examples():
    codes, lo, hi = quantize_minmax([0.0, 0.5, 1.0], 8)
    assert codes.tolist() == [0, 128, 255] and (lo, hi) == (0.0, 1.0)
    codes, _, _ = quantize_minmax([-3.0, 7.0], 16)
    assert codes.tolist() == [0, 65535] and codes.dtype == np.uint16


def test_degenerate_range():
    codes, lo, hi = quantize_minmax([2.5, 2.5, 2.5], 8)
    assert not codes.any() and lo == hi == 2.5
    np.testing.assert_array_equal(dequantize_minmax(codes, 8, lo, hi), [2.5] * 3)


def test_quantize_errors():
    with pytest.raises(ValueError):
        quantize_minmax([0.0, np.nan], 8)
    with pytest.raises(ValueError):
        quantize_minmax([0.0, 1.0], 12)


@given(hnp.arrays(np.float64, st.integers(1, 200), elements=st.floats(-1e3, 1e3)), st.sampled_from([8, 16]))
def test_round_trip_within_half_step(values, bits):
    codes, lo, hi = quantize_minmax(values, bits)
    back = dequantize_minmax(codes, bits, lo, hi, np.float64)
    half = (hi - lo) / ((1 << bits) - 1) / 2
    # float64 rounding of the affine maps is the only slack beyond the half step
    assert np.all(np.abs(back - values) <= half + 8 * np.finfo(float).eps * max(1.0, abs(lo), abs(hi)))


def test_position_half_step_over_unit_range():
    v = np.linspace(-1, 1, 100_001)
    codes, lo, hi = quantize_minmax(v, 16, -1.0, 1.0)
    err = np.abs(dequantize_minmax(codes, 16, lo, hi, np.float64) - v)
    assert err.max() <= 2 / (2 ** 16 - 1) / 2 + 1e-15


def test_ranges_are_outward_float32():
    arr = np.array([[0.1, -0.30000001], [0.7, 0.2]])
    r = channel_ranges("mu", arr)
    assert r.dtype == np.float32
    assert np.all(r[:, 0].astype(np.float64) <= arr.min(axis=0))
    assert np.all(r[:, 1].astype(np.float64) >= arr.max(axis=0))


@pytest.mark.parametrize("name,shape", [("mu", (50, 2)), ("poly", (50, 3, 2)), ("theta_raw", (50,)),
                                        ("plane_xy", (8, 6, 4))])
def test_array_round_trip(rng, name, shape):
    arr = rng.normal(size=shape).astype(np.float32)
    bits = BitPlan().bits_for(name)
    codes, ranges = quantize_array(name, arr, bits)
    back = dequantize_array(name, codes, ranges, bits, shape, np.float64)
    steps = (ranges[:, 1].astype(np.float64) - ranges[:, 0]) / ((1 << bits) - 1)
    err = np.abs(channel_view(name, back) - channel_view(name, arr))
    assert np.all(err <= steps[:, None] / 2 + 1e-12)


def test_fake_quantize_changes_values_except_at_32_bits(rng):
    params = {"mu": rng.uniform(-1, 1, (20, 2)).astype(np.float32),
              "plane_xy": rng.normal(size=(8, 4, 4)).astype(np.float32)}
    once = fake_quantize(params, BitPlan())
    assert once["mu"].dtype == np.float32
    assert not np.array_equal(once["mu"], params["mu"])
    lossless = fake_quantize(params, BitPlan.lossless())
    assert lossless["mu"] is params["mu"]
