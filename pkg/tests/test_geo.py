import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcfusion.geo import (BANDS, C_LIGHT, FrameOrigin, dcm_to_euler, dcm_to_quat, ecef_to_enu, enu_to_ecef,
                          euler_to_dcm, geodetic_to_ecef, get_band, quat_exp, quat_log, quat_mul,
                          quat_normalize, quat_to_dcm, skew, wavelength)

# Frozen from an independent closed-form WGS-84 script (explicit east/north/up unit vectors).
ORIGIN_DEG = (30.53, 114.36, 30.0)
ORIGIN_ECEF = (-2268028.648882607, 5009133.960425352, 3221134.979743358)
POINT_ECEF = (-2271091.717524472, 5006593.902225213, 3223090.38038931)
POINT_ENU = (3838.0634051846096, 2217.9542718412995, 88.4590123235622)

finite = st.floats(-10.0, 10.0, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


def _origin():
    return FrameOrigin(np.deg2rad(ORIGIN_DEG[0]), np.deg2rad(ORIGIN_DEG[1]), ORIGIN_DEG[2])


def test_origin_maps_to_zero():
    o = _origin()
    np.testing.assert_allclose(o.ecef, ORIGIN_ECEF, atol=1e-6)
    np.testing.assert_allclose(ecef_to_enu(o.ecef, o), 0.0, atol=1e-9)


def test_enu_against_frozen_oracle():
    np.testing.assert_allclose(ecef_to_enu(np.array(POINT_ECEF), _origin()), POINT_ENU, atol=1e-6)


def test_origin_validation():
    with pytest.raises(ValueError):
        FrameOrigin(2.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        FrameOrigin(0.0, 4.0, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.floats(-5e4, 5e4)] * 3))
def test_enu_round_trip(p):
    o = _origin()
    p = np.array(p)
    np.testing.assert_allclose(ecef_to_enu(enu_to_ecef(p, o), o), p, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.floats(-5e4, 5e4)] * 3), st.tuples(*[st.floats(-5e4, 5e4)] * 3))
def test_enu_preserves_distance(a, b):
    o = _origin()
    a = o.ecef + np.array(a)
    b = o.ecef + np.array(b)
    d = np.linalg.norm(a - b)
    d_enu = np.linalg.norm(ecef_to_enu(a, o) - ecef_to_enu(b, o))
    assert abs(d_enu - d) <= 1e-9 * max(d, 1.0)


def test_geodetic_ecef_round_trip():
    from tcfusion.geo import ecef_to_geodetic
    lat, lon, h = ecef_to_geodetic(geodetic_to_ecef(0.5, 2.0, 123.0))
    assert lat == pytest.approx(0.5, abs=1e-12)
    assert lon == pytest.approx(2.0, abs=1e-12)
    assert h == pytest.approx(123.0, abs=1e-6)


def test_skew_examples():
    np.testing.assert_array_equal(skew(np.zeros(3)), np.zeros((3, 3)))
    np.testing.assert_array_equal(skew([1.0, 0.0, 0.0]) @ [0.0, 1.0, 0.0], [0.0, 0.0, 1.0])


@given(vec3, vec3)
def test_skew_is_cross_product(v, w):
    np.testing.assert_allclose(skew(v) @ w, np.cross(v, w), atol=1e-12)
    np.testing.assert_array_equal(skew(v).T, -skew(v))


def test_wavelengths():
    assert wavelength(get_band("GPS", "L1")) == pytest.approx(0.19029367279836487, rel=1e-15)
    assert wavelength(("GPS", "L2")) == pytest.approx(0.24421021342456825, rel=1e-15)
    for band in BANDS.values():
        assert band.wavelength * band.frequency == pytest.approx(C_LIGHT, rel=1e-15)
    with pytest.raises(KeyError):
        wavelength(("GPS", "L9"))


@settings(max_examples=50)
@given(vec3, vec3)
def test_rotation_compositions_stay_orthonormal(a, b):
    q = quat_normalize(quat_mul(quat_exp(a), quat_exp(b)))
    for _ in range(20):
        q = quat_normalize(quat_mul(q, quat_exp(b)))
    R = quat_to_dcm(q)
    assert abs(np.linalg.norm(q) - 1.0) < 1e-12
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


@given(st.tuples(st.floats(-3.0, 3.0), st.floats(-1.5, 1.5), st.floats(-3.1, 3.1)))
def test_euler_round_trip(e):
    R = euler_to_dcm(*e)
    np.testing.assert_allclose(dcm_to_euler(R), e, atol=1e-9)
    np.testing.assert_allclose(quat_to_dcm(dcm_to_quat(R)), R, atol=1e-12)


@given(st.tuples(*[st.floats(-3.0, 3.0)] * 3).map(np.array))
def test_quat_exp_log(v):
    if np.linalg.norm(v) >= np.pi:
        return
    np.testing.assert_allclose(quat_log(quat_exp(v)), v, atol=1e-9)
