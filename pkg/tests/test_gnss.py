import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcfusion.gnss import (ELEVATION_CUTOFF, GnssObservation, RtkState, geometric_range, pdop, predict_sd,
                           single_difference, weight_variance)


def obs(elev_deg=90.0, snr=50.0, sat="G01", system="GPS", band="L1", P=2.2e7, L=2.2e7):
    return GnssObservation(0.0, sat, system, band, P, L, snr, np.deg2rad(elev_deg), 0.0)


def test_geometric_range_examples():
    rho, los = geometric_range([0, 0, 0], [0, 0, 2e7])
    assert rho == 2e7
    np.testing.assert_array_equal(los, [0, 0, 1])
    with pytest.raises(ValueError):
        geometric_range([1, 2, 3], [1, 2, 3])


@given(st.tuples(*[st.floats(-1e6, 1e6)] * 3))
def test_geometric_range_translation_invariant(d):
    a, b = np.array([10.0, -20.0, 5.0]), np.array([1.2e7, 1.5e7, 1.9e7])
    assert geometric_range(a + d, b + d)[0] == pytest.approx(geometric_range(a, b)[0], rel=1e-12)


def test_range_gradient_is_minus_los():
    a, b = np.array([100.0, 200.0, 30.0]), np.array([1.2e7, -1.5e7, 1.9e7])
    _, los = geometric_range(a, b)
    h = 10.0  # truncation error ~ (h / range)^2, roundoff ~ eps * range / h
    g = [(geometric_range(a + h * e, b)[0] - geometric_range(a - h * e, b)[0]) / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(g, -los, atol=1e-8)


SAT = np.array([1.1e7, 1.3e7, 2.0e7])
BASE = np.array([3000.0, 4000.0, 0.0])


def test_predict_sd_zero_states_and_linearity():
    rtk = RtkState(amb={("G01", "L1"): 0.0})
    rover = np.array([10.0, -5.0, 2.0])
    drho = geometric_range(rover, SAT)[0] - geometric_range(BASE, SAT)[0]
    P, L, _ = predict_sd(rtk, rover, BASE, SAT, "G01", "GPS", "L1")
    assert P == L == pytest.approx(drho, abs=1e-9)
    rtk.clock = 5.0
    P5, L5, _ = predict_sd(rtk, rover, BASE, SAT, "G01", "GPS", "L1")
    assert P5 - P == pytest.approx(5.0, abs=1e-9)
    assert L5 - L == pytest.approx(5.0, abs=1e-9)
    with pytest.raises(KeyError):
        predict_sd(rtk, rover, BASE, SAT, "G02", "GPS", "L1")


def test_predict_sd_rows_match_finite_differences():
    rover = np.array([10.0, -5.0, 2.0])
    rtk = RtkState(clock=3.0, ifb={("GPS", "L2"): 1.5}, amb={("G01", "L2"): 12.3})
    P, L, rows = predict_sd(rtk, rover, BASE, SAT, "G01", "GPS", "L2")
    h = 10.0
    for i, e in enumerate(np.eye(3)):
        fd = (predict_sd(rtk, rover + h * e, BASE, SAT, "G01", "GPS", "L2")[0]
              - predict_sd(rtk, rover - h * e, BASE, SAT, "G01", "GPS", "L2")[0]) / (2 * h)
        assert fd == pytest.approx(rows["pos"][i], abs=1e-8)

    def bump(**kw):
        r = RtkState(clock=rtk.clock + kw.get("clock", 0.0),
                     ifb={("GPS", "L2"): 1.5 + kw.get("ifb", 0.0)},
                     amb={("G01", "L2"): 12.3 + kw.get("amb", 0.0)})
        return predict_sd(r, rover, BASE, SAT, "G01", "GPS", "L2")

    assert (bump(clock=h)[0] - bump(clock=-h)[0]) / (2 * h) == pytest.approx(rows["clock"], abs=1e-8)
    assert (bump(ifb=h)[0] - bump(ifb=-h)[0]) / (2 * h) == pytest.approx(rows["ifb"], abs=1e-8)
    assert (bump(amb=h)[1] - bump(amb=-h)[1]) / (2 * h) == pytest.approx(rows["amb"], abs=1e-8)
    # reference band carries no IFB column
    rtk.amb[("C01", "B1I")] = 0.0
    assert predict_sd(rtk, rover, BASE, SAT, "C01", "BDS", "B1I")[2]["ifb"] == 0.0


def test_weight_variance_examples():
    assert weight_variance(obs(90.0), "elev", 0.3) == pytest.approx(0.09)
    assert weight_variance(obs(30.0), "elev", 0.3) == pytest.approx(4 * 0.09)
    assert weight_variance(obs(90.0, snr=50.0), "hybrid", 0.3) == pytest.approx(0.09)
    assert weight_variance(obs(90.0, snr=40.0), "snr", 0.3) == pytest.approx(0.9)
    with pytest.raises(ValueError):
        weight_variance(obs(0.0), "elev", 0.3)
    with pytest.raises(ValueError):
        weight_variance(obs(), "bogus", 0.3)


@settings(max_examples=50)
@given(st.sampled_from(["snr", "elev", "hybrid"]), st.floats(5.0, 89.0), st.floats(0.1, 5.0),
       st.floats(20.0, 55.0), st.floats(0.1, 10.0))
def test_weight_variance_monotone(model, el, d_el, snr, d_snr):
    base = weight_variance(obs(el, snr), model, 0.3)
    assert weight_variance(obs(min(el + d_el, 90.0), snr), model, 0.3) <= base * (1 + 1e-12)
    assert weight_variance(obs(el, snr + d_snr), model, 0.3) <= base * (1 + 1e-12)


def test_single_difference_matching_and_cutoff():
    rover = [obs(45, sat="G01", P=2.0e7 + 5, L=2.0e7 + 7), obs(5, sat="G02"), obs(45, sat="G03")]
    base = [obs(45, sat="G01", P=2.0e7, L=2.0e7), obs(5, sat="G02")]
    sd = single_difference(rover, base)
    assert [s.sat for s in sd] == ["G01"]
    assert sd[0].dP == pytest.approx(5.0) and sd[0].dL == pytest.approx(7.0)
    assert np.deg2rad(5) < ELEVATION_CUTOFF


def test_observation_validation():
    with pytest.raises(ValueError):
        obs(P=-1.0)
    with pytest.raises(ValueError):
        obs(elev_deg=95.0)


def test_pdop_needs_four():
    assert pdop(np.eye(3)) == np.inf
    los = np.array([[0, 0, 1], [0.7, 0, 0.7], [0, 0.7, 0.7], [-0.7, 0, 0.7], [0, -0.7, 0.7]], dtype=float)
    los /= np.linalg.norm(los, axis=1, keepdims=True)
    assert 1.0 < pdop(los) < 10.0
