import numpy as np
import pytest

from tcfusion.edm import Classification, EdmReport, ObsClass, ObsReport
from tcfusion.filter import (Block, DataGapError, FilterState, LeverArm, antenna_position, augment_camera,
                             augment_rtk, camera_augment_jacobian, camera_pose_from_nav, ensure_clock, ensure_ifb,
                             gnss_blocks, inject, marginalize_camera, measurement_update, time_update)
from tcfusion.geo import GRAVITY, quat_exp, quat_log, quat_mul, quat_conj, wavelength
from tcfusion.gnss import SdObservation
from tcfusion.ins import ADIS16470, INS_DIM, POS, NavState, propagate_batch
from tcfusion.vision import StereoExtrinsics

EXT = StereoExtrinsics.forward_looking()
LEVER = LeverArm(np.array([0.3, -0.2, 1.1]))


def _nav(rng=None):
    if rng is None:
        return NavState()
    return NavState(q=quat_exp(rng.normal(size=3) * 0.5), v=rng.normal(size=3), p=rng.normal(size=3) * 5,
                    bg=rng.normal(size=3) * 1e-4, ba=rng.normal(size=3) * 1e-2)


def _random_spd(rng, n, scale=1.0):
    A = rng.normal(size=(n, n))
    return (A @ A.T + n * np.eye(n)) * scale


def _imu(n=11, dt=0.01):
    t = np.arange(n) * dt
    return t, np.tile([0.01, -0.02, 0.1], (n, 1)), np.tile([0.2, 0.1, GRAVITY], (n, 1))


def test_time_update_matches_block_oracle():
    rng = np.random.default_rng(0)
    fs = FilterState(_nav(rng), np.eye(INS_DIM) * 1e-3)
    augment_camera(fs, EXT, 0.0, 0)
    ensure_clock(fs, 0.0, sigma=2.0)
    fs.P = _random_spd(rng, fs.dim, 1e-3)
    P0, nav0 = fs.P.copy(), fs.nav
    t, g, a = _imu()
    _, Phi, Qd = propagate_batch(nav0, t, g, a, ADIS16470.noise_psd())
    time_update(fs, t, g, a, ADIS16470.noise_psd(), q_clock=2.5)
    Phi_full = np.eye(fs.dim)
    Phi_full[:INS_DIM, :INS_DIM] = Phi
    Q_full = np.zeros_like(P0)
    Q_full[:INS_DIM, :INS_DIM] = Qd
    c = fs.layout["clock"]
    Q_full[c, c] = 2.5 * (t[-1] - t[0])
    np.testing.assert_allclose(fs.P, Phi_full @ P0 @ Phi_full.T + Q_full, atol=1e-14)


def test_time_update_rejects_imu_gap():
    fs = FilterState(_nav(), np.eye(INS_DIM))
    t = np.array([0.0, 0.01, 0.8])
    with pytest.raises(DataGapError):
        time_update(fs, t, np.zeros((3, 3)), np.tile([0, 0, GRAVITY], (3, 1)), ADIS16470.noise_psd())


def _perturbed_nav(nav, d):
    return NavState(q=quat_mul(nav.q, quat_exp(d[0:3])), v=nav.v + d[3:6], p=nav.p + d[6:9],
                    bg=nav.bg + d[9:12], ba=nav.ba + d[12:15], t=nav.t)


def test_camera_augment_jacobian_matches_finite_differences():
    rng = np.random.default_rng(1)
    fs = FilterState(_nav(rng), np.eye(INS_DIM))
    J = camera_augment_jacobian(fs, EXT)
    q0, p0 = camera_pose_from_nav(fs.nav, EXT)
    h = 1e-6
    fd = np.zeros((6, INS_DIM))
    for j in range(INS_DIM):
        out = []
        for s in (1, -1):
            d = np.zeros(INS_DIM)
            d[j] = s * h
            q, p = camera_pose_from_nav(_perturbed_nav(fs.nav, d), EXT)
            out.append(np.r_[quat_log(quat_mul(quat_conj(q0), q)), p - p0])
        fd[:, j] = (out[0] - out[1]) / (2 * h)
    assert np.max(np.abs(fd - J)) <= 1e-5 * np.max(np.abs(J))


def test_augment_camera_cross_covariance_and_window():
    rng = np.random.default_rng(2)
    fs = FilterState(_nav(rng), _random_spd(rng, INS_DIM, 1e-2))
    P0 = fs.P.copy()
    J = camera_augment_jacobian(fs, EXT)[:, :INS_DIM]
    augment_camera(fs, EXT, 0.0, 7)
    c = fs.cols(("cam", 7))
    np.testing.assert_allclose(fs.P[c, c], J @ P0 @ J.T, atol=1e-15)
    np.testing.assert_allclose(fs.P[c, :INS_DIM], J @ P0, atol=1e-15)
    for k in range(8, 12):
        augment_camera(fs, EXT, float(k), k, max_window=3)
    assert list(fs.cams) == [9, 10, 11]
    assert fs.dim == INS_DIM + 18
    marginalize_camera(fs, 10)
    assert list(fs.cams) == [9, 11] and fs.dim == INS_DIM + 12


def _sd(sat, system, band, dP, dL, elev=0.8):
    return SdObservation(0.0, sat, system, band, dP, dL, 45.0, elev, 0.0, var_P=0.09, var_L=1e-4)


def _report(slip_keys=(), corr=None):
    rep = EdmReport(epoch=0.0, method="test")
    corr = corr or {}
    for sat, band in set(slip_keys) | set(corr):
        cls = Classification(ObsClass.CYCLE_SLIP) if (sat, band) in slip_keys else Classification(
            ObsClass.MULTIPATH, corr[(sat, band)])
        rep.entries.append(ObsReport(sat, "GPS", band, "L", 0.0, cls, correction=corr.get((sat, band), 0.0)))
    return rep


def test_augment_rtk_carry_reset_and_drop():
    fs = FilterState(_nav(), np.eye(INS_DIM))
    lam = wavelength(("GPS", "L1"))
    sd = [_sd("G01", "GPS", "L1", 10.0, 10.0 + 5 * lam), _sd("G02", "GPS", "L1", 20.0, 20.0 - 3 * lam),
          _sd("G03", "GPS", "L1", 30.0, 30.0)]
    augment_rtk(fs, sd, clock_init=1.0, ifb_init={("GPS", "L1"): 0.0})
    assert fs.clock == 1.0
    assert fs.amb[("G01", "L1")] == pytest.approx(5.0)
    assert fs.amb[("G02", "L1")] == pytest.approx(-3.0)
    # build correlations, then carry / restart / drop
    rng = np.random.default_rng(3)
    fs.P = _random_spd(rng, fs.dim, 0.01)
    fs.amb[("G01", "L1")] = 5.25
    P_carry = fs.P[fs.layout[("amb", "G01", "L1")], :INS_DIM].copy()
    sd2 = [sd[0], _sd("G02", "GPS", "L1", 20.0, 20.0 + lam)]
    augment_rtk(fs, sd2, _report(slip_keys={("G02", "L1")}))
    assert ("G03", "L1") not in fs.amb and ("amb", "G03", "L1") not in fs.layout
    assert fs.amb[("G01", "L1")] == 5.25
    np.testing.assert_allclose(fs.P[fs.layout[("amb", "G01", "L1")], :INS_DIM], P_carry)
    i2 = fs.layout[("amb", "G02", "L1")]
    assert fs.amb[("G02", "L1")] == pytest.approx(1.0)
    assert fs.P[i2, i2] == pytest.approx((10.0 / lam) ** 2)
    assert np.count_nonzero(np.delete(fs.P[i2], i2)) == 0
    assert fs.keys[-2:] == [("amb", "G01", "L1"), ("amb", "G02", "L1")]


def test_layout_order_is_fixed():
    fs = FilterState(_nav(), np.eye(INS_DIM))
    fs._insert(("amb", "G01", "L1"), P0=np.eye(1))
    ensure_ifb(fs, ("GPS", "L1"), 0.0)
    augment_camera(fs, EXT, 0.0, 0)
    ensure_clock(fs, 0.0)
    ensure_ifb(fs, ("BDS", "B1I"), 0.0)  # reference band: no state
    assert fs.keys == ["ins", ("cam", 0), "clock", ("ifb", "GPS", "L1"), ("amb", "G01", "L1")]
    assert fs.layout[("amb", "G01", "L1")] == INS_DIM + 6 + 2


def test_scalar_update_matches_closed_form():
    fs = FilterState(_nav(), np.diag(np.arange(1.0, INS_DIM + 1)))
    H = np.zeros((1, INS_DIM))
    H[0, 6] = 1.0  # east position
    r, var = 0.5, 2.0
    applied = measurement_update(fs, [Block("pos", np.array([r]), H, np.array([[var]]))])
    assert applied == ["pos"]
    p = 7.0
    assert fs.nav.p[0] == pytest.approx(p / (p + var) * r, rel=1e-12)
    assert fs.P[6, 6] == pytest.approx(p * var / (p + var), rel=1e-12)
    assert fs.P[0, 0] == 1.0


def test_gate_rejects_outlying_block():
    fs = FilterState(_nav(), np.eye(INS_DIM) * 0.01)
    H = np.zeros((1, INS_DIM))
    H[0, 6] = 1.0
    assert measurement_update(fs, [Block("pos", np.array([50.0]), H, np.eye(1), 0.99)]) == []
    assert "rejected by chi-square gate" in fs.diagnostics[-1]
    assert fs.nav.p[0] == 0.0


def test_antenna_position_lever_arm():
    fs = FilterState(NavState(q=quat_exp([0.0, 0.0, np.pi / 2]), p=np.array([1.0, 2.0, 3.0])), np.eye(INS_DIM))
    np.testing.assert_allclose(antenna_position(fs, LEVER), [1.2, 2.3, 4.1], atol=1e-12)


def test_inject_updates_all_substates():
    fs = FilterState(_nav(), np.eye(INS_DIM))
    augment_camera(fs, EXT, 0.0, 0)
    ensure_clock(fs, 3.0)
    ensure_ifb(fs, ("GPS", "L2"), 1.0)
    fs._insert(("amb", "G01", "L2"), P0=np.eye(1))
    fs.amb[("G01", "L2")] = 4.0
    dx = np.zeros(fs.dim)
    dx[2] = 0.1
    dx[6:9] = [1.0, 2.0, 3.0]
    dx[INS_DIM + 3:INS_DIM + 6] = 0.5
    dx[fs.layout["clock"]] = -1.0
    dx[fs.layout[("ifb", "GPS", "L2")]] = 0.25
    dx[fs.layout[("amb", "G01", "L2")]] = 2.0
    p_cam = fs.cams[0].p.copy()
    inject(fs, dx)
    np.testing.assert_allclose(fs.nav.p, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(quat_log(fs.nav.q), [0.0, 0.0, 0.1], atol=1e-12)
    np.testing.assert_allclose(fs.cams[0].p, p_cam + 0.5)
    assert (fs.clock, fs.ifb[("GPS", "L2")], fs.amb[("G01", "L2")]) == (2.0, 1.25, 6.0)


SATS = {"G01": np.array([1.1e7, 1.3e7, 2.0e7]), "G02": np.array([-1.5e7, 0.4e7, 2.1e7]),
        "C01": np.array([0.3e7, -1.9e7, 1.8e7])}
BASE = np.array([400.0, -300.0, 2.0])


def _gnss_state(rng):
    fs = FilterState(_nav(rng), np.eye(INS_DIM))
    sd = [_sd("G01", "GPS", "L1", 1.0, 2.0), _sd("G02", "GPS", "L2", 3.0, 4.0),
          _sd("C01", "BDS", "B1I", 5.0, 6.0)]
    augment_rtk(fs, sd, clock_init=0.7, ifb_init={("GPS", "L1"): 0.3, ("GPS", "L2"): -0.4})
    return fs, sd


def test_gnss_rows_match_finite_differences():
    rng = np.random.default_rng(5)
    fs, sd = _gnss_state(rng)
    blocks = gnss_blocks(fs, sd, SATS, BASE, LEVER)
    h = 1e-3  # ranges near 2e7 m: roundoff ~ eps * range / h
    for b in blocks:
        fd = np.zeros_like(b.H)
        for j in range(fs.dim):
            out = []
            for s in (1, -1):
                d = np.zeros(fs.dim)
                d[j] = s * h
                f2 = fs.copy()
                inject(f2, d)
                nb = [x for x in gnss_blocks(f2, sd, SATS, BASE, LEVER) if x.name == b.name][0]
                out.append(nb.r)
            # residual = z - h(x), so H = -d r / d dx
            fd[:, j] = -(out[0] - out[1]) / (2 * h)
        assert np.max(np.abs(fd - b.H)) <= 1e-5 * np.max(np.abs(b.H))


def test_gnss_blocks_downweight_and_correction():
    rng = np.random.default_rng(6)
    fs, sd = _gnss_state(rng)
    rep = _report(corr={("G01", "L1"): 0.1})
    rep.entries.append(ObsReport("G02", "GPS", "L2", "P", 5.0, Classification(ObsClass.GOOD), 1e-3))
    base = gnss_blocks(fs, sd, SATS, BASE, LEVER)
    mod = gnss_blocks(fs, sd, SATS, BASE, LEVER, rep)
    assert mod[0].R[1, 1] / base[0].R[1, 1] == pytest.approx(1e3)
    assert mod[0].R[0, 0] == base[0].R[0, 0]
    assert base[1].r[0] - mod[1].r[0] == pytest.approx(0.1)
    np.testing.assert_array_equal(base[1].r[1:], mod[1].r[1:])
    assert np.all(base[0].H[2, INS_DIM + 1:INS_DIM + 3] == 0)  # reference band has no IFB column


def test_position_cov_view():
    P = np.diag(np.arange(1.0, INS_DIM + 1))
    fs = FilterState(_nav(), P)
    np.testing.assert_array_equal(np.diag(fs.position_cov()), np.diag(P)[POS])
