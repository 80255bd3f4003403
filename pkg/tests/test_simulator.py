import filecmp
from collections import Counter

import numpy as np
import pytest

from tcfusion import io
from tcfusion.edm import InnovationEdm
from tcfusion.geo import dcm_to_quat, wavelength
from tcfusion.gnss import single_difference
from tcfusion.simulator import Scenario, gen_imu, gen_truth, sat_positions_enu, simulate
from tcfusion.vision import CameraPoseState, project_stereo


def _scenario(preset="zero_noise", duration=30.0, **over):
    return Scenario.preset(preset, duration=duration, **over)


def test_static_truth_has_zero_velocity():
    sc = _scenario(trajectory={"type": "static", "position": [1.0, 2.0, 3.0], "yaw": 0.5})
    tr = gen_truth(sc)
    assert np.all(tr.v == 0) and np.all(tr.a == 0)
    np.testing.assert_array_equal(tr.p[-1], [1.0, 2.0, 3.0])


def test_circle_centripetal_acceleration():
    sc = _scenario(trajectory={"type": "circle", "radius": 80.0, "speed": 12.0})
    tr = gen_truth(sc)
    np.testing.assert_allclose(np.linalg.norm(tr.a, axis=1), 12.0 ** 2 / 80.0, atol=1e-6)


@pytest.mark.parametrize("traj", [{"type": "figure8"},
                                  {"type": "spline", "waypoints": [[0, 0, 0, 0], [10, 50, 5, 0], [20, 90, 40, 1],
                                                                   [30, 100, 90, 0]]}])
def test_position_derivative_matches_velocity(traj):
    sc = _scenario(trajectory=traj)
    t = np.linspace(1.0, 29.0, 57)
    h = 1e-4
    p_plus = gen_truth(sc, t + h).p
    p_minus = gen_truth(sc, t - h).p
    v = gen_truth(sc, t).v
    np.testing.assert_allclose((p_plus - p_minus) / (2 * h), v, atol=1e-5)


def test_degenerate_waypoints_rejected():
    with pytest.raises(ValueError):
        gen_truth(_scenario(trajectory={"type": "spline", "waypoints": [[0, 0, 0, 0], [1, 0, 0, 0], [2, 1, 1, 0]]}))
    with pytest.raises(ValueError):
        _scenario(duration=-1.0)


def test_zero_noise_imu_equals_analytic_truth():
    sc = _scenario()
    tr = gen_truth(sc)
    imu = gen_imu(tr, sc.imu_spec, np.random.default_rng(0), noise_scale=0.0)
    np.testing.assert_array_equal(imu.gyro, tr.w_b)
    np.testing.assert_array_equal(imu.accel, tr.f_b)


def _allan_variance(x, m):
    """Non-overlapping Allan variance of rate samples for clusters of ``m``."""
    n = len(x) // m
    means = x[:n * m].reshape(n, m).mean(axis=1)
    return 0.5 * np.mean(np.diff(means) ** 2)


def test_gyro_white_noise_allan_level():
    sc = _scenario(duration=100.0)
    spec = sc.imu_spec
    tr = gen_truth(sc)
    imu = gen_imu(tr, spec, np.random.default_rng(11))
    white = imu.gyro - tr.w_b - imu.bg
    assert len(white) >= 10_000
    for m in (1, 10):
        tau = m / spec.rate
        arw = np.sqrt(_allan_variance(white[:, 0], m) * tau)
        assert arw == pytest.approx(spec.gyro_noise_density, rel=0.2)


def test_same_seed_same_streams():
    a = simulate(_scenario("default_urban", 10.0))
    b = simulate(_scenario("default_urban", 10.0))
    c = simulate(_scenario("default_urban", 10.0), seed=99)
    np.testing.assert_array_equal(a.imu.gyro, b.imu.gyro)
    assert a.gnss.rover[5][1] == b.gnss.rover[5][1]
    assert not np.array_equal(a.imu.gyro, c.imu.gyro)


def test_dataset_files_byte_identical(tmp_path):
    for d in ("a", "b"):
        io.write_dataset(simulate(_scenario("default_urban", 10.0)), tmp_path / d)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert mismatch == [] and errors == [] and len(match) == 7


def _antenna(ds, k):
    i = int(round(ds.gnss.t[k] * ds.scenario.imu_spec.rate))
    return ds.truth.p[i] + ds.truth.R(i) @ np.asarray(ds.scenario["lever_arm"])


def test_zero_noise_single_differences_cancel():
    ds = simulate(_scenario())
    base = np.asarray(ds.scenario["base_enu"])
    for k in (0, 17):
        t, rover = ds.gnss.rover[k]
        sd = single_difference(rover, ds.gnss.base[k][1])
        sats = sat_positions_enu(ds.gnss.orbits, t, ds.scenario.origin)
        p = _antenna(ds, k)
        by_band = {}
        for o in sd:
            drho = np.linalg.norm(sats[o.sat] - p) - np.linalg.norm(sats[o.sat] - base)
            by_band.setdefault(o.band_key, []).append(o.dP - drho)
        # what is left is the receiver clock plus one hardware bias per band
        for vals in by_band.values():
            assert np.ptp(vals) < 1e-5


def _visible_gps_l1(ds, k0, k1):
    for j, s in enumerate(ds.gnss.signals):
        if s.system == "GPS" and s.band == "L1" and np.all(ds.gnss.elev[k0:k1, j] > np.radians(15)):
            return s
    raise AssertionError("no continuously visible GPS L1 signal")


def test_cycle_slip_event_jumps_carrier():
    clean = simulate(_scenario(duration=120.0))
    s = _visible_gps_l1(clean, 90, 121)
    ev = {"type": "cycle_slip", "sat": s.sat, "band": "L1", "start": 100, "cycles": 3}
    slipped = simulate(_scenario(duration=120.0, faults={"events": [ev]}))

    def carrier(ds, k):
        return next(o.L for o in ds.gnss.rover[k][1] if (o.sat, o.band) == s.key)

    lam = wavelength(("GPS", "L1"))
    assert carrier(slipped, 99) == carrier(clean, 99)
    for k in (100, 110):
        assert carrier(slipped, k) - carrier(clean, k) == pytest.approx(3 * lam, abs=1e-6)
    lab = [r for r in slipped.gnss.labels if r["class"] == "cycle_slip"]
    assert len(lab) == 1 and lab[0]["t"] == 100.0 and lab[0]["value"] == pytest.approx(3 * 0.1903, abs=1e-4)


def test_pseudorange_multipath_seen_in_innovations():
    sc_over = dict(duration=40.0)
    clean = simulate(_scenario(**sc_over))
    s = _visible_gps_l1(clean, 10, 41)
    ev = {"type": "pr_multipath", "sat": s.sat, "band": "L1", "start": 20, "duration": 5, "profile": [2.0] * 5}
    ds = simulate(_scenario(faults={"events": [ev]}, **sc_over))
    base = np.asarray(ds.scenario["base_enu"])
    edm = InnovationEdm()
    flagged = []
    for k in range(0, 30):
        t, rover = ds.gnss.rover[k]
        sd = single_difference(rover, ds.gnss.base[k][1])
        sats = sat_positions_enu(ds.gnss.orbits, t, ds.scenario.origin)
        p = _antenna(ds, k)
        drho = [np.linalg.norm(sats[o.sat] - p) - np.linalg.norm(sats[o.sat] - base) for o in sd]
        rep = edm.process(t, sd, drho)
        edm.end_epoch(sd, drho)
        e = rep.pseudorange()[s.key]
        if abs(e.innovation) > 1.0:
            flagged.append(k)
    assert flagged == [20, 21, 22, 23, 24]


def test_fault_labels_are_exhaustive():
    ds = simulate(_scenario("default_urban", 120.0))
    ids = {e.id for e in ds.gnss.schedule.events}
    assert ids == {r["event"] for r in ds.gnss.labels}
    slips = Counter(r["event"] for r in ds.gnss.labels if r["class"] == "cycle_slip")
    assert set(slips.values()) == {1}
    assert len(slips) == len(ds.gnss.schedule.of_type("cycle_slip")) > 0
    duration = ds.scenario["duration"]
    assert all(0 <= r["t"] <= duration for r in ds.gnss.labels)


def test_obstruction_lowers_snr():
    ds = simulate(_scenario("default_urban", 120.0))
    snr = {}
    for k, (t, obs) in enumerate(ds.gnss.rover):
        idx = {s.key: j for j, s in enumerate(ds.gnss.signals)}
        for o in obs:
            snr.setdefault(bool(ds.gnss.obstructed[k, idx[(o.sat, o.band)]]), []).append(o.snr)
    assert np.mean(snr[True]) < np.mean(snr[False])


def test_features_zero_noise_consistent_and_long_tracks():
    ds = simulate(_scenario("default_urban", 60.0, noise={"sigma_vis": 0.0}))
    ext = ds.scenario.extrinsics
    frame = ds.features[100]
    i = int(round(frame.t * ds.scenario.imu_spec.rate))
    R = ds.truth.R(i)
    pose = CameraPoseState(q=dcm_to_quat(R @ ext.R_cb), p=ds.truth.p[i] + R @ ext.p_cb, id=0, t=frame.t)
    assert 0 < len(frame.ids) <= 150
    # recover each landmark from the first-camera ray and the stereo disparity, then reproject
    for z in frame.z[:10]:
        depth = ext.p_c2_c1[0] / (z[0] - z[2])
        p_c = np.array([z[0], z[1], 1.0]) * depth
        p_f = pose.p + pose.R @ p_c
        np.testing.assert_allclose(project_stereo(p_f, pose, ext), z, atol=1e-9)
    lengths = Counter(int(fid) for f in ds.features for fid in f.ids)
    assert np.mean(list(lengths.values())) > 5
