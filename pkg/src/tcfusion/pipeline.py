"""Experiment runner: one configuration, one dataset, one sequential pass.

Per event (camera frame and/or GNSS epoch), in timestamp order:

1. time update over the IMU samples since the previous event;
2. on GNSS epochs: single differences, weighting, EDM, RTK augmentation
   and GNSS measurement rows;
3. vision rows for finished tracks and tracks seen by the pose about to
   leave the window;
4. one joint measurement update;
5. on GNSS epochs: ambiguity resolution (on a copy) and EDM bookkeeping
   with the updated geometry;
6. camera augmentation (with marginalization of the oldest pose).
"""

import gc
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import io
from .ambiguity import RATIO_THRESHOLD, ratio_test_and_apply
from .edm import DELTA_TH, MP_LIMIT, PR_THRESHOLD, make_edm, ifb_estimate, clock_datum
from .filter import (Q_CLOCK, Block, DataGapError, FilterState, antenna_position, augment_camera,
                     augment_rtk, gnss_blocks, measurement_update, time_update)
from .geo import REFERENCE_BAND, FrameOrigin, dcm_to_euler, ecef_to_enu, quat_to_dcm
from .gnss import SIGMA_L, SIGMA_P, CircularOrbit, single_difference, weight_variance
from .ins import ImuSpec, NavState
from .metrics import nees_fraction, position_errors, rmse, score_detection, score_multipath, emit_plots
from .vision import (GATE_PROB, MAX_FEATURES, MAX_WINDOW, SIGMA_VIS, CheiralityError, FeatureTrack,
                     StereoExtrinsics, TriangulationError, chi2_threshold, feature_update_blocks,
                     triangulate)

MODES = ("snr", "elev", "hybrid", "i-edm", "r-edm")
MIN_TRACK_OBS = 3


class NumericalError(RuntimeError):
    """The estimator produced a non-finite state."""


@dataclass
class RunConfig:
    """Run configuration.

    JSON schema (all keys but ``scenario`` and ``mode`` optional)::

        {"scenario": "<dataset dir | scenario.json>",
         "mode": "snr|elev|hybrid|i-edm|r-edm",
         "sigma_prior": 0.1,
         "thresholds": {"delta_th": 0.05, "accumulation": 0.2, "culling": 1.0},
         "out": "runs/name", "seed": 7, ...}

    The ``FUSION_SEED`` environment variable overrides ``seed``.
    """

    scenario: str
    mode: str
    out: str = None
    sigma_prior: float = 0.1
    delta_th: float = DELTA_TH
    accumulation: float = MP_LIMIT
    culling: float = PR_THRESHOLD
    seed: int = None
    sigma_P: float = SIGMA_P
    sigma_L: float = SIGMA_L
    sigma_vis: float = SIGMA_VIS
    q_clock: float = Q_CLOCK
    vision: bool = True
    gate_vision: float = GATE_PROB
    gate_gnss: float = 0.99
    max_window: int = MAX_WINDOW
    max_features: int = MAX_FEATURES
    ratio_threshold: float = RATIO_THRESHOLD
    ambiguity_resolution: bool = True
    ar_max_std: float = 0.5  # cycles, skip fixing while any DD ambiguity is less certain
    fix_feedback: bool = False
    record_timing: bool = False
    check_psd: bool = False  # track the smallest scaled eigenvalue of P after every step
    warmup_epochs: int = 5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.sigma_prior <= 0 or self.delta_th <= 0 or self.accumulation <= 0 or self.culling <= 0:
            raise ValueError("sigma_prior and thresholds must be positive")

    @classmethod
    def from_dict(cls, d, base_dir=None):
        d = dict(d)
        th = d.pop("thresholds", {}) or {}
        for k in ("delta_th", "accumulation", "culling"):
            if k in th:
                d[k] = th[k]
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "scenario" not in d or "mode" not in d:
            raise ValueError("config needs 'scenario' and 'mode'")
        if base_dir is not None:
            for k in ("scenario", "out"):
                if d.get(k) and not os.path.isabs(d[k]):
                    d[k] = str(Path(base_dir) / d[k])
        env = os.environ.get("FUSION_SEED")
        if env is not None:
            d["seed"] = int(env)
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(io.read_json(path), base_dir=Path(path).parent)

    def to_dict(self):
        d = asdict(self)
        d["thresholds"] = {"delta_th": d.pop("delta_th"), "accumulation": d.pop("accumulation"),
                           "culling": d.pop("culling")}
        return d

    @property
    def weighting(self):
        return "hybrid" if self.mode in ("i-edm", "r-edm") else self.mode


def streams_from_dataset(ds):
    """In-memory equivalent of :func:`io.read_dataset` plus truth."""
    return {
        "meta": ds.meta,
        "imu": (ds.imu.t, ds.imu.gyro, ds.imu.accel),
        "rover": ds.gnss.rover,
        "base": ds.gnss.base,
        "features": [(f.t, f.ids, f.z) for f in ds.features],
        "labels": ds.gnss.labels,
        "truth": {"t": ds.truth.t, "E": ds.truth.p[:, 0], "N": ds.truth.p[:, 1], "U": ds.truth.p[:, 2]},
    }


def load_streams(path, seed=None):
    """Dataset directory or scenario JSON to streams (simulating if needed)."""
    p = Path(path)
    if p.is_dir():
        data = io.read_dataset(p)
        if (p / "truth_labels.jsonl").is_file():
            data["labels"] = io.read_jsonl(p / "truth_labels.jsonl")
        if (p / "truth_trajectory.csv").is_file():
            data["truth"] = io.read_truth_csv(p / "truth_trajectory.csv")
        return data
    if p.is_file():
        from .simulator import Scenario, simulate
        scen = Scenario.from_dict(io.read_json(p))
        return streams_from_dataset(simulate(scen, seed))
    raise io.InputError(f"scenario not found: {p}")


def _tkey(t):
    return int(round(float(t) * 1000.0))


@dataclass
class RunResult:
    config: RunConfig
    trajectory: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    nees: list = field(default_factory=list)
    fixes: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    max_asymmetry: float = 0.0
    min_eig: float = 0.0  # smallest eigenvalue of the correlation matrix of P (check_psd)
    n_checks: int = 0


class Pipeline:
    def __init__(self, data, cfg):
        self.cfg = cfg
        meta = data["meta"]
        o = meta["origin"]
        self.origin = FrameOrigin(math.radians(o["lat_deg"]), math.radians(o["lon_deg"]), o["height"])
        self.orbits = [CircularOrbit.from_dict(d) for d in meta["orbits"]]
        self.base = np.asarray(meta["base_enu"], dtype=float)
        self.lever = np.asarray(meta["lever_arm"], dtype=float)
        self.ext = StereoExtrinsics.from_dict(meta["extrinsics"])
        self.spec = ImuSpec(**meta["imu"])
        self.Qc = self.spec.noise_psd()
        self.t_imu, self.gyro, self.accel = (np.asarray(x, dtype=float) for x in data["imu"])
        self.rover = {_tkey(t): obs for t, obs in data["rover"]}
        self.base_obs = {_tkey(t): obs for t, obs in data["base"]}
        self.frames = {_tkey(t): (ids, z) for t, ids, z in data["features"]} if cfg.vision else {}
        self.truth = data.get("truth")
        self.labels = data.get("labels")
        init = meta["initial"]
        s = init["sigma"]
        nav = NavState(q=np.asarray(init["q"]), v=np.asarray(init["v"]), p=np.asarray(init["p"]),
                       bg=np.asarray(init["bg"]), ba=np.asarray(init["ba"]), t=float(init["t"]))
        P0 = np.diag(np.repeat([s["att"] ** 2, s["vel"] ** 2, s["pos"] ** 2, s["bg"] ** 2, s["ba"] ** 2], 3))
        self.fs = FilterState(nav, P0)
        self.edm = make_edm(cfg.mode, sigma_prior=cfg.sigma_prior, delta_th=cfg.delta_th,
                            mp_limit=cfg.accumulation, pr_threshold=cfg.culling)
        self.tracks = {}
        self.pose_counter = 0
        self.result = RunResult(cfg)
        self._truth_idx = {_tkey(t): i for i, t in enumerate(self.truth["t"])} if self.truth else {}
        self._timers = {"time_update": [], "edm": [], "vision": [], "update": [], "ambiguity": []}

    # --- helpers -----------------------------------------------------------
    def _sat_positions(self, t):
        return {o.sat: ecef_to_enu(o.position(t), self.origin) for o in self.orbits}

    def _geometry(self, sd, sat_pos, p_ant):
        drho = np.empty(len(sd))
        los = np.empty((len(sd), 3))
        for i, o in enumerate(sd):
            d = sat_pos[o.sat] - p_ant
            r = np.sqrt(d @ d)
            db = sat_pos[o.sat] - self.base
            drho[i] = r - np.sqrt(db @ db)
            los[i] = d / r
        return drho, los

    def _imu_segment(self, t0, t1):
        i0 = np.searchsorted(self.t_imu, t0 - 1e-9)
        i1 = np.searchsorted(self.t_imu, t1 + 1e-9)
        t = self.t_imu[i0:i1]
        g = self.gyro[i0:i1]
        a = self.accel[i0:i1]
        if len(t) == 0 or t[0] > t0 + 1e-9 or t[-1] < t1 - 1e-9:
            raise DataGapError(f"IMU data do not cover [{t0}, {t1}]")
        return t, g, a

    def _tick(self, name, t0):
        if self.cfg.record_timing:
            self._timers[name].append(time.perf_counter() - t0)

    # --- GNSS --------------------------------------------------------------
    def _gnss(self, t, key):
        cfg = self.cfg
        sd = single_difference(self.rover[key], self.base_obs.get(key, []))
        if len(sd) < 4:
            self.result.diagnostics.append(f"t={t}: fewer than four single differences, GNSS skipped")
            return None
        model = cfg.weighting
        sd = [replace(o, var_P=weight_variance(o, model, cfg.sigma_P),
                      var_L=weight_variance(o, model, cfg.sigma_L)) for o in sd]
        sat_pos = self._sat_positions(t)
        drho, los = self._geometry(sd, sat_pos, antenna_position(self.fs, self.lever))
        # like timeit, keep collector pauses out of the measured interval
        paused = cfg.record_timing and gc.isenabled()
        if paused:
            gc.disable()
        t0 = time.perf_counter()
        report = self.edm.process(t, sd, drho, los)
        self._tick("edm", t0)
        if paused:
            gc.enable()
        if "clock" not in self.fs.layout:
            _, ifbs = ifb_estimate(sd, drho)
            try:
                clock = clock_datum(sd, drho, _IfbLookup(ifbs))
            except ValueError:
                clock = float(np.median([o.dP for o in sd] - drho))
            augment_rtk(self.fs, sd, report, clock_init=clock, ifb_init=ifbs)
        else:
            augment_rtk(self.fs, sd, report)
        blocks = gnss_blocks(self.fs, sd, sat_pos, self.base, self.lever, report, gate=cfg.gate_gnss)
        return sd, sat_pos, report, blocks

    # --- vision ------------------------------------------------------------
    def _vision_blocks(self, frame):
        cfg = self.cfg
        fs = self.fs
        current = set(frame[0].tolist()) if frame is not None else set()
        full = len(fs.cams) >= cfg.max_window
        oldest = next(iter(fs.cams)) if fs.cams else None
        ready = []
        for tid in list(self.tracks):
            tr = self.tracks[tid]
            lost = tid not in current
            touches_oldest = full and tr.obs and tr.obs[0][0] == oldest
            if not (lost or touches_oldest):
                continue
            if len(tr.obs) >= MIN_TRACK_OBS:
                ready.append(tr)
            if lost:
                del self.tracks[tid]
            else:
                tr.obs = []
        if not ready:
            return []
        poses = fs.cams
        rows_r, rows_H = [], []
        sig2 = cfg.sigma_vis ** 2
        for tr in ready:
            try:
                p_f = triangulate(tr, poses, self.ext, cfg.sigma_vis)
                r_o, H_o, ids = feature_update_blocks(tr, poses, self.ext, p_f)
            except (TriangulationError, CheiralityError):
                continue
            cols = np.concatenate([np.arange(fs.layout[("cam", i)], fs.layout[("cam", i)] + 6) for i in ids])
            S = H_o @ fs.P[np.ix_(cols, cols)] @ H_o.T + sig2 * np.eye(len(r_o))
            try:
                d2 = float(r_o @ np.linalg.solve(S, r_o))
            except np.linalg.LinAlgError:
                continue
            if cfg.gate_vision is not None and d2 > chi2_threshold(cfg.gate_vision, len(r_o)):
                continue
            H = np.zeros((len(r_o), fs.dim))
            H[:, cols] = H_o
            rows_r.append(r_o)
            rows_H.append(H)
        if not rows_r:
            return []
        H = np.vstack(rows_H)
        r = np.concatenate(rows_r)
        if H.shape[0] > H.shape[1]:
            Q, R = np.linalg.qr(H)
            H, r = R, Q.T @ r
        return [Block("vision", r, H, sig2 * np.eye(len(r)))]

    def _augment(self, t, frame):
        cfg = self.cfg
        pid = self.pose_counter
        self.pose_counter += 1
        if len(self.fs.cams) >= cfg.max_window:
            oldest = next(iter(self.fs.cams))
            for tr in self.tracks.values():
                tr.obs = [(p, z) for p, z in tr.obs if p != oldest]
        augment_camera(self.fs, self.ext, t, pid, cfg.max_window)
        ids, z = frame
        for i, zi in zip(ids[:cfg.max_features], z[:cfg.max_features]):
            tr = self.tracks.get(int(i))
            if tr is None:
                tr = self.tracks[int(i)] = FeatureTrack(int(i))
            tr.add(pid, zi)

    # --- output ------------------------------------------------------------
    def _output(self, t, fs_out, status):
        nav = fs_out.nav
        roll, pitch, yaw = dcm_to_euler(quat_to_dcm(nav.q))
        self.result.trajectory.append((t, *nav.p, *nav.v, roll, pitch, yaw, status))
        j = self._truth_idx.get(_tkey(t))
        if j is not None:
            err = self.fs.nav.p - np.array([self.truth[c][j] for c in ("E", "N", "U")])
            Pp = self.fs.position_cov()
            self.result.nees.append(float(err @ np.linalg.solve(Pp, err)))

    def _check(self):
        fs = self.fs
        if not fs.nav.is_finite() or not np.all(np.isfinite(fs.P)):
            raise NumericalError(f"non-finite filter state at t={fs.nav.t}")
        m = np.max(np.abs(fs.P))
        asym = float(np.max(np.abs(fs.P - fs.P.T)) / m) if m > 0 else 0.0
        self.result.max_asymmetry = max(self.result.max_asymmetry, asym)
        if self.cfg.check_psd:
            d = 1.0 / np.sqrt(np.abs(np.diag(fs.P)))
            lam = float(np.linalg.eigvalsh(0.5 * (fs.P + fs.P.T) * np.outer(d, d))[0])
            self.result.min_eig = min(self.result.min_eig, lam) if self.result.n_checks else lam
        self.result.n_checks += 1

    # --- main loop ---------------------------------------------------------
    def run(self):
        cfg = self.cfg
        keys = sorted(set(self.rover) | set(self.frames))
        t_prev = self.fs.nav.t
        n_gnss = 0
        for key in keys:
            t = key / 1000.0
            if t < t_prev - 1e-9:
                continue
            t0 = time.perf_counter()
            if t > t_prev + 1e-9:
                ts, g, a = self._imu_segment(t_prev, t)
                time_update(self.fs, ts, g, a, self.Qc, cfg.q_clock)
            self._tick("time_update", t0)
            t_prev = t
            frame = self.frames.get(key)
            gnss = self._gnss(t, key) if key in self.rover else None
            t0 = time.perf_counter()
            blocks = list(gnss[3]) if gnss else []
            if cfg.vision:
                blocks += self._vision_blocks(frame)
            self._tick("vision", t0)
            t0 = time.perf_counter()
            if blocks:
                measurement_update(self.fs, blocks)
            self._tick("update", t0)
            self._check()
            if key in self.rover:
                status, fs_out = "float", self.fs
                if gnss:
                    n_gnss += 1
                    sd, sat_pos, report, _ = gnss
                    t0 = time.perf_counter()
                    if cfg.ambiguity_resolution:
                        fixed, fix = ratio_test_and_apply(self.fs, {o.key: o.elev for o in sd},
                                                          cfg.ratio_threshold, max_std=cfg.ar_max_std)
                        self.result.fixes.append((t, fix.ratio, fix.applied))
                        if fixed is not None:
                            status, fs_out = "fixed", fixed
                            if cfg.fix_feedback:
                                self.fs = fixed.copy()
                    self._tick("ambiguity", t0)
                    drho_post, _ = self._geometry(sd, sat_pos, antenna_position(self.fs, self.lever))
                    self.edm.end_epoch(sd, drho_post)
                    self.result.reports.append(report)
                else:
                    status = "ins"
                self._output(t, fs_out, status)
            if frame is not None:
                self._augment(t, frame)
        self.result.diagnostics += self.fs.diagnostics
        self.result.timing = self._timing_summary()
        return self.result

    def _timing_summary(self):
        if not self.cfg.record_timing:
            return {}
        w = self.cfg.warmup_epochs
        out = {k: float(np.mean(v[w:]) * 1e3) if len(v) > w else None for k, v in self._timers.items()}
        edm = [r.timing for r in self.result.reports[w:] if r.timing]
        for part in ("pseudorange", "carrier", "total"):
            vals = [d[part] for d in edm if part in d]
            out[f"edm_{part}"] = float(np.mean(vals)) if vals else None
        return out


class _IfbLookup(dict):
    """Minimal IFB lookup with the reference band pinned to zero."""

    def get(self, band_key, default=None):
        if tuple(band_key) == REFERENCE_BAND:
            return 0.0
        return super().get(tuple(band_key), default)


def compute_metrics(result, data):
    cfg = result.config
    traj = {c: np.array([r[i] for r in result.trajectory]) for i, c in enumerate(io.TRAJ_HEADER[:10])}
    m = {"mode": cfg.mode, "epochs": len(result.trajectory)}
    status = [r[10] for r in result.trajectory]
    m["fix_rate"] = status.count("fixed") / len(status) if status else 0.0
    t_err, err = (np.zeros(0), np.zeros((0, 3)))
    if data.get("truth") is not None and result.trajectory:
        t_err, err = position_errors(traj, data["truth"])
        m["rmse"] = rmse(err)
        m["nees_within_95"] = nees_fraction(result.nees)
    else:
        m["rmse"] = rmse([])
    labels = data.get("labels")
    if labels is not None and result.reports:
        det = score_detection(result.reports, labels)
        det.pop("missed")
        m["detection"] = det
        m["multipath"] = score_multipath(result.reports, labels)
    m["diagnostics"] = len(result.diagnostics)
    result.metrics = m
    return m, t_err, err


def run(cfg, data=None, write=True):
    """Execute one configuration; returns a :class:`RunResult`.

    ``data`` may be preloaded streams; otherwise ``cfg.scenario`` is loaded.
    When ``write`` is set and ``cfg.out`` is given, trajectory, EDM reports,
    metrics and plot tables are written there.
    """
    if data is None:
        data = load_streams(cfg.scenario, cfg.seed)
    res = Pipeline(data, cfg).run()
    m, t_err, err = compute_metrics(res, data)
    if write and cfg.out:
        out = io.ensure_dir(cfg.out)
        io.write_trajectory_csv(out / "trajectory.csv", res.trajectory)
        io.write_edm_reports(out / "edm_reports.jsonl", out / "edm_reports.csv", res.reports,
                             include_timing=cfg.record_timing)
        io.write_json(out / "metrics.json", m)
        io.write_json(out / "config.json", cfg.to_dict())
        emit_plots(out / "plots", t_err, err, res.reports)
        if cfg.record_timing:
            io.write_json(out / "timing.json", res.timing)
    return res
