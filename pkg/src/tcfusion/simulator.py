"""Synthetic vehicle scenarios with IMU, stereo features and two-station GNSS.

A scenario is a plain nested dictionary (JSON friendly) merged over the
defaults of :data:`DEFAULTS` or of a named preset. Everything random is
drawn from per-sensor substreams of one seed so a (scenario, seed) pair is
reproducible bit for bit.

Single-difference conventions of the generated GNSS data:

* satellite clock, troposphere and ionosphere are identical at both
  stations, so they cancel exactly;
* the BDS B1I code bias is zero at both stations, every other band carries
  a per-station code bias whose difference is the inter-frequency bias;
* phase biases are per station and band, so single-difference ambiguities
  are fractional while double differences within a band are integer;
* noise sigmas in ``noise`` are single-difference values at zenith, each
  station draws ``sigma / sqrt(2) / sin(elevation)``;
* faults are applied to the rover only.
"""

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from .geo import (BANDS, GRAVITY, REFERENCE_BAND, SYSTEM_PREFIX, FrameOrigin, ecef_to_enu, get_band,
                  quat_exp, quat_mul, quat_normalize)
from .gnss import ELEVATION_CUTOFF, CircularOrbit, GnssObservation
from .ins import ADIS16470, SPAN_ISA_100C, ImuSpec
from .vision import StereoExtrinsics

GM_EARTH = 3.986004418e14
ORBIT_RADIUS = {"GPS": 26_560e3, "BDS": 27_906e3, "GAL": 29_600e3, "QZSS": 42_164e3}
IMU_PRESETS = {"ADIS16470": ADIS16470, "SPAN-ISA-100C": SPAN_ISA_100C}

DEFAULTS = {
    "name": "default_urban",
    "duration": 240.0,
    "seed": 7,
    "trajectory": {"type": "figure8", "a_east": 300.0, "a_north": 150.0, "period": 200.0,
                   "roll_amp": 0.02, "pitch_amp": 0.01},
    "origin": [30.53, 114.36, 30.0],  # deg, deg, m
    "base_enu": [3000.0, 4000.0, 0.0],
    "lever_arm": [0.1, 0.2, 1.1],
    "imu": "ADIS16470",
    "imu_noise_scale": 1.0,
    "gnss_rate": 1.0,
    "camera": {"rate": 10.0, "baseline": 0.2, "p_cb": [0.4, 0.0, 0.3], "max_features": 150,
               "fov": [0.6, 0.45], "depth": [2.0, 40.0], "drop_prob": 0.02},
    "landmarks": {"density": 0.05, "lateral": [6.0, 30.0], "height": [-1.0, 12.0]},
    "constellation": {
        "GPS": {"count": 6, "bands": ["L1", "L2"], "extra": "L5", "extra_frac": 0.5},
        "BDS": {"count": 10, "bands": ["B1I", "B3"], "extra": "B2", "extra_frac": 0.4, "geo": 2},
        "GAL": {"count": 4, "bands": ["E1", "E5a"], "extra": "E5b", "extra_frac": 0.3},
        "QZSS": {"count": 2, "bands": ["L1", "L2"], "geo": 2},
    },
    "elev_range": [12.0, 85.0],  # deg, initial draw
    "noise": {"sigma_P": 0.3, "sigma_L": 0.005, "sigma_vis": 0.005, "snr": 0.5, "clock_q": 1.0,
              "snr_elev_slope": 20.0},  # dB of C/N0 per decade of sin(elev)
    "obstruction": {"fraction": 0.35, "min_len": 8, "max_len": 25, "mask_elev": 40.0,
                    "half_width": 50.0, "snr_drop": 10.0},
    "faults": {
        "n_slips": 1000, "slip_cycles": [1, 5], "first_epoch": 5,
        "n_pr_multipath": 80, "pr_amplitude": [0.5, 5.0], "pr_duration": [3, 15],
        "pr_profiles": ["half_sine", "gauss_markov"],
        "n_cp_multipath": 60, "cp_amplitude": [0.06, 0.14], "cp_duration": [2, 4],
        "cp_profiles": ["half_sine"],
        "n_outages": 15, "outage_duration": [1, 5],
        "events": [],
    },
    "init_error": {"att_deg": 0.2, "vel": 0.05, "pos": 0.3},
}

PRESETS = {
    "default_urban": {},
    "multipath_heavy": {
        "name": "multipath_heavy",
        "faults": {"n_slips": 300, "n_pr_multipath": 300, "pr_amplitude": [1.0, 8.0],
                   "pr_duration": [5, 30], "n_cp_multipath": 200},
        "obstruction": {"fraction": 0.6},
    },
    "noisy_urban": {"name": "noisy_urban", "noise": {"sigma_L": 0.03}},
    "clean": {
        "name": "clean", "duration": 60.0,
        "noise": {"sigma_L": 0.03},
        "obstruction": {"fraction": 0.0},
        "faults": {"n_slips": 0, "n_pr_multipath": 0, "n_cp_multipath": 0, "n_outages": 0},
    },
    "zero_noise": {
        "name": "zero_noise", "duration": 60.0, "imu_noise_scale": 0.0,
        "noise": {"sigma_P": 0.0, "sigma_L": 0.0, "sigma_vis": 0.0, "snr": 0.0, "clock_q": 0.0},
        "obstruction": {"fraction": 0.0},
        "camera": {"drop_prob": 0.0},
        "faults": {"n_slips": 0, "n_pr_multipath": 0, "n_cp_multipath": 0, "n_outages": 0},
        "init_error": {"att_deg": 0.0, "vel": 0.0, "pos": 0.0},
    },
}

STREAMS = ("constellation", "landmarks", "imu", "gnss", "faults", "features", "init")


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class Scenario:
    """Validated scenario dictionary (see :data:`DEFAULTS` for the schema)."""

    cfg: dict

    def __post_init__(self):
        c = self.cfg
        if not c["duration"] > 0:
            raise ValueError("duration must be positive")
        if c["trajectory"]["type"] not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory type {c['trajectory']['type']!r}")
        base = np.asarray(c["base_enu"], dtype=float)
        if np.linalg.norm(base) >= 10e3:
            raise ValueError("baseline must be shorter than 10 km")
        for system, s in c["constellation"].items():
            for b in s["bands"] + ([s["extra"]] if s.get("extra") else []):
                get_band(system, b)
        if isinstance(c["imu"], str) and c["imu"] not in IMU_PRESETS:
            raise ValueError(f"unknown IMU preset {c['imu']!r}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        base = _merge(DEFAULTS, PRESETS[d.pop("preset")]) if "preset" in d else DEFAULTS
        return cls(_merge(base, d))

    @classmethod
    def preset(cls, name, **over):
        if name not in PRESETS:
            raise ValueError(f"unknown scenario preset {name!r}")
        return cls(_merge(_merge(DEFAULTS, PRESETS[name]), over))

    def __getitem__(self, k):
        return self.cfg[k]

    @property
    def origin(self):
        lat, lon, h = self.cfg["origin"]
        return FrameOrigin(math.radians(lat), math.radians(lon), h)

    @property
    def imu_spec(self):
        imu = self.cfg["imu"]
        return IMU_PRESETS[imu] if isinstance(imu, str) else ImuSpec(**imu)

    @property
    def extrinsics(self):
        cam = self.cfg["camera"]
        return StereoExtrinsics.forward_looking(cam["baseline"], cam["p_cb"])

    def rngs(self, seed=None):
        seed = self.cfg["seed"] if seed is None else seed
        children = np.random.SeedSequence(seed).spawn(len(STREAMS))
        return {k: np.random.default_rng(s) for k, s in zip(STREAMS, children)}


# --- trajectories ----------------------------------------------------------

class _Trajectory:
    heading_from_velocity = True

    def kinematics(self, t):
        """Position, velocity and acceleration arrays of shape (n, 3)."""
        raise NotImplementedError


class FigureEight(_Trajectory):
    def __init__(self, a_east=300.0, a_north=150.0, period=200.0, **_):
        if a_east <= 0 or a_north <= 0 or period <= 0:
            raise ValueError("figure-eight sizes and period must be positive")
        self.A, self.B, self.w = a_east, a_north, 2.0 * np.pi / period

    def kinematics(self, t):
        A, B, w = self.A, self.B, self.w
        z = np.zeros_like(t)
        p = np.column_stack([A * np.sin(w * t), 0.5 * B * np.sin(2 * w * t), z])
        v = np.column_stack([A * w * np.cos(w * t), B * w * np.cos(2 * w * t), z])
        a = np.column_stack([-A * w * w * np.sin(w * t), -2 * B * w * w * np.sin(2 * w * t), z])
        return p, v, a


class Circle(_Trajectory):
    def __init__(self, radius=100.0, speed=10.0, **_):
        if radius <= 0 or speed <= 0:
            raise ValueError("circle radius and speed must be positive")
        self.r, self.w = radius, speed / radius

    def kinematics(self, t):
        r, w = self.r, self.w
        c, s = np.cos(w * t), np.sin(w * t)
        z = np.zeros_like(t)
        return (np.column_stack([r * c, r * s, z]),
                np.column_stack([-r * w * s, r * w * c, z]),
                np.column_stack([-r * w * w * c, -r * w * w * s, z]))


class Static(_Trajectory):
    heading_from_velocity = False

    def __init__(self, position=(0.0, 0.0, 0.0), yaw=0.0, **_):
        self.p = np.asarray(position, dtype=float)
        self.yaw = float(yaw)

    def kinematics(self, t):
        n = len(t)
        return np.tile(self.p, (n, 1)), np.zeros((n, 3)), np.zeros((n, 3))


class Spline(_Trajectory):
    """C2 cubic spline through timed waypoints ``[[t, E, N, U], ...]``."""

    def __init__(self, waypoints=(), **_):
        w = np.asarray(waypoints, dtype=float)
        if w.ndim != 2 or w.shape[0] < 3 or w.shape[1] != 4:
            raise ValueError("spline needs at least three [t, E, N, U] waypoints")
        if np.any(np.diff(w[:, 0]) <= 0):
            raise ValueError("waypoint times must be strictly increasing")
        if np.any(np.linalg.norm(np.diff(w[:, 1:3], axis=0), axis=1) < 1e-6):
            raise ValueError("consecutive waypoints coincide")
        self.t0, self.t1 = w[0, 0], w[-1, 0]
        self.cs = CubicSpline(w[:, 0], w[:, 1:], bc_type="natural")

    def kinematics(self, t):
        if t.min() < self.t0 - 1e-9 or t.max() > self.t1 + 1e-9:
            raise ValueError("scenario duration exceeds the waypoint span")
        return self.cs(t), self.cs(t, 1), self.cs(t, 2)


TRAJECTORIES = {"figure8": FigureEight, "circle": Circle, "static": Static, "spline": Spline}


@dataclass
class Truth:
    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    euler: np.ndarray  # roll, pitch, yaw
    q: np.ndarray
    w_b: np.ndarray  # body angular rate
    f_b: np.ndarray  # specific force
    bg: np.ndarray = None
    ba: np.ndarray = None

    def R(self, i):
        return _euler_dcm(*self.euler[i])


def _euler_dcm(r, p, y):
    cr, sr, cp, sp, cy, sy = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.cos(y), np.sin(y)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp * np.ones_like(r), cp * sr, cp * cr],
    ])


def _euler_quat(r, p, y):
    cr, sr = np.cos(r / 2), np.sin(r / 2)
    cp, sp = np.cos(p / 2), np.sin(p / 2)
    cy, sy = np.cos(y / 2), np.sin(y / 2)
    q = np.column_stack([cr * cp * cy + sr * sp * sy, sr * cp * cy - cr * sp * sy,
                         cr * sp * cy + sr * cp * sy, cr * cp * sy - sr * sp * cy])
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


def time_grid(duration, rate):
    n = int(round(duration * rate))
    return np.arange(n + 1) / rate


def gen_truth(scenario, t=None):
    """Ground-truth trajectory at the IMU rate.

    Yaw follows the horizontal velocity heading (body axes forward-left-up);
    roll and pitch are small sinusoids. Angular rates and specific forces are
    analytic.
    """
    c = scenario["trajectory"]
    traj = TRAJECTORIES[c["type"]](**{k: v for k, v in c.items() if k != "type"})
    if t is None:
        t = time_grid(scenario["duration"], scenario.imu_spec.rate)
    p, v, a = traj.kinematics(t)
    ra, pa = c.get("roll_amp", 0.0), c.get("pitch_amp", 0.0)
    roll, droll = ra * np.sin(0.3 * t), 0.3 * ra * np.cos(0.3 * t)
    pitch, dpitch = pa * np.sin(0.2 * t + 1.0), 0.2 * pa * np.cos(0.2 * t + 1.0)
    if traj.heading_from_velocity:
        sp2 = v[:, 0] ** 2 + v[:, 1] ** 2
        if np.any(sp2 < 1e-2):
            raise ValueError("horizontal speed too low to define a heading")
        yaw = np.unwrap(np.arctan2(v[:, 1], v[:, 0]))
        dyaw = (v[:, 0] * a[:, 1] - v[:, 1] * a[:, 0]) / sp2
    else:
        yaw, dyaw = np.full_like(t, traj.yaw), np.zeros_like(t)
    sr, cr, sp, cp = np.sin(roll), np.cos(roll), np.sin(pitch), np.cos(pitch)
    w_b = np.column_stack([droll - dyaw * sp,
                           dpitch * cr + dyaw * sr * cp,
                           -dpitch * sr + dyaw * cr * cp])
    R = _euler_dcm(roll, pitch, yaw)  # (3, 3, n)
    acc = a + np.array([0.0, 0.0, GRAVITY])
    f_b = np.einsum("jin,nj->ni", R, acc)
    yaw_wrapped = (yaw + np.pi) % (2 * np.pi) - np.pi
    return Truth(t=t, p=p, v=v, a=a, euler=np.column_stack([roll, pitch, yaw_wrapped]),
                 q=_euler_quat(roll, pitch, yaw), w_b=w_b, f_b=f_b)


# --- IMU -------------------------------------------------------------------

@dataclass
class ImuStream:
    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    bg: np.ndarray  # true biases per sample
    ba: np.ndarray


def gen_imu(truth, spec, rng, noise_scale=1.0):
    """Ideal rates and specific forces plus bias random walks and white noise."""
    n = len(truth.t)
    dt = 1.0 / spec.rate
    s = noise_scale

    def walk(sigma0, psd):
        b0 = rng.normal(0.0, sigma0 * s, 3) if s > 0 else np.zeros(3)
        steps = rng.normal(0.0, math.sqrt(psd * dt) * s, (n, 3)) if s > 0 else np.zeros((n, 3))
        steps[0] = 0.0
        return b0 + np.cumsum(steps, axis=0)

    bg = walk(spec.gyro_bias_sigma, spec.gyro_bias_psd)
    ba = walk(spec.accel_bias_sigma, spec.accel_bias_psd)
    if s > 0:
        nw = rng.normal(0.0, spec.gyro_noise_density * math.sqrt(spec.rate) * s, (n, 3))
        na = rng.normal(0.0, spec.accel_noise_density * math.sqrt(spec.rate) * s, (n, 3))
    else:
        nw = na = np.zeros((n, 3))
    truth.bg, truth.ba = bg, ba
    return ImuStream(truth.t, truth.w_b + bg + nw, truth.f_b + ba + na, bg, ba)


# --- landmarks and features ------------------------------------------------

def gen_landmarks(truth, cfg, rng, spacing=2.0):
    """Points scattered on both sides of the driven path."""
    seg = np.linalg.norm(np.diff(truth.p[:, :2], axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] < spacing:
        # stationary or very short path: a ring of points around the start
        n = max(int(cfg["density"] * 2000), 50)
        ang = rng.uniform(0, 2 * np.pi, n)
        rad = rng.uniform(*cfg["lateral"], n)
        h = rng.uniform(*cfg["height"], n)
        return truth.p[0] + np.column_stack([rad * np.cos(ang), rad * np.sin(ang), h])
    stations = np.arange(0.0, s[-1], spacing)
    idx = np.searchsorted(s, stations)
    lo, hi = cfg["lateral"]
    per = cfg["density"] * 2.0 * (hi - lo) * spacing
    counts = rng.poisson(per, len(idx))
    k = np.repeat(idx, counts)
    m = len(k)
    tang = truth.v[k, :2] / np.maximum(np.linalg.norm(truth.v[k, :2], axis=1, keepdims=True), 1e-9)
    normal = np.column_stack([-tang[:, 1], tang[:, 0]])
    side = rng.choice([-1.0, 1.0], m)
    off = rng.uniform(lo, hi, m) * side
    along = rng.uniform(-0.5 * spacing, 0.5 * spacing, m)
    xy = truth.p[k, :2] + normal * off[:, None] + tang * along[:, None]
    z = truth.p[k, 2] + rng.uniform(*cfg["height"], m)
    pts = np.column_stack([xy, z])
    d, _ = cKDTree(truth.p[::10, :2]).query(pts[:, :2])
    return pts[d >= lo - 1e-9]


@dataclass
class FeatureFrame:
    t: float
    ids: np.ndarray
    z: np.ndarray  # (n, 4) normalized u1, v1, u2, v2


def gen_features(truth, landmarks, ext, cam, sigma, rng, stride):
    """Stereo observations of visible landmarks at every ``stride``-th truth sample.

    A landmark keeps its track id while it stays visible; a dropped or
    re-entering landmark starts a new track.
    """
    u_max, v_max = cam["fov"]
    d_min, d_max = cam["depth"]
    cap = int(cam["max_features"])
    tree = cKDTree(landmarks)
    track_of = {}  # landmark index -> track id
    next_id = 0
    frames = []
    R12 = ext.R_c1_c2
    for i in range(0, len(truth.t), stride):
        Rb = truth.R(i)
        R_C = Rb @ ext.R_cb
        p_C = truth.p[i] + Rb @ ext.p_cb
        near = np.array(sorted(tree.query_ball_point(p_C, d_max * 1.5)), dtype=int)
        if len(near):
            p1 = (landmarks[near] - p_C) @ R_C
            p2 = (p1 - ext.p_c2_c1) @ R12.T
            with np.errstate(divide="ignore", invalid="ignore"):
                u1, v1 = p1[:, 0] / p1[:, 2], p1[:, 1] / p1[:, 2]
                u2, v2 = p2[:, 0] / p2[:, 2], p2[:, 1] / p2[:, 2]
            ok = ((p1[:, 2] > d_min) & (p1[:, 2] < d_max) & (p2[:, 2] > d_min)
                  & (np.abs(u1) < u_max) & (np.abs(v1) < v_max)
                  & (np.abs(u2) < u_max) & (np.abs(v2) < v_max))
            vis = near[ok]
            zs = np.column_stack([u1, v1, u2, v2])[ok]
        else:
            vis, zs = near, np.zeros((0, 4))
        drop = rng.random(len(vis)) < cam["drop_prob"] if cam["drop_prob"] > 0 else np.zeros(len(vis), bool)
        cont = np.array([j in track_of for j in vis], dtype=bool) & ~drop
        order = np.lexsort((vis, ~cont))  # continuing tracks first, then by landmark
        keep = order[:cap]
        new_track = {}
        ids = np.empty(len(keep), dtype=int)
        for n_, j in enumerate(keep):
            lm = int(vis[j])
            if cont[j]:
                new_track[lm] = track_of[lm]
            else:
                new_track[lm] = next_id
                next_id += 1
            ids[n_] = new_track[lm]
        track_of = new_track
        z = zs[keep]
        if sigma > 0:
            z = z + rng.normal(0.0, sigma, z.shape)
        srt = np.argsort(ids)
        frames.append(FeatureFrame(float(truth.t[i]), ids[srt], z[srt]))
    return frames


# --- constellation ---------------------------------------------------------

@dataclass(frozen=True)
class Signal:
    sat: str
    system: str
    band: str

    @property
    def key(self):
        return (self.sat, self.band)


def gen_constellation(scenario, rng):
    """Circular orbits whose initial az/el over the origin are random draws."""
    origin = scenario.origin
    r0 = origin.ecef
    lo, hi = np.sin(np.radians(scenario["elev_range"]))
    orbits, signals = [], []
    for system in ("GPS", "BDS", "GAL", "QZSS"):
        spec = scenario["constellation"].get(system)
        if not spec:
            continue
        for k in range(spec["count"]):
            sat = f"{SYSTEM_PREFIX[system]}{k + 1:02d}"
            el = np.arcsin(rng.uniform(lo, hi))
            az = rng.uniform(0.0, 2 * np.pi)
            geo = k < spec.get("geo", 0)
            radius = ORBIT_RADIUS["QZSS"] if geo else ORBIT_RADIUS[system]
            u_enu = np.array([np.cos(el) * np.sin(az), np.cos(el) * np.cos(az), np.sin(el)])
            u = origin.rotation.T @ u_enu
            b = r0 @ u
            s = -b + np.sqrt(b * b - (r0 @ r0 - radius * radius))
            pos0 = r0 + s * u
            axis = rng.normal(size=3)
            axis -= (axis @ pos0) / (pos0 @ pos0) * pos0
            axis /= np.linalg.norm(axis)
            rate = 0.0 if geo else math.sqrt(GM_EARTH / radius ** 3)
            orbits.append(CircularOrbit(sat, system, tuple(float(x) for x in pos0),
                                        tuple(float(x) for x in axis), rate))
            bands = list(spec["bands"])
            extra = spec.get("extra")
            if extra and rng.random() < spec.get("extra_frac", 0.0):
                bands.append(extra)
            signals += [Signal(sat, system, b) for b in bands]
    return orbits, signals


def sat_positions_enu(orbits, t, origin):
    return {o.sat: ecef_to_enu(o.position(t), origin) for o in orbits}


# --- faults ----------------------------------------------------------------

@dataclass
class FaultEvent:
    id: int
    type: str  # cycle_slip | pr_multipath | cp_multipath | outage
    sat: str
    band: str
    start: int  # GNSS epoch index
    duration: int = 1
    cycles: int = 0
    profile: list = field(default_factory=list)  # per-epoch values (m)

    def to_dict(self):
        return {"id": self.id, "type": self.type, "sat": self.sat, "band": self.band,
                "start": self.start, "duration": self.duration, "cycles": self.cycles,
                "profile": [float(x) for x in self.profile]}


@dataclass
class FaultSchedule:
    events: list = field(default_factory=list)

    def of_type(self, kind):
        return [e for e in self.events if e.type == kind]


def _profile(kind, amp, dur, rng):
    if kind == "half_sine":
        k = np.arange(dur + 1)
        return amp * np.sin(np.pi * k / dur)
    if kind == "gauss_markov":
        phi = math.exp(-1.0 / max(dur / 3.0, 1.0))
        x = np.empty(dur + 1)
        x[0] = amp * rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)
        for i in range(1, dur + 1):
            x[i] = phi * x[i - 1] + math.sqrt(1 - phi * phi) * amp * rng.normal()
        return x
    raise ValueError(f"unknown multipath profile {kind!r}")


def gen_faults(cfg, signals, elev, obstructed, rng):
    """Random fault schedule weighted toward low and obstructed signals.

    ``elev`` and ``obstructed`` are (n_epochs, n_signals) arrays of rover
    elevations and obstruction flags. Explicit ``cfg["events"]`` entries are
    kept as given.
    """
    n_ep, n_sig = elev.shape
    sig_index = {s.key: j for j, s in enumerate(signals)}
    vis = elev >= ELEVATION_CUTOFF
    w = np.where(vis, 1.0 / np.maximum(np.sin(elev), 0.1) ** 2, 0.0) * np.where(obstructed, 4.0, 1.0)
    outage = np.zeros_like(vis)
    cp_busy = np.zeros_like(vis)
    pr_busy = np.zeros_like(vis)
    slipped = np.zeros_like(vis)
    events = []

    def add(ev):
        ev.id = len(events)
        events.append(ev)
        j = sig_index[(ev.sat, ev.band)]
        s = slice(ev.start, ev.start + ev.duration + (1 if ev.type == "cp_multipath" else 0))
        {"outage": outage, "cp_multipath": cp_busy, "pr_multipath": pr_busy, "cycle_slip": slipped}[ev.type][s, j] = True

    for e in cfg.get("events", []):
        add(FaultEvent(0, e["type"], e["sat"], e["band"], int(e["start"]), int(e.get("duration", 1)),
                       int(e.get("cycles", 0)), list(e.get("profile", []))))

    first = int(cfg.get("first_epoch", 5))

    def draw(n, valid_fn, dur_range):
        found = tries = 0
        while found < n and tries < 50 * max(n, 1):
            tries += 1
            d = int(rng.integers(dur_range[0], dur_range[1] + 1))
            ww = w.copy()
            ww[:first] = 0.0
            ww[max(n_ep - d - 1, 0):] = 0.0
            tot = ww.sum()
            if tot <= 0:
                break
            flat = int(rng.choice(ww.size, p=(ww / tot).ravel()))
            k, j = divmod(flat, n_sig)
            if valid_fn(k, j, d):
                found += 1
                yield k, j, d

    for k, j, d in draw(cfg["n_outages"], lambda k, j, d: not outage[k - 1:k + d + 1, j].any(),
                        cfg["outage_duration"]):
        s = signals[j]
        add(FaultEvent(0, "outage", s.sat, s.band, k, d))

    def cp_ok(k, j, d):
        return bool(vis[k:k + d + 1, j].all() and not outage[k - 1:k + d + 1, j].any()
                    and not cp_busy[k - 1:k + d + 2, j].any())

    for k, j, d in draw(cfg["n_cp_multipath"], cp_ok, cfg["cp_duration"]):
        s = signals[j]
        amp = rng.uniform(*cfg["cp_amplitude"]) * rng.choice([-1.0, 1.0])
        prof = _profile(str(rng.choice(cfg["cp_profiles"])), amp, d, rng)
        add(FaultEvent(0, "cp_multipath", s.sat, s.band, k, d, profile=list(prof)))

    def pr_ok(k, j, d):
        return bool(vis[k:k + d, j].all() and not pr_busy[k:k + d, j].any())

    for k, j, d in draw(cfg["n_pr_multipath"], pr_ok, cfg["pr_duration"]):
        s = signals[j]
        amp = rng.uniform(*cfg["pr_amplitude"]) * rng.choice([-1.0, 1.0])
        prof = _profile(str(rng.choice(cfg["pr_profiles"])), amp, d + 1, rng)[1:d + 1]
        add(FaultEvent(0, "pr_multipath", s.sat, s.band, k, d, profile=list(prof)))

    # slips: continuing tracks only, outside carrier multipath windows
    cont = np.zeros_like(vis)
    cont[1:] = vis[1:] & vis[:-1] & ~outage[1:] & ~outage[:-1] & ~cp_busy[1:] & ~cp_busy[:-1]
    cont[:first] = False
    cont &= ~slipped
    ws = np.where(cont, w, 0.0).ravel()
    n_slip = min(int(cfg["n_slips"]), int(np.count_nonzero(ws)))
    if n_slip > 0:
        picks = rng.choice(ws.size, size=n_slip, replace=False, p=ws / ws.sum())
        lo, hi = cfg["slip_cycles"]
        for flat in np.sort(picks):
            k, j = divmod(int(flat), n_sig)
            s = signals[j]
            cyc = int(rng.integers(lo, hi + 1)) * int(rng.choice([-1, 1]))
            add(FaultEvent(0, "cycle_slip", s.sat, s.band, k, 1, cycles=cyc))
    return FaultSchedule(events)


def fault_arrays(schedule, signals, n_ep):
    """Per-epoch rover fault terms: slip cycles (cumulative), multipath and outages."""
    idx = {s.key: j for j, s in enumerate(signals)}
    n = len(signals)
    slip = np.zeros((n_ep, n))
    mp_p = np.zeros((n_ep, n))
    mp_l = np.zeros((n_ep, n))
    out = np.zeros((n_ep, n), dtype=bool)
    for e in schedule.events:
        j = idx[(e.sat, e.band)]
        if e.type == "cycle_slip":
            slip[e.start:, j] += e.cycles
        elif e.type == "outage":
            out[e.start:e.start + e.duration, j] = True
        elif e.type == "pr_multipath":
            p = np.asarray(e.profile)
            m = min(len(p), n_ep - e.start)
            mp_p[e.start:e.start + m, j] += p[:m]
        elif e.type == "cp_multipath":
            p = np.asarray(e.profile)
            m = min(len(p), n_ep - e.start)
            mp_l[e.start:e.start + m, j] += p[:m]
    return slip, mp_p, mp_l, out


def truth_labels(schedule, signals, t_epochs):
    """Per-epoch, per-signal truth rows for every fault event."""
    sys_of = {s.key: s.system for s in signals}
    rows = []
    n_ep = len(t_epochs)
    for e in schedule.events:
        base = {"sat": e.sat, "sys": sys_of[(e.sat, e.band)], "band": e.band, "event": e.id}
        if e.type == "cycle_slip":
            lam = BANDS[(sys_of[(e.sat, e.band)], e.band)].wavelength
            rows.append({"t": float(t_epochs[e.start]), **base, "type": "L", "class": "cycle_slip",
                         "value": float(e.cycles * lam), "cycles": e.cycles})
        elif e.type == "outage":
            for k in range(e.start, min(e.start + e.duration, n_ep)):
                rows.append({"t": float(t_epochs[k]), **base, "type": "L", "class": "outage", "value": 0.0})
        else:
            kind = "P" if e.type == "pr_multipath" else "L"
            for i, v in enumerate(e.profile):
                k = e.start + i
                if k < n_ep and v != 0.0:
                    rows.append({"t": float(t_epochs[k]), **base, "type": kind, "class": "multipath",
                                 "value": float(v)})
    rows.sort(key=lambda r: (r["t"], r["sat"], r["band"], r["type"], r["event"]))
    return rows


# --- GNSS ------------------------------------------------------------------

def obstruction_windows(cfg, duration, rng):
    """Disjoint (t_start, t_end) intervals covering about ``fraction`` of the run."""
    frac = cfg["fraction"]
    wins, t, covered = [], 0.0, 0.0
    if frac <= 0:
        return wins
    mean_len = 0.5 * (cfg["min_len"] + cfg["max_len"])
    gap_mean = mean_len * (1.0 - frac) / frac
    while True:
        t += rng.exponential(gap_mean)
        d = rng.uniform(cfg["min_len"], cfg["max_len"])
        if t >= duration:
            break
        wins.append((float(t), float(min(t + d, duration))))
        t += d
    return wins


def _obstructed(cfg, wins, t, heading, el, az):
    if not any(a <= t < b for a, b in wins):
        return np.zeros_like(el, dtype=bool)
    # street canyon: low satellites towards either side of the vehicle are blocked
    side = (az - (np.pi / 2 - heading)) % np.pi  # angle from the along-track axis
    across = np.abs(side - np.pi / 2) < np.radians(cfg["half_width"])
    return across & (el < np.radians(cfg["mask_elev"]))


@dataclass
class GnssData:
    t: np.ndarray
    rover: list  # [(t, [GnssObservation])]
    base: list
    signals: list
    orbits: list
    schedule: FaultSchedule
    labels: list
    obstruction: list
    elev: np.ndarray
    obstructed: np.ndarray


def gen_gnss(scenario, truth, lever, rngs):
    """Rover and base observations at the GNSS rate plus truth labels."""
    origin = scenario.origin
    noise = scenario["noise"]
    orbits, signals = gen_constellation(scenario, rngs["constellation"])
    rng = rngs["gnss"]
    rate = scenario["gnss_rate"]
    imu_rate = scenario.imu_spec.rate
    t_ep = time_grid(scenario["duration"], rate)
    stride = int(round(imu_rate / rate))
    n_ep, n_sig = len(t_ep), len(signals)
    base_p = np.asarray(scenario["base_enu"], dtype=float)
    wins = obstruction_windows(scenario["obstruction"], scenario["duration"], rng)

    ant = np.empty((n_ep, 3))
    heading = np.empty(n_ep)
    for k in range(n_ep):
        i = k * stride
        ant[k] = truth.p[i] + truth.R(i) @ lever
        heading[k] = truth.euler[i, 2]
    sat_of = {o.sat: o for o in orbits}
    sat_list = sorted(sat_of)
    sat_col = {s: i for i, s in enumerate(sat_list)}
    sat_pos = np.empty((n_ep, len(sat_list), 3))
    for k, t in enumerate(t_ep):
        for s in sat_list:
            sat_pos[k, sat_col[s]] = ecef_to_enu(sat_of[s].position(t), origin)

    def geometry(p):
        d = sat_pos - p[:, None, :] if p.ndim == 2 else sat_pos - p
        rho = np.linalg.norm(d, axis=2)
        u = d / rho[..., None]
        el = np.arcsin(np.clip(u[..., 2], -1, 1))
        az = np.arctan2(u[..., 0], u[..., 1]) % (2 * np.pi)
        return rho, el, az

    rho_r, el_r, az_r = geometry(ant)
    rho_b, el_b, _ = geometry(base_p)
    cols = np.array([sat_col[s.sat] for s in signals])
    elev = el_r[:, cols]
    azim = az_r[:, cols]
    obstructed = np.vstack([_obstructed(scenario["obstruction"], wins, t_ep[k], heading[k], elev[k], azim[k])
                            for k in range(n_ep)])
    schedule = gen_faults(scenario["faults"], signals, elev, obstructed, rngs["faults"])
    slip, mp_p, mp_l, out = fault_arrays(schedule, signals, n_ep)

    # common-mode terms, identical for both stations
    lam = np.array([BANDS[(s.system, s.band)].wavelength for s in signals])
    freq = np.array([BANDS[(s.system, s.band)].frequency for s in signals])
    iono_scale = (1575.42e6 / freq) ** 2
    sat_clk0 = rng.uniform(-3e4, 3e4, len(sat_list))
    sat_drift = rng.uniform(-0.5, 0.5, len(sat_list))
    # station hardware: code biases (B1I pinned), phase biases, integer ambiguities, clocks
    band_keys = sorted({(s.system, s.band) for s in signals})
    code_bias = {st: {b: (0.0 if b == REFERENCE_BAND else rng.uniform(-3.0, 3.0)) for b in band_keys}
                 for st in ("rover", "base")}
    phase_bias = {st: {b: rng.uniform(0.0, 1.0) for b in band_keys} for st in ("rover", "base")}
    amb = {st: rng.integers(-50_000, 50_000, n_sig).astype(float) for st in ("rover", "base")}
    q_clk = noise["clock_q"] / rate
    clk = {st: rng.uniform(-300.0, 300.0) + np.cumsum(np.r_[0.0, rng.normal(0.0, math.sqrt(q_clk), n_ep - 1)])
           if q_clk > 0 else np.full(n_ep, rng.uniform(-300.0, 300.0)) for st in ("rover", "base")}
    sP = noise["sigma_P"] / math.sqrt(2.0)
    sL = noise["sigma_L"] / math.sqrt(2.0)

    rover_ep, base_ep = [], []
    bk = [(s.system, s.band) for s in signals]
    outage_before = np.zeros(n_sig, dtype=bool)
    for k, t in enumerate(t_ep):
        el_k = elev[k]
        sin_r = np.maximum(np.sin(el_k), 0.05)
        sin_b = np.maximum(np.sin(el_b[k, cols]), 0.05)
        common = sat_clk0[cols] + sat_drift[cols] * t + 2.3 / sin_r
        iono = 4.0 * iono_scale / sin_r
        # ambiguities restart after an outage
        restart = outage_before & ~out[k]
        if restart.any():
            amb["rover"][restart] = rng.integers(-50_000, 50_000, int(restart.sum()))
        outage_before = out[k].copy()
        rows = {}
        for st, rho, sin_e, faults in (("rover", rho_r[k, cols], sin_r, True), ("base", rho_b[k, cols], sin_b, False)):
            cb = np.array([code_bias[st][b] for b in bk])
            pb = np.array([phase_bias[st][b] for b in bk])
            nP = rng.normal(0.0, 1.0, n_sig) * (sP / sin_e)
            nL = rng.normal(0.0, 1.0, n_sig) * (sL / sin_e)
            P = rho + clk[st][k] - common + iono + cb + nP
            L = rho + clk[st][k] - common - iono + lam * (amb[st] + pb) + nL
            if faults:
                P = P + mp_p[k]
                L = L + mp_l[k] + lam * slip[k]
            rows[st] = (P, L)
        snr = (50.0 + noise.get("snr_elev_slope", 20.0) * np.log10(sin_r) - scenario["obstruction"]["snr_drop"] * obstructed[k]
               - 3.0 * np.abs(mp_p[k]) - 60.0 * np.abs(mp_l[k]))
        if noise["snr"] > 0:
            snr = snr + rng.normal(0.0, noise["snr"], n_sig)
        snr = np.maximum(snr, 15.0)
        snr_b = 50.0 + noise.get("snr_elev_slope", 20.0) * np.log10(sin_b)
        rov, bas = [], []
        for j, s in enumerate(signals):
            if el_k[j] > 0.0 and not out[k, j]:
                rov.append(GnssObservation(float(t), s.sat, s.system, s.band, float(rows["rover"][0][j]),
                                           float(rows["rover"][1][j]), float(snr[j]), float(el_k[j]),
                                           float(azim[k, j])))
            if el_b[k, cols[j]] > 0.0:
                bas.append(GnssObservation(float(t), s.sat, s.system, s.band, float(rows["base"][0][j]),
                                           float(rows["base"][1][j]), float(snr_b[j]),
                                           float(el_b[k, cols[j]]), 0.0))
        rover_ep.append((float(t), rov))
        base_ep.append((float(t), bas))
    labels = truth_labels(schedule, signals, t_ep)
    return GnssData(t_ep, rover_ep, base_ep, signals, orbits, schedule, labels, wins, elev, obstructed)


# --- whole dataset ---------------------------------------------------------

@dataclass
class Dataset:
    scenario: Scenario
    truth: Truth
    imu: ImuStream
    gnss: GnssData
    features: list
    landmarks: np.ndarray
    meta: dict


def initial_estimate(scenario, truth, rng):
    """Perturbed initial navigation state and its 1-sigma budget."""
    ie = scenario["init_error"]
    spec = scenario.imu_spec
    att = np.radians(ie["att_deg"])
    d_att = rng.normal(0.0, att, 3) if att > 0 else np.zeros(3)
    d_vel = rng.normal(0.0, ie["vel"], 3) if ie["vel"] > 0 else np.zeros(3)
    d_pos = rng.normal(0.0, ie["pos"], 3) if ie["pos"] > 0 else np.zeros(3)
    q = quat_normalize(quat_mul(truth.q[0], quat_exp(d_att)))
    scale = scenario["imu_noise_scale"]
    return {
        "t": float(truth.t[0]),
        "q": [float(x) for x in q],
        "v": [float(x) for x in truth.v[0] + d_vel],
        "p": [float(x) for x in truth.p[0] + d_pos],
        "bg": [0.0, 0.0, 0.0],
        "ba": [0.0, 0.0, 0.0],
        "sigma": {
            "att": float(max(2.0 * att, np.radians(0.05))),
            "vel": float(max(2.0 * ie["vel"], 0.01)),
            "pos": float(max(2.0 * ie["pos"], 0.02)),
            "bg": float(max(spec.gyro_bias_sigma * scale, 1e-6)),
            "ba": float(max(spec.accel_bias_sigma * scale, 1e-5)),
        },
    }


def simulate(scenario, seed=None):
    """Generate every sensor stream of ``scenario``."""
    rngs = scenario.rngs(seed)
    truth = gen_truth(scenario)
    spec = scenario.imu_spec
    imu = gen_imu(truth, spec, rngs["imu"], scenario["imu_noise_scale"])
    lever = np.asarray(scenario["lever_arm"], dtype=float)
    gnss = gen_gnss(scenario, truth, lever, rngs)
    ext = scenario.extrinsics
    cam = scenario["camera"]
    stride = int(round(spec.rate / cam["rate"]))
    landmarks = gen_landmarks(truth, scenario["landmarks"], rngs["landmarks"])
    feats = gen_features(truth, landmarks, ext, cam, scenario["noise"]["sigma_vis"], rngs["features"], stride)
    lat, lon, h = scenario["origin"]
    meta = {
        "scenario": scenario.cfg,
        "seed": int(scenario["seed"] if seed is None else seed),
        "origin": {"lat_deg": lat, "lon_deg": lon, "height": h},
        "base_enu": [float(x) for x in scenario["base_enu"]],
        "lever_arm": [float(x) for x in lever],
        "extrinsics": ext.to_dict(),
        "imu": {"arw": spec.arw, "vrw": spec.vrw, "accel_bias": spec.accel_bias,
                "gyro_bias": spec.gyro_bias, "rate": spec.rate, "bias_corr_time": spec.bias_corr_time},
        "camera_rate": cam["rate"],
        "gnss_rate": scenario["gnss_rate"],
        "orbits": [o.to_dict() for o in gnss.orbits],
        "signals": [[s.sat, s.system, s.band] for s in gnss.signals],
        "obstruction": [list(w) for w in gnss.obstruction],
        "faults": [e.to_dict() for e in gnss.schedule.events],
        "initial": initial_estimate(scenario, truth, rngs["init"]),
    }
    return Dataset(scenario, truth, imu, gnss, feats, landmarks, meta)
