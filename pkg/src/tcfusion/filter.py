"""Tightly coupled error-state filter over INS, camera-window and RTK states.

Error-state layout (columns of ``P``), always in this order::

    [ ins(15) | cam_1(6) ... cam_k(6) | clock(1) | ifb(gamma) | amb(m) ]

``FilterState.layout`` maps semantic keys to column offsets:
``"ins"``, ``("cam", id)``, ``"clock"``, ``("ifb", system, band)`` and
``("amb", sat, band)``. Functions in this module update a state in place
and return it.
"""

import copy
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .edm import ObsClass
from .geo import REFERENCE_BAND, dcm_to_quat, quat_exp, quat_mul, quat_normalize, quat_to_dcm, skew, wavelength
from .ins import ATT, BA, BG, INS_DIM, POS, VEL, propagate_batch
from .vision import MAX_WINDOW, CameraPoseState, chi2_threshold

MAX_IMU_GAP = 0.5  # s
SIGMA_AMB = 10.0  # m, prior of a new ambiguity
SIGMA_IFB = 10.0  # m
SIGMA_CLOCK = 100.0  # m
Q_CLOCK = 1.0  # m^2/s

_SIZES = {"ins": INS_DIM, "cam": 6, "clock": 1, "ifb": 1, "amb": 1}
_ORDER = {"ins": 0, "cam": 1, "clock": 2, "ifb": 3, "amb": 4}


class DataGapError(RuntimeError):
    pass


def _kind(key):
    return key if isinstance(key, str) else key[0]


@dataclass(frozen=True)
class LeverArm:
    l_b: np.ndarray  # antenna offset in the body frame (m)


@dataclass
class Block:
    """A group of measurement rows: ``r = H dx + n``, ``n ~ N(0, R)``."""

    name: str
    r: np.ndarray
    H: np.ndarray
    R: np.ndarray
    gate: float = None  # chi-square probability, None disables gating


class FilterState:
    def __init__(self, nav, P_ins):
        self.nav = nav
        self.cams = {}
        self.clock = None
        self.ifb = {}
        self.amb = {}
        self.keys = ["ins"]
        self.P = np.array(P_ins, dtype=float)
        self._index = None
        self.fix_status = "float"
        self.diagnostics = []

    # --- layout ------------------------------------------------------------
    @property
    def layout(self):
        if self._index is None:
            idx, off = {}, 0
            for k in self.keys:
                idx[k] = off
                off += _SIZES[_kind(k)]
            self._index = idx
        return self._index

    def cols(self, key):
        start = self.layout[key]
        return slice(start, start + _SIZES[_kind(key)])

    @property
    def dim(self):
        return self.P.shape[0]

    def copy(self):
        out = copy.copy(self)
        out.cams = dict(self.cams)
        out.ifb = dict(self.ifb)
        out.amb = dict(self.amb)
        out.keys = list(self.keys)
        out.P = self.P.copy()
        out._index = None
        out.diagnostics = list(self.diagnostics)
        return out

    def _insert(self, key, J=None, P0=None):
        """Insert ``key`` as ``x_new = J x_old + w`` with ``w ~ N(0, P0)``."""
        size = _SIZES[_kind(key)]
        n = self.dim
        rank = _ORDER[_kind(key)]
        pos_key = next((i for i, k in enumerate(self.keys) if _ORDER[_kind(k)] > rank), len(self.keys))
        pos = sum(_SIZES[_kind(k)] for k in self.keys[:pos_key])
        JP = np.zeros((size, n)) if J is None else J @ self.P
        C = JP @ (np.zeros((n, size)) if J is None else J.T)
        if P0 is not None:
            C = C + P0
        big = np.block([[self.P, JP.T], [JP, C]])
        perm = np.r_[0:pos, n:n + size, pos:n]
        self.P = big[np.ix_(perm, perm)]
        self.keys.insert(pos_key, key)
        self._index = None

    def _remove(self, keys):
        keys = [k for k in keys if k in self.layout]
        if not keys:
            return
        drop = np.concatenate([np.arange(self.cols(k).start, self.cols(k).stop) for k in keys])
        keep = np.setdiff1d(np.arange(self.dim), drop)
        self.P = self.P[np.ix_(keep, keep)]
        for k in keys:
            self.keys.remove(k)
        self._index = None

    def symmetrize(self):
        self.P = 0.5 * (self.P + self.P.T)

    # --- convenience -------------------------------------------------------
    def rtk_ifb(self, band_key):
        band_key = tuple(band_key)
        return 0.0 if band_key == REFERENCE_BAND else self.ifb.get(band_key, 0.0)

    def position_cov(self):
        s = self.cols("ins")
        return self.P[s, s][POS, POS]


def antenna_position(fs, lever):
    """GNSS antenna position ``p + R_b^n l^b``."""
    return fs.nav.p + quat_to_dcm(fs.nav.q) @ np.asarray(lever.l_b if isinstance(lever, LeverArm) else lever)


def time_update(fs, t, gyro, accel, Qc, q_clock=Q_CLOCK):
    """Mechanize over IMU samples ``t[0]..t[-1]`` and propagate ``P``.

    Camera and RTK states are constant; the receiver clock gains
    ``q_clock * dt`` of variance.
    """
    t = np.asarray(t, dtype=float)
    if len(t) < 2 or t[-1] <= t[0]:
        return fs
    if np.max(np.diff(t)) > MAX_IMU_GAP:
        raise DataGapError(f"IMU gap larger than {MAX_IMU_GAP} s before t={t[-1]:.3f}")
    nav, Phi, Qd = propagate_batch(fs.nav, t, gyro, accel, Qc)
    fs.nav = nav
    s = fs.cols("ins")
    P = fs.P
    P[s, :] = Phi @ P[s, :]
    P[:, s] = P[:, s] @ Phi.T
    P[s, s] += Qd
    if "clock" in fs.layout:
        c = fs.layout["clock"]
        P[c, c] += q_clock * (t[-1] - t[0])
    fs.symmetrize()
    return fs


def camera_pose_from_nav(nav, ext):
    R = quat_to_dcm(nav.q)
    q_c = quat_normalize(quat_mul(nav.q, dcm_to_quat(ext.R_cb)))
    return q_c, nav.p + R @ ext.p_cb


def camera_augment_jacobian(fs, ext):
    """Rows mapping the current error state onto a new camera pose error."""
    R = quat_to_dcm(fs.nav.q)
    J = np.zeros((6, fs.dim))
    s = fs.cols("ins").start
    J[0:3, s + ATT.start:s + ATT.stop] = ext.R_cb.T
    J[3:6, s + ATT.start:s + ATT.stop] = -R @ skew(ext.p_cb)
    J[3:6, s + POS.start:s + POS.stop] = np.eye(3)
    return J


def augment_camera(fs, ext, t, pose_id, max_window=MAX_WINDOW):
    """Clone the INS pose into a new camera state (oldest marginalized when full)."""
    while len(fs.cams) >= max_window:
        marginalize_camera(fs, next(iter(fs.cams)))
    q_c, p_c = camera_pose_from_nav(fs.nav, ext)
    J = camera_augment_jacobian(fs, ext)
    fs._insert(("cam", pose_id), J)
    fs.cams[pose_id] = CameraPoseState(q=q_c, p=p_c, id=pose_id, t=t)
    return fs


def marginalize_camera(fs, pose_id):
    fs._remove([("cam", pose_id)])
    fs.cams.pop(pose_id, None)
    return fs


def ensure_clock(fs, value, sigma=SIGMA_CLOCK):
    if "clock" not in fs.layout:
        fs._insert("clock", P0=np.array([[sigma * sigma]]))
        fs.clock = float(value)
    return fs


def ensure_ifb(fs, band_key, value, sigma=SIGMA_IFB):
    band_key = tuple(band_key)
    if band_key == REFERENCE_BAND or band_key in fs.ifb:
        return fs
    fs._insert(("ifb",) + band_key, P0=np.array([[sigma * sigma]]))
    fs.ifb[band_key] = float(value)
    return fs


def augment_rtk(fs, sd, report=None, sigma_amb=SIGMA_AMB, clock_init=None, ifb_init=None):
    """Carry, restart or add single-difference ambiguity states for one epoch.

    Ambiguities of signals absent from ``sd`` are marginalized. Signals that
    are new or flagged as cycle slips in ``report`` get a fresh state with
    zero error mean and variance ``(sigma_amb / wavelength)^2``. The nominal
    value is the code-minus-carrier estimate.
    """
    ifb_init = ifb_init or {}
    if "clock" not in fs.layout:
        ensure_clock(fs, 0.0 if clock_init is None else clock_init)
    for o in sd:
        if o.band_key != REFERENCE_BAND and o.band_key not in fs.ifb:
            ensure_ifb(fs, o.band_key, ifb_init.get(o.band_key, 0.0))
    present = {o.key for o in sd}
    fs._remove([("amb",) + k for k in list(fs.amb) if k not in present])
    for k in [k for k in fs.amb if k not in present]:
        del fs.amb[k]
    slips = report.slips() if report is not None else set()
    for o in sd:
        k = o.key
        if k in fs.amb and k not in slips:
            continue
        if k in fs.amb:
            fs._remove([("amb",) + k])
        lam = wavelength(o.band_key)
        fs._insert(("amb",) + k, P0=np.array([[(sigma_amb / lam) ** 2]]))
        fs.amb[k] = (o.dL - (o.dP - fs.rtk_ifb(o.band_key))) / lam
    return fs


def gnss_blocks(fs, sd, sat_pos, base_pos, lever, report=None, gate=None):
    """Pseudorange and carrier rows against the current nominal state.

    ``sat_pos`` maps satellite id to its navigation-frame position. Weight
    factors from ``report`` scale the pseudorange variances and carrier
    rows classified as multipath are corrected by that epoch's estimate.
    """
    R = quat_to_dcm(fs.nav.q)
    l_b = np.asarray(lever.l_b if isinstance(lever, LeverArm) else lever)
    p_ant = fs.nav.p + R @ l_b
    n = fs.dim
    s = fs.cols("ins").start
    att = slice(s + ATT.start, s + ATT.stop)
    pos = slice(s + POS.start, s + POS.stop)
    c_clk = fs.layout["clock"]
    pr = report.pseudorange() if report is not None else {}
    cp = report.carrier() if report is not None else {}
    m = len(sd)
    HP, HL = np.zeros((m, n)), np.zeros((m, n))
    rP, rL = np.empty(m), np.empty(m)
    vP, vL = np.empty(m), np.empty(m)
    Rl = R @ skew(l_b)
    for i, o in enumerate(sd):
        d = sat_pos[o.sat] - p_ant
        rho = np.sqrt(d @ d)
        los = d / rho
        db = sat_pos[o.sat] - base_pos
        drho = rho - np.sqrt(db @ db)
        ifb = fs.rtk_ifb(o.band_key)
        lam = wavelength(o.band_key)
        row_att = los @ Rl
        for H in (HP, HL):
            H[i, pos] = -los
            H[i, att] = row_att
            H[i, c_clk] = 1.0
        if o.band_key != REFERENCE_BAND:
            HP[i, fs.layout[("ifb",) + o.band_key]] = 1.0
        HL[i, fs.layout[("amb",) + o.key]] = lam
        rP[i] = o.dP - (drho + fs.clock + ifb)
        e = cp.get(o.key)
        # only this epoch's multipath estimate is removed; the running sum serves slip detection
        c = e.classification.estimate if e is not None and e.classification.cls is ObsClass.MULTIPATH else 0.0
        rL[i] = (o.dL - c) - (drho + fs.clock + lam * fs.amb[o.key])
        f = pr[o.key].weight_factor if o.key in pr else 1.0
        vP[i] = o.var_P / f
        vL[i] = o.var_L
    return [Block("pseudorange", rP, HP, np.diag(vP), gate), Block("carrier", rL, HL, np.diag(vL), gate)]


def _block_ok(fs, b):
    S = b.H @ fs.P @ b.H.T + b.R
    S = 0.5 * (S + S.T)
    try:
        cf = cho_factor(S)
    except np.linalg.LinAlgError:
        fs.diagnostics.append(f"{b.name}: singular innovation covariance")
        return False
    if b.gate is not None:
        d2 = float(b.r @ cho_solve(cf, b.r))
        if d2 > chi2_threshold(b.gate, len(b.r)):
            fs.diagnostics.append(f"{b.name}: rejected by chi-square gate")
            return False
    return True


def measurement_update(fs, blocks):
    """Joint Kalman update with every block that passes its gate.

    Returns the list of block names that were applied.
    """
    blocks = [b for b in blocks if len(b.r) and _block_ok(fs, b)]
    if not blocks:
        return []
    H = np.vstack([b.H for b in blocks])
    r = np.concatenate([b.r for b in blocks])
    Rm = _block_diag([b.R for b in blocks])
    P = fs.P
    PHt = P @ H.T
    S = H @ PHt + Rm
    S = 0.5 * (S + S.T)
    try:
        cf = cho_factor(S)
    except np.linalg.LinAlgError:
        fs.diagnostics.append("joint update: singular innovation covariance")
        return []
    K = cho_solve(cf, PHt.T).T
    dx = K @ r
    IKH = np.eye(fs.dim) - K @ H
    fs.P = IKH @ P @ IKH.T + K @ Rm @ K.T
    fs.symmetrize()
    inject(fs, dx)
    return [b.name for b in blocks]


def _block_diag(mats):
    n = sum(m.shape[0] for m in mats)
    out = np.zeros((n, n))
    i = 0
    for m in mats:
        k = m.shape[0]
        out[i:i + k, i:i + k] = m
        i += k
    return out


def inject(fs, dx):
    """Fold an error-state estimate into the nominal state."""
    s = fs.cols("ins").start
    d = dx[s:s + INS_DIM]
    nav = fs.nav
    fs.nav = replace(nav, q=quat_normalize(quat_mul(nav.q, quat_exp(d[ATT]))),
                     v=nav.v + d[VEL], p=nav.p + d[POS], bg=nav.bg + d[BG], ba=nav.ba + d[BA])
    for pid, cam in fs.cams.items():
        c = fs.layout[("cam", pid)]
        fs.cams[pid] = replace(cam, q=quat_normalize(quat_mul(cam.q, quat_exp(dx[c:c + 3]))),
                               p=cam.p + dx[c + 3:c + 6])
    if fs.clock is not None:
        fs.clock += float(dx[fs.layout["clock"]])
    for k in fs.ifb:
        fs.ifb[k] += float(dx[fs.layout[("ifb",) + k]])
    for k in fs.amb:
        fs.amb[k] += float(dx[fs.layout[("amb",) + k]])
    return fs


def vision_block(fs, r_o, H_o, pose_ids, sigma, gate):
    """Expand a null-space-projected feature system to full state width."""
    H = np.zeros((len(r_o), fs.dim))
    for j, pid in enumerate(pose_ids):
        c = fs.layout[("cam", pid)]
        H[:, c:c + 6] = H_o[:, 6 * j:6 * j + 6]
    return Block("vision", r_o, H, sigma * sigma * np.eye(len(r_o)), gate)
