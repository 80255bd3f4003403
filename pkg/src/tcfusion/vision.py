"""Stereo point-feature model for a sliding window of camera poses.

Camera poses are stored as left-camera-to-navigation rotations and left
camera positions. Their error state is ``[dtheta_C, dp_C]`` with
``R_C = R_C_nominal @ Exp(dtheta_C)``.

Observations are normalized image-plane coordinates ``(u1, v1, u2, v2)`` of
the left and right cameras.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.stats import chi2

from .geo import quat_to_dcm, skew

SIGMA_VIS = 0.05  # normalized image-plane units
MAX_WINDOW = 20
MAX_FEATURES = 150
MIN_PARALLAX = 1.0e-3  # rad
GATE_PROB = 0.95


class CheiralityError(ValueError):
    """Landmark is not in front of a camera."""


class TriangulationError(ValueError):
    """Track cannot be triangulated (parallax, convergence or depth)."""


@dataclass(frozen=True)
class StereoExtrinsics:
    R_c1_c2: np.ndarray  # left-camera frame -> right-camera frame
    p_c2_c1: np.ndarray  # right camera origin expressed in the left-camera frame (m)
    R_cb: np.ndarray  # camera -> body
    p_cb: np.ndarray  # camera origin in the body frame (m)

    def __post_init__(self):
        if np.linalg.norm(self.p_c2_c1) <= 0:
            raise ValueError("stereo baseline must be non-zero")

    @classmethod
    def forward_looking(cls, baseline=0.2, p_cb=(0.4, 0.0, 0.3)):
        """Cameras looking along body +x with body axes forward-left-up."""
        R_cb = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        return cls(np.eye(3), np.array([baseline, 0.0, 0.0]), R_cb, np.asarray(p_cb, dtype=float))

    def to_dict(self):
        return {k: np.asarray(getattr(self, k)).tolist() for k in ("R_c1_c2", "p_c2_c1", "R_cb", "p_cb")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(d[k], dtype=float) for k in ("R_c1_c2", "p_c2_c1", "R_cb", "p_cb")})


@dataclass(frozen=True)
class CameraPoseState:
    q: np.ndarray  # left camera -> navigation
    p: np.ndarray  # left camera position (m)
    id: int
    t: float

    @property
    def R(self):
        return quat_to_dcm(self.q)


@dataclass
class FeatureTrack:
    id: int
    obs: list = field(default_factory=list)  # (pose_id, z[4])

    def add(self, pose_id, z):
        self.obs.append((pose_id, np.asarray(z, dtype=float)))

    @property
    def pose_ids(self):
        return [pid for pid, _ in self.obs]


def _camera_points(p_f, R_C, p_C, ext):
    p1 = R_C.T @ (p_f - p_C)
    p2 = ext.R_c1_c2 @ (p1 - ext.p_c2_c1)
    return p1, p2


def project_stereo(p_f, pose, ext):
    """Normalized stereo coordinates ``(u1, v1, u2, v2)`` of landmark ``p_f`` (nav frame)."""
    p1, p2 = _camera_points(np.asarray(p_f, dtype=float), pose.R, pose.p, ext)
    if p1[2] <= 0 or p2[2] <= 0:
        raise CheiralityError("landmark behind camera")
    return np.array([p1[0] / p1[2], p1[1] / p1[2], p2[0] / p2[2], p2[1] / p2[2]])


def _proj_jac(p):
    iz = 1.0 / p[2]
    return np.array([[iz, 0.0, -p[0] * iz * iz], [0.0, iz, -p[1] * iz * iz]])


def project_jacobians(p_f, pose, ext):
    """Prediction, pose Jacobian (4x6 over ``[dtheta_C, dp_C]``) and landmark Jacobian (4x3)."""
    R = pose.R
    p1, p2 = _camera_points(p_f, R, pose.p, ext)
    if p1[2] <= 0 or p2[2] <= 0:
        raise CheiralityError("landmark behind camera")
    z = np.array([p1[0] / p1[2], p1[1] / p1[2], p2[0] / p2[2], p2[1] / p2[2]])
    dz_dp1 = np.vstack([_proj_jac(p1), _proj_jac(p2) @ ext.R_c1_c2])
    J_pose = np.hstack([dz_dp1 @ skew(p1), -dz_dp1 @ R.T])
    J_f = dz_dp1 @ R.T
    return z, J_pose, J_f


def _rays(track, poses, ext):
    """Unit bearing rays in the navigation frame for every camera observation."""
    R12t = ext.R_c1_c2.T
    dirs = []
    for pid, z in track.obs:
        R = poses[pid].R
        d1 = R @ np.array([z[0], z[1], 1.0])
        d2 = R @ (R12t @ np.array([z[2], z[3], 1.0]))
        dirs.append(d1 / np.linalg.norm(d1))
        dirs.append(d2 / np.linalg.norm(d2))
    return np.array(dirs)


def parallax(track, poses, ext):
    d = _rays(track, poses, ext)
    c = np.clip(d @ d.T, -1.0, 1.0)
    return float(np.arccos(c.min()))


def triangulate(track, poses, ext, sigma=SIGMA_VIS, max_iter=10, tol=1e-9):
    """Landmark position (nav frame) by Gauss-Newton in anchored inverse depth.

    Steps are halved when they would push the landmark behind a camera or
    raise the reprojection cost.

    The anchor is the first observing pose; parameters are
    ``(x/z, y/z, 1/z)`` in its left-camera frame. Raises
    :class:`TriangulationError` on low parallax, non-convergence, negative
    depth or a reprojection RMS above ``5 * sigma``.
    """
    ids = track.pose_ids
    if len(set(ids)) < 2:
        raise TriangulationError("fewer than two observing poses")
    if parallax(track, poses, ext) < MIN_PARALLAX:
        raise TriangulationError("insufficient parallax")
    anchor = poses[ids[0]]
    RA, pA = anchor.R, anchor.p
    rel = []
    for pid, z in track.obs:
        Ri = poses[pid].R
        rel.append((Ri.T @ RA, Ri.T @ (pA - poses[pid].p), z))
    stacked = tuple(np.array(x) for x in zip(*rel))

    # linear initial guess: closest point to all rays, in the anchor frame
    R12t = ext.R_c1_c2.T
    M = np.zeros((3, 3))
    b = np.zeros(3)
    for R_iA, t_iA, z in rel:
        R_Ai = R_iA.T
        o1 = -R_Ai @ t_iA
        for o, d in ((o1, R_Ai @ np.array([z[0], z[1], 1.0])),
                     (o1 + R_Ai @ ext.p_c2_c1, R_Ai @ (R12t @ np.array([z[2], z[3], 1.0])))):
            d = d / np.linalg.norm(d)
            A = np.eye(3) - np.outer(d, d)
            M += A
            b += A @ o
    try:
        X = np.linalg.solve(M, b)
    except np.linalg.LinAlgError:
        raise TriangulationError("degenerate ray geometry") from None
    theta = np.array([X[0] / X[2], X[1] / X[2], 1.0 / X[2]]) if X[2] > 0 else None
    r = J = None
    if theta is not None:
        r, J = _inverse_depth_system(theta, stacked, ext)
    if r is None:
        # noisy rays can put the closest point behind a camera; fall back to
        # the anchor bearing and the best inverse depth on a coarse grid
        z0 = track.obs[0][1]
        best = None
        for rho in np.geomspace(1e-3, 2.0, 40):
            cand = np.array([z0[0], z0[1], rho])
            rc, Jc = _inverse_depth_system(cand, stacked, ext)
            if rc is not None and (best is None or rc @ rc < best[1] @ best[1]):
                best = (cand, rc, Jc)
        if best is None:
            raise TriangulationError("no initial depth in front of all cameras")
        theta, r, J = best
    cost = r @ r
    converged = False
    for _ in range(max_iter):
        try:
            step = np.linalg.solve(J.T @ J, -J.T @ r)
        except np.linalg.LinAlgError:
            raise TriangulationError("singular normal matrix") from None
        # step halving keeps the landmark in front of every camera and the cost non-increasing
        for _ in range(8):
            r_new, J_new = _inverse_depth_system(theta + step, stacked, ext)
            if r_new is not None and r_new @ r_new <= cost * (1.0 + 1e-12):
                break
            step = 0.5 * step
        else:
            raise TriangulationError("landmark behind camera during refinement")
        theta = theta + step
        cost_new = r_new @ r_new
        small_step = np.linalg.norm(step) < tol * (1.0 + np.linalg.norm(theta))
        # a cost drop far below one observation variance moves the landmark by a negligible fraction of its uncertainty
        flat = cost - cost_new <= 1e-6 * max(sigma, 1e-6) ** 2
        r, J, cost = r_new, J_new, cost_new
        if small_step or flat:
            converged = True
            break
    if not converged:
        raise TriangulationError("Gauss-Newton did not converge")
    if theta[2] <= 0:
        raise TriangulationError("non-positive inverse depth")
    if np.sqrt(np.mean(r * r)) > 5.0 * sigma:
        raise TriangulationError("reprojection error too large")
    p_anchor = np.array([theta[0], theta[1], 1.0]) / theta[2]
    return RA @ p_anchor + pA


def _inverse_depth_system(theta, rel, ext):
    """Stacked reprojection residuals and their Jacobian in ``(a, b, rho)``.

    ``rel`` holds anchor-to-camera rotations (n, 3, 3), translations (n, 3)
    and observations (n, 4).

    Returns ``(None, None)`` when the landmark is behind any camera.
    """
    R_iA, t_iA, z = rel
    n = len(z)
    a, b, rho = theta
    m = np.array([a, b, 1.0])
    h1 = R_iA @ m + rho * t_iA  # (n, 3)
    h2 = (h1 - rho * ext.p_c2_c1) @ ext.R_c1_c2.T
    if np.any(h1[:, 2] <= 0) or np.any(h2[:, 2] <= 0):
        return None, None
    dh1 = np.stack([R_iA[:, :, 0], R_iA[:, :, 1], t_iA], axis=2)  # (n, 3, 3)
    dh2 = dh1.copy()
    dh2[:, :, 2] -= ext.p_c2_c1
    dh2 = ext.R_c1_c2 @ dh2
    res = np.empty((n, 4))
    jac = np.empty((n, 4, 3))
    for k, (h, dh) in enumerate(((h1, dh1), (h2, dh2))):
        iz = 1.0 / h[:, 2]
        res[:, 2 * k] = h[:, 0] * iz
        res[:, 2 * k + 1] = h[:, 1] * iz
        jac[:, 2 * k] = (dh[:, 0] - res[:, 2 * k, None] * dh[:, 2]) * iz[:, None]
        jac[:, 2 * k + 1] = (dh[:, 1] - res[:, 2 * k + 1, None] * dh[:, 2]) * iz[:, None]
    return (res - z).ravel(), jac.reshape(4 * n, 3)


def feature_update_blocks(track, poses, ext, p_f):
    """Residual and pose Jacobian of one track with the landmark eliminated.

    Returns ``(r_o, H_o, pose_ids)`` where ``H_o`` has 6 columns per entry
    of ``pose_ids`` (in that order) and ``4 * n_obs - 3`` rows, obtained by
    projecting onto the left null space of the landmark Jacobian.
    """
    pose_ids = list(dict.fromkeys(track.pose_ids))
    col = {pid: 6 * j for j, pid in enumerate(pose_ids)}
    n = len(track.obs)
    r = np.empty(4 * n)
    Hx = np.zeros((4 * n, 6 * len(pose_ids)))
    Hf = np.empty((4 * n, 3))
    for k, (pid, z) in enumerate(track.obs):
        zh, Jp, Jf = project_jacobians(p_f, poses[pid], ext)
        r[4 * k:4 * k + 4] = z - zh
        Hx[4 * k:4 * k + 4, col[pid]:col[pid] + 6] = Jp
        Hf[4 * k:4 * k + 4] = Jf
    Q, _ = np.linalg.qr(Hf, mode="complete")
    N = Q[:, 3:]
    if N.shape[1] != 4 * n - 3:
        raise RuntimeError("null-space dimension mismatch")
    return N.T @ r, N.T @ Hx, pose_ids


def chi2_gate(r, S, prob=GATE_PROB):
    """True when ``r' S^-1 r`` is inside the ``prob`` chi-square quantile."""
    try:
        d2 = float(r @ np.linalg.solve(S, r))
    except np.linalg.LinAlgError:
        return False
    return d2 <= chi2_threshold(prob, len(r))


@lru_cache(maxsize=None)
def chi2_threshold(prob, dof):
    return float(chi2.ppf(prob, dof))
