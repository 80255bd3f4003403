"""Frames, rotations and GNSS signal constants.

The navigation frame is a fixed local East-North-Up frame anchored at a
scenario origin. Earth rotation is ignored and gravity is a constant vector
along -Up.

Quaternions are Hamilton, scalar first ``[w, x, y, z]``; ``quat_to_dcm(q)``
maps body-frame vectors into the navigation frame.
"""

from dataclasses import dataclass

import numpy as np

C_LIGHT = 299792458.0
GRAVITY = 9.80665
GRAVITY_N = np.array([0.0, 0.0, -GRAVITY])

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)


@dataclass(frozen=True)
class SignalBand:
    system: str
    label: str
    frequency: float  # Hz

    @property
    def wavelength(self):
        return C_LIGHT / self.frequency

    @property
    def key(self):
        return (self.system, self.label)


_MHZ = 1.0e6
BANDS = {
    ("GPS", "L1"): SignalBand("GPS", "L1", 1575.42 * _MHZ),
    ("GPS", "L2"): SignalBand("GPS", "L2", 1227.60 * _MHZ),
    ("GPS", "L5"): SignalBand("GPS", "L5", 1176.45 * _MHZ),
    ("GAL", "E1"): SignalBand("GAL", "E1", 1575.42 * _MHZ),
    ("GAL", "E5a"): SignalBand("GAL", "E5a", 1176.45 * _MHZ),
    ("GAL", "E5b"): SignalBand("GAL", "E5b", 1207.14 * _MHZ),
    ("BDS", "B1I"): SignalBand("BDS", "B1I", 1561.098 * _MHZ),
    ("BDS", "B2"): SignalBand("BDS", "B2", 1207.14 * _MHZ),
    ("BDS", "B3"): SignalBand("BDS", "B3", 1268.52 * _MHZ),
    ("QZSS", "L1"): SignalBand("QZSS", "L1", 1575.42 * _MHZ),
    ("QZSS", "L2"): SignalBand("QZSS", "L2", 1227.60 * _MHZ),
    ("QZSS", "L5"): SignalBand("QZSS", "L5", 1176.45 * _MHZ),
}

# BDS B1I carries the receiver-clock datum; its inter-frequency bias is 0.
REFERENCE_BAND = ("BDS", "B1I")

SYSTEM_PREFIX = {"GPS": "G", "BDS": "C", "GAL": "E", "QZSS": "J"}


def get_band(system, label):
    try:
        return BANDS[(system, label)]
    except KeyError:
        raise KeyError(f"unknown signal band {system}/{label}") from None


def wavelength(band):
    """Carrier wavelength in metres for a ``SignalBand`` or ``(system, label)``."""
    if not isinstance(band, SignalBand):
        band = get_band(*band)
    return C_LIGHT / band.frequency


@dataclass(frozen=True)
class FrameOrigin:
    lat: float  # rad
    lon: float  # rad
    height: float  # m

    def __post_init__(self):
        if abs(self.lat) > np.pi / 2 or abs(self.lon) > np.pi:
            raise ValueError("origin latitude/longitude out of range")

    @property
    def ecef(self):
        return geodetic_to_ecef(self.lat, self.lon, self.height)

    @property
    def rotation(self):
        """Rotation taking ECEF difference vectors into ENU."""
        return enu_rotation(self.lat, self.lon)


def geodetic_to_ecef(lat, lon, h):
    sl, cl = np.sin(lat), np.cos(lat)
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sl * sl)
    return np.array([
        (n + h) * cl * np.cos(lon),
        (n + h) * cl * np.sin(lon),
        (n * (1.0 - WGS84_E2) + h) * sl,
    ])


def ecef_to_geodetic(p):
    x, y, z = p
    lon = np.arctan2(y, x)
    r = np.hypot(x, y)
    lat = np.arctan2(z, r * (1.0 - WGS84_E2))
    for _ in range(8):
        sl = np.sin(lat)
        n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sl * sl)
        h = r / np.cos(lat) - n
        lat = np.arctan2(z, r * (1.0 - WGS84_E2 * n / (n + h)))
    sl = np.sin(lat)
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sl * sl)
    h = r / np.cos(lat) - n
    return lat, lon, h


def enu_rotation(lat, lon):
    sl, cl = np.sin(lat), np.cos(lat)
    so, co = np.sin(lon), np.cos(lon)
    return np.array([
        [-so, co, 0.0],
        [-sl * co, -sl * so, cl],
        [cl * co, cl * so, sl],
    ])


def ecef_to_enu(p_ecef, origin):
    p_ecef = np.asarray(p_ecef, dtype=float)
    return (p_ecef - origin.ecef) @ origin.rotation.T


def enu_to_ecef(p_enu, origin):
    p_enu = np.asarray(p_enu, dtype=float)
    return p_enu @ origin.rotation + origin.ecef


# --- rotations -------------------------------------------------------------

def skew(v):
    """Cross-product matrix: ``skew(v) @ w == np.cross(v, w)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    q = q / np.sqrt(q @ q)
    return q if q[0] >= 0.0 else -q


def quat_mul(p, q):
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ])


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_exp(rotvec):
    """Unit quaternion of a rotation vector (rad)."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.sqrt(rotvec @ rotvec)
    if angle < 1e-12:
        q = np.array([1.0, 0.5 * rotvec[0], 0.5 * rotvec[1], 0.5 * rotvec[2]])
        return q / np.sqrt(q @ q)
    s = np.sin(0.5 * angle) / angle
    return np.array([np.cos(0.5 * angle), s * rotvec[0], s * rotvec[1], s * rotvec[2]])


def quat_log(q):
    q = quat_normalize(q)
    vn = np.sqrt(q[1:] @ q[1:])
    if vn < 1e-12:
        return 2.0 * q[1:]
    return 2.0 * np.arctan2(vn, q[0]) * q[1:] / vn


def quat_to_dcm(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def dcm_to_quat(R):
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


def so3_exp(rotvec):
    return quat_to_dcm(quat_exp(rotvec))


def euler_to_dcm(roll, pitch, yaw):
    """Body-to-ENU rotation for z-y-x (yaw, pitch, roll) Euler angles."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def dcm_to_euler(R):
    """Inverse of :func:`euler_to_dcm`; returns ``(roll, pitch, yaw)``."""
    pitch = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
    roll = np.arctan2(R[2, 1], R[2, 2])
    yaw = np.arctan2(R[1, 0], R[0, 0])
    return roll, pitch, yaw


def elevation_azimuth(los_enu):
    """Elevation and azimuth (rad, azimuth clockwise from North) of a unit ENU vector."""
    e, n, u = los_enu
    return np.arcsin(np.clip(u, -1.0, 1.0)), np.arctan2(e, n) % (2.0 * np.pi)
