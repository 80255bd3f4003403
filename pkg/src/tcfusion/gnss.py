"""Single-difference GNSS observation model, geometry and weighting.

Carrier phase is kept in metres everywhere; ambiguities are in cycles and
are scaled by the band wavelength only where they enter a prediction.
"""

from dataclasses import dataclass, field

import numpy as np

from .geo import REFERENCE_BAND, get_band, wavelength

ELEVATION_CUTOFF = np.deg2rad(10.0)
SIGMA_P = 0.3  # m
SIGMA_L = 0.03  # m
SNR_REF = 50.0  # dB-Hz
SNR_SCALE = 10.0  # dB per decade of variance

WEIGHT_MODELS = ("snr", "elev", "hybrid")


@dataclass(frozen=True)
class GnssObservation:
    t: float
    sat: str
    system: str
    band: str
    P: float  # m
    L: float  # m
    snr: float  # dB-Hz
    elev: float  # rad
    az: float  # rad

    def __post_init__(self):
        if not self.P > 0:
            raise ValueError(f"pseudorange must be positive ({self.sat} {self.band})")
        if not (0.0 <= self.elev <= np.pi / 2 + 1e-12):
            raise ValueError(f"elevation out of range ({self.sat} {self.band})")

    @property
    def key(self):
        return (self.sat, self.band)


@dataclass(frozen=True)
class SdObservation:
    """Rover-minus-base single difference of one signal."""

    t: float
    sat: str
    system: str
    band: str
    dP: float
    dL: float
    snr: float
    elev: float
    az: float
    var_P: float = SIGMA_P ** 2
    var_L: float = SIGMA_L ** 2

    @property
    def key(self):
        return (self.sat, self.band)

    @property
    def band_key(self):
        return (self.system, self.band)

    @property
    def wavelength(self):
        return wavelength((self.system, self.band))


@dataclass
class RtkState:
    """RTK parameters relative to the INS position.

    ``clock`` is the single-difference receiver clock datum (m), ``ifb`` maps
    ``(system, band)`` to an inter-frequency bias (m) with the reference band
    pinned to zero, and ``amb`` maps ``(sat, band)`` to a float
    single-difference ambiguity in cycles.
    """

    clock: float = 0.0
    ifb: dict = field(default_factory=dict)
    amb: dict = field(default_factory=dict)

    def ifb_of(self, band_key):
        if tuple(band_key) == REFERENCE_BAND:
            return 0.0
        return self.ifb.get(tuple(band_key), 0.0)


def geometric_range(p_rcv, p_sat):
    """Range (m) and unit line of sight receiver -> satellite."""
    d = np.asarray(p_sat, dtype=float) - np.asarray(p_rcv, dtype=float)
    rho = np.sqrt(d @ d)
    if rho == 0.0:
        raise ValueError("receiver and satellite positions coincide")
    return rho, d / rho


def predict_sd(rtk, rover_pos, base_pos, sat_pos, sat, system, band, carrier=True):
    """INS-predicted single-difference pseudorange and carrier phase.

    Returns
    -------
    P_hat, L_hat : float
        Predicted SD pseudorange and carrier (m). ``L_hat`` is ``None`` when
        ``carrier`` is false.
    rows : dict
        Partial derivatives: ``"pos"`` w.r.t. the rover antenna position,
        ``"clock"``, ``"ifb"`` (0 on the reference band) and ``"amb"``
        (wavelength, carrier only).
    """
    rho_r, los = geometric_range(rover_pos, sat_pos)
    rho_b, _ = geometric_range(base_pos, sat_pos)
    drho = rho_r - rho_b
    band_key = (system, band)
    is_ref = band_key == REFERENCE_BAND
    P_hat = drho + rtk.clock + rtk.ifb_of(band_key)
    rows = {"pos": -los, "clock": 1.0, "ifb": 0.0 if is_ref else 1.0}
    L_hat = None
    if carrier:
        if (sat, band) not in rtk.amb:
            raise KeyError(f"no ambiguity state for {sat} {band}")
        lam = wavelength(band_key)
        L_hat = drho + rtk.clock + lam * rtk.amb[(sat, band)]
        rows["amb"] = lam
    return P_hat, L_hat, rows


def weight_variance(obs, model, sigma_base, snr_ref=SNR_REF, snr_scale=SNR_SCALE):
    """Observation variance (m^2) under a classical stochastic model.

    ``elev``: ``sigma^2 / sin^2(el)``; ``snr``: ``sigma^2 * 10^((S0 - snr)/a)``;
    ``hybrid``: the product of both factors.
    """
    if sigma_base <= 0:
        raise ValueError("sigma_base must be positive")
    if model not in WEIGHT_MODELS:
        raise ValueError(f"unknown weighting model {model!r}")
    var = sigma_base * sigma_base
    if model in ("elev", "hybrid"):
        s = np.sin(obs.elev)
        if s <= 0.0:
            raise ValueError("elevation must be above the horizon")
        var /= s * s
    if model in ("snr", "hybrid"):
        var *= 10.0 ** ((snr_ref - obs.snr) / snr_scale)
    return var


def single_difference(rover, base, cutoff=ELEVATION_CUTOFF):
    """Match rover and base observations of one epoch by ``(sat, band)``.

    Signals below the elevation cutoff are dropped. SNR, elevation and
    azimuth are taken from the rover.
    """
    base_by_key = {o.key: o for o in base}
    out = []
    for o in rover:
        b = base_by_key.get(o.key)
        if b is None or o.elev < cutoff:
            continue
        get_band(o.system, o.band)
        out.append(SdObservation(t=o.t, sat=o.sat, system=o.system, band=o.band,
                                 dP=o.P - b.P, dL=o.L - b.L, snr=o.snr, elev=o.elev, az=o.az))
    out.sort(key=lambda s: (s.sat, s.band))
    return out


@dataclass(frozen=True)
class CircularOrbit:
    """Synthetic circular orbit: ``pos0`` (ECEF, m) rotated about ``axis``
    through the geocentre at ``rate`` rad/s."""

    sat: str
    system: str
    pos0: tuple
    axis: tuple
    rate: float
    t0: float = 0.0

    def position(self, t):
        angle = self.rate * (t - self.t0)
        k = np.asarray(self.axis)
        p = np.asarray(self.pos0)
        c, s = np.cos(angle), np.sin(angle)
        return p * c + np.cross(k, p) * s + k * (k @ p) * (1.0 - c)

    def to_dict(self):
        return {"sat": self.sat, "sys": self.system, "pos0": list(self.pos0),
                "axis": list(self.axis), "rate": self.rate, "t0": self.t0}

    @classmethod
    def from_dict(cls, d):
        return cls(sat=d["sat"], system=d["sys"], pos0=tuple(d["pos0"]),
                   axis=tuple(d["axis"]), rate=d["rate"], t0=d.get("t0", 0.0))


def pdop(los_vectors):
    """Position dilution of precision for a set of unit LOS vectors."""
    los = np.asarray(los_vectors)
    if len(los) < 4:
        return np.inf
    A = np.hstack([-los, np.ones((len(los), 1))])
    Q = np.linalg.inv(A.T @ A)
    return float(np.sqrt(np.trace(Q[:3, :3])))
