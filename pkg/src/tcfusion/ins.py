"""Strapdown mechanization and the 15-state INS error model.

Error-state ordering is ``[dtheta, dv, dp, dbw, dba]``. The attitude error is
a body-frame (right) perturbation, ``R_true = R_nominal @ Exp(dtheta)``;
the remaining errors are additive.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .geo import GRAVITY_N, quat_exp, quat_mul, quat_normalize, quat_to_dcm, skew

INS_DIM = 15
ATT, VEL, POS, BG, BA = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))

_DEG = np.pi / 180.0
_SQRT_HOUR = 60.0  # sqrt(3600 s)
_MGAL = 1.0e-5  # m/s^2


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: np.ndarray  # rad/s, body
    accel: np.ndarray  # m/s^2 specific force, body


@dataclass(frozen=True)
class NavState:
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: float = 0.0

    @property
    def R(self):
        return quat_to_dcm(self.q)

    def is_finite(self):
        return all(np.all(np.isfinite(x)) for x in (self.q, self.v, self.p, self.bg, self.ba)) and np.isfinite(self.t)


@dataclass(frozen=True)
class ImuSpec:
    """IMU error budget in datasheet units.

    Bias instabilities are turned into random-walk PSDs by assuming the bias
    wanders by one instability value over ``bias_corr_time`` seconds, i.e.
    ``q = sigma_b**2 / bias_corr_time``.
    """

    arw: float  # deg/sqrt(h)
    vrw: float  # m/s/sqrt(h)
    accel_bias: float  # mGal
    gyro_bias: float  # deg/h
    rate: float  # Hz
    bias_corr_time: float = 3600.0  # s

    def __post_init__(self):
        if min(self.arw, self.vrw, self.accel_bias, self.gyro_bias, self.rate, self.bias_corr_time) <= 0:
            raise ValueError("IMU spec values must be positive")

    @property
    def gyro_noise_density(self):
        """Angular random walk in rad/sqrt(s)."""
        return self.arw * _DEG / _SQRT_HOUR

    @property
    def accel_noise_density(self):
        """Velocity random walk in m/s/sqrt(s)."""
        return self.vrw / _SQRT_HOUR

    @property
    def gyro_bias_sigma(self):
        return self.gyro_bias * _DEG / 3600.0

    @property
    def accel_bias_sigma(self):
        return self.accel_bias * _MGAL

    @property
    def gyro_bias_psd(self):
        return self.gyro_bias_sigma ** 2 / self.bias_corr_time

    @property
    def accel_bias_psd(self):
        return self.accel_bias_sigma ** 2 / self.bias_corr_time

    def noise_psd(self):
        """Continuous PSD of ``[n_w, n_a, n_bw, n_ba]`` as a 12x12 matrix."""
        d = np.repeat([self.gyro_noise_density ** 2, self.accel_noise_density ** 2,
                       self.gyro_bias_psd, self.accel_bias_psd], 3)
        return np.diag(d)

    def scaled(self, factor):
        return replace(self, arw=self.arw * factor, vrw=self.vrw * factor,
                       accel_bias=self.accel_bias * factor, gyro_bias=self.gyro_bias * factor)


ADIS16470 = ImuSpec(arw=0.34, vrw=0.18, accel_bias=1300.0, gyro_bias=8.0, rate=100.0)
SPAN_ISA_100C = ImuSpec(arw=0.005, vrw=0.018, accel_bias=100.0, gyro_bias=0.05, rate=200.0)


def _derivative(q, v, w, a, g):
    dq = 0.5 * quat_mul(q, (0.0, w[0], w[1], w[2]))
    dv = quat_to_dcm(q) @ a + g
    return dq, dv


def rk4_step(q, v, p, w0, a0, w1, a1, dt, g=GRAVITY_N):
    """One fourth-order Runge-Kutta step with inputs linear in time over ``dt``.

    ``w``/``a`` are bias-corrected body rates and specific forces at the start
    and end of the interval.
    """
    wm = 0.5 * (w0 + w1)
    am = 0.5 * (a0 + a1)
    h = 0.5 * dt
    k1q, k1v = _derivative(q, v, w0, a0, g)
    k1p = v
    k2q, k2v = _derivative(q + h * k1q, v + h * k1v, wm, am, g)
    k2p = v + h * k1v
    k3q, k3v = _derivative(q + h * k2q, v + h * k2v, wm, am, g)
    k3p = v + h * k2v
    k4q, k4v = _derivative(q + dt * k3q, v + dt * k3v, w1, a1, g)
    k4p = v + dt * k3v
    s = dt / 6.0
    q = q + s * (k1q + 2 * k2q + 2 * k3q + k4q)
    v = v + s * (k1v + 2 * k2v + 2 * k3v + k4v)
    p = p + s * (k1p + 2 * k2p + 2 * k3p + k4p)
    return quat_normalize(q), v, p


def mechanize(state, sample, dt, sample_end=None, gravity=None):
    """Advance ``state`` by ``dt`` seconds with a fourth-order Runge-Kutta integrator.

    Parameters
    ----------
    state : NavState
    sample : ImuSample
        Measurement at the start of the interval.
    dt : float
        Step in seconds, ``0 < dt <= 0.1``.
    sample_end : ImuSample, optional
        Measurement at the end of the interval. When given the inputs are
        interpolated linearly, otherwise they are held constant.
    gravity : array_like, optional
        Navigation-frame gravity; defaults to ``(0, 0, -9.80665)``.

    Returns
    -------
    NavState
    """
    if not (0.0 < dt <= 0.1):
        raise ValueError(f"dt must be in (0, 0.1], got {dt}")
    g = GRAVITY_N if gravity is None else np.asarray(gravity, dtype=float)
    w0 = np.asarray(sample.gyro, dtype=float) - state.bg
    a0 = np.asarray(sample.accel, dtype=float) - state.ba
    if sample_end is None:
        w1, a1 = w0, a0
    else:
        w1 = np.asarray(sample_end.gyro, dtype=float) - state.bg
        a1 = np.asarray(sample_end.accel, dtype=float) - state.ba
    if not (state.is_finite() and np.all(np.isfinite(w0)) and np.all(np.isfinite(a0))
            and np.all(np.isfinite(w1)) and np.all(np.isfinite(a1))):
        raise ValueError("non-finite input to mechanization")
    q, v, p = rk4_step(state.q, state.v, state.p, w0, a0, w1, a1, dt, g)
    return replace(state, q=q, v=v, p=p, t=state.t + dt)


def error_jacobians(state, sample):
    """Continuous-time error dynamics ``F`` (15x15) and noise map ``G`` (15x12)."""
    R = quat_to_dcm(state.q)
    w = np.asarray(sample.gyro, dtype=float) - state.bg
    a = np.asarray(sample.accel, dtype=float) - state.ba
    return _jacobians(R, w, a)


def _jacobians(R, w, a):
    F = np.zeros((INS_DIM, INS_DIM))
    I3 = np.eye(3)
    F[ATT, ATT] = -skew(w)
    F[ATT, BG] = -I3
    F[VEL, ATT] = -R @ skew(a)
    F[VEL, BA] = -R
    F[POS, VEL] = I3
    G = np.zeros((INS_DIM, 12))
    G[ATT, 0:3] = -I3
    G[VEL, 3:6] = -R
    G[BG, 6:9] = I3
    G[BA, 9:12] = I3
    return F, G


def transition(F, dt, tol=1e-15, max_terms=12):
    """Truncated Taylor series of ``expm(F dt)``.

    Terms are added until the newest one drops below ``tol`` (in max-norm),
    which for ``|F dt| < 0.1`` stops after five or six terms.
    """
    Fdt = F * dt
    Phi = np.eye(F.shape[0]) + Fdt
    term = Fdt
    for k in range(2, max_terms + 1):
        term = term @ Fdt / k
        Phi += term
        if np.max(np.abs(term)) < tol:
            break
    return Phi


def discretize(F, G, Qc, dt):
    """Transition matrix and trapezoidal process noise.

    ``Phi = expm(F dt)`` by truncated Taylor series;
    ``Qd = (Phi G Qc G' Phi' + G Qc G') dt / 2``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    Phi = transition(F, dt)
    GQG = G @ Qc @ G.T
    Qd = 0.5 * (Phi @ GQG @ Phi.T + GQG) * dt
    return Phi, 0.5 * (Qd + Qd.T)


def propagate_batch(state, t, gyro, accel, Qc, gravity=None):
    """Mechanize through IMU samples ``t[0] -> t[-1]`` and accumulate the
    INS transition and noise over the whole interval.

    Returns ``(state, Phi, Qd)`` where ``Phi``/``Qd`` map the 15-state error
    covariance from ``t[0]`` to ``t[-1]``.
    """
    g = GRAVITY_N if gravity is None else np.asarray(gravity, dtype=float)
    Phi_tot = np.eye(INS_DIM)
    Q_tot = np.zeros((INS_DIM, INS_DIM))
    q, v, p = state.q, state.v, state.p
    bg, ba = state.bg, state.ba
    for k in range(len(t) - 1):
        dt = t[k + 1] - t[k]
        if dt <= 0.0:
            continue
        w0 = gyro[k] - bg
        a0 = accel[k] - ba
        w1 = gyro[k + 1] - bg
        a1 = accel[k + 1] - ba
        F, G = _jacobians(quat_to_dcm(q), w0, a0)
        Phi, Qd = discretize(F, G, Qc, dt)
        Phi_tot = Phi @ Phi_tot
        Q_tot = Phi @ Q_tot @ Phi.T + Qd
        q, v, p = rk4_step(q, v, p, w0, a0, w1, a1, dt, g)
    Q_tot = 0.5 * (Q_tot + Q_tot.T)
    return replace(state, q=q, v=v, p=p, t=float(t[-1])), Phi_tot, Q_tot
