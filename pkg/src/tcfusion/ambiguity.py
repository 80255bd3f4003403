"""Integer ambiguity resolution by LAMBDA decorrelation and mlambda search.

Covariances are factored as ``Q = L' diag(D) L`` with ``L`` unit lower
triangular, the convention of the modified LAMBDA method.
"""

from dataclasses import dataclass, field

import numpy as np

from .filter import inject
from .geo import SYSTEM_PREFIX

RATIO_THRESHOLD = 2.0
MAX_NODES = 1_000_000


class SearchAbort(RuntimeError):
    """Integer search exceeded the node budget."""


@dataclass
class FloatAmbiguities:
    a: np.ndarray  # cycles
    Q: np.ndarray  # cycles^2
    keys: list  # (ref_sat, sat, system, band)
    D: np.ndarray = None  # map from the single-difference vector


@dataclass
class FixResult:
    integers: np.ndarray = None
    ratio: float = 0.0
    applied: bool = False
    keys: list = field(default_factory=list)
    qforms: np.ndarray = None
    reason: str = ""


def ld_factorization(Q):
    """``Q = L' diag(D) L``; raises ``ValueError`` when ``Q`` is not SPD."""
    A = np.array(Q, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or not np.allclose(A, A.T, rtol=1e-9, atol=1e-12):
        raise ValueError("covariance must be square and symmetric")
    L = np.zeros((n, n))
    D = np.zeros(n)
    for i in range(n - 1, -1, -1):
        D[i] = A[i, i]
        if D[i] <= 0.0:
            raise ValueError("covariance is not positive definite")
        a = np.sqrt(D[i])
        L[i, :i + 1] = A[i, :i + 1] / a
        for j in range(i):
            A[j, :j + 1] -= L[i, :j + 1] * L[i, j]
        L[i, :i + 1] /= L[i, i]
    return L, D


def _gauss(L, Z, i, j):
    mu = np.round(L[i, j])
    if mu != 0.0:
        L[i:, j] -= mu * L[i:, i]
        Z[:, j] -= mu * Z[:, i]


def _perm(L, D, j, delta, Z):
    eta = D[j] / delta
    lam = D[j + 1] * L[j + 1, j] / delta
    D[j] = eta * D[j + 1]
    D[j + 1] = delta
    L[j:j + 2, :j] = np.array([[-L[j + 1, j], 1.0], [eta, lam]]) @ L[j:j + 2, :j]
    L[j + 1, j] = lam
    L[j + 2:, [j, j + 1]] = L[j + 2:, [j + 1, j]]
    Z[:, [j, j + 1]] = Z[:, [j + 1, j]]


def _reduce(L, D):
    n = len(D)
    Z = np.eye(n)
    j = k = n - 2
    while j >= 0:
        if j <= k:
            for i in range(j + 1, n):
                _gauss(L, Z, i, j)
        delta = D[j] + L[j + 1, j] ** 2 * D[j + 1]
        if delta + 1e-6 < D[j + 1]:
            _perm(L, D, j, delta, Z)
            k = j
            j = n - 2
        else:
            j -= 1
    return Z


def _reduced(Q):
    L, D = ld_factorization(Q)
    Z = _reduce(L, D)
    return Z, L, D


def decorrelate(Q):
    """Integer Z-transform of ``Q``.

    Returns ``(Z, Qz)`` with ``Z`` unimodular and ``Qz = Z' Q Z``.
    """
    Q = np.asarray(Q, dtype=float)
    Z, _, _ = _reduced(Q)
    Qz = Z.T @ Q @ Z
    return Z, 0.5 * (Qz + Qz.T)


def _sgn(x):
    return -1.0 if x <= 0.0 else 1.0


def _search(L, D, zs, m=2, max_nodes=MAX_NODES):
    """Shrinking-ellipsoid enumeration of the ``m`` best integer vectors."""
    n = len(D)
    S = np.zeros((n, n))
    dist = np.zeros(n)
    zb = np.zeros(n)
    z = np.zeros(n)
    step = np.zeros(n)
    zn = np.zeros((n, m))
    s = np.zeros(m)
    nn = imax = 0
    maxdist = np.inf
    k = n - 1
    zb[k] = zs[k]
    z[k] = np.round(zb[k])
    y = zb[k] - z[k]
    step[k] = _sgn(y)
    for _ in range(max_nodes):
        newdist = dist[k] + y * y / D[k]
        if newdist < maxdist:
            if k != 0:
                k -= 1
                dist[k] = newdist
                S[k, :k + 1] = S[k + 1, :k + 1] + (z[k + 1] - zb[k + 1]) * L[k + 1, :k + 1]
                zb[k] = zs[k] + S[k, k]
                z[k] = np.round(zb[k])
                y = zb[k] - z[k]
                step[k] = _sgn(y)
            else:
                if nn < m:
                    if nn == 0 or newdist > s[imax]:
                        imax = nn
                    zn[:, nn] = z
                    s[nn] = newdist
                    nn += 1
                else:
                    if newdist < s[imax]:
                        zn[:, imax] = z
                        s[imax] = newdist
                        imax = int(np.argmax(s))
                    maxdist = s[imax]
                z[0] += step[0]
                y = zb[0] - z[0]
                step[0] = -step[0] - _sgn(step[0])
        else:
            if k == n - 1:
                break
            k += 1
            z[k] += step[k]
            y = zb[k] - z[k]
            step[k] = -step[k] - _sgn(step[k])
    else:
        raise SearchAbort(f"integer search exceeded {max_nodes} nodes")
    order = np.argsort(s[:nn], kind="stable")
    return zn[:, order], s[order]


def integer_search(a, Q, n_cand=2, max_nodes=MAX_NODES):
    """Best ``n_cand`` integer vectors for float ``a`` with covariance ``Q``.

    Decorrelates internally, so ``Q`` may be any SPD matrix. Returns
    ``(candidates, qforms)`` with candidates as columns sorted by the
    quadratic form ``(z - a)' Q^-1 (z - a)``.
    """
    a = np.asarray(a, dtype=float)
    Z, L, D = _reduced(np.asarray(Q, dtype=float))
    zs = Z.T @ a
    E, s = _search(L, D, zs, n_cand, max_nodes)
    F = np.linalg.solve(Z.T, E)
    return np.round(F), s


def reference_satellites(elev_by_key):
    """Highest-elevation satellite per ``(system, band)`` (name breaks ties)."""
    best = {}
    for (sat, system, band), el in elev_by_key.items():
        k = (system, band)
        if k not in best or (el, _neg(sat)) > (best[k][1], _neg(best[k][0])):
            best[k] = (sat, el)
    return {k: v[0] for k, v in best.items()}


def _neg(name):
    return tuple(-ord(c) for c in name)


def between_sat_difference(a_sd, Q_sd, keys, elev):
    """Double-difference ambiguities from single differences.

    Parameters
    ----------
    a_sd, Q_sd : ndarray
        Single-difference float ambiguities (cycles) and covariance.
    keys : list of (sat, system, band)
        Key of each entry of ``a_sd``.
    elev : sequence of float
        Elevation of each entry, used to select the reference satellite.
    """
    keys = [tuple(k) for k in keys]
    refs = reference_satellites({k: e for k, e in zip(keys, elev)})
    index = {k: i for i, k in enumerate(keys)}
    rows, dd_keys = [], []
    for i, (sat, system, band) in enumerate(keys):
        ref = refs[(system, band)]
        if sat == ref:
            continue
        r = np.zeros(len(keys))
        r[i] = 1.0
        r[index[(ref, system, band)]] = -1.0
        rows.append(r)
        dd_keys.append((ref, sat, system, band))
    D = np.array(rows).reshape(len(rows), len(keys))
    Qdd = D @ np.asarray(Q_sd) @ D.T
    return FloatAmbiguities(D @ np.asarray(a_sd), 0.5 * (Qdd + Qdd.T), dd_keys, D)


def ratio_statistic(qforms):
    if len(qforms) < 2:
        return 0.0
    return float(np.inf if qforms[0] <= 0.0 else qforms[1] / qforms[0])


def ratio_test_and_apply(fs, sd_elev, threshold=RATIO_THRESHOLD, min_dd=4, max_std=None):
    """Resolve the filter's ambiguities and return ``(fixed_state, FixResult)``.

    ``sd_elev`` maps ``(sat, band)`` to elevation for the signals to fix.
    The input state is never modified: on success the fixed integers are
    imposed on a copy as zero-variance constraints and its ``fix_status``
    is ``"fixed"``; otherwise the copy is ``None``. With ``max_std`` set,
    fixing is skipped while any double-difference ambiguity has a larger
    standard deviation (cycles).
    """
    keys, cols, elev = [], [], []
    for (sat, band), el in sd_elev.items():
        k = ("amb", sat, band)
        if (sat, band) not in fs.amb:
            continue
        keys.append((sat, _system(sat), band))
        cols.append(fs.layout[k])
        elev.append(el)
    if len(keys) < 2:
        return None, FixResult(reason="too few ambiguities")
    cols = np.array(cols)
    a = np.array([fs.amb[(s, b)] for s, _, b in keys])
    Q = fs.P[np.ix_(cols, cols)]
    fa = between_sat_difference(a, Q, keys, elev)
    if len(fa.a) < min_dd:
        return None, FixResult(reason="too few double differences")
    if max_std is not None and np.sqrt(np.max(np.diag(fa.Q))) > max_std:
        return None, FixResult(reason="float ambiguities not converged")
    try:
        cand, qf = integer_search(fa.a, fa.Q, 2)
    except (ValueError, SearchAbort) as exc:
        return None, FixResult(reason=str(exc))
    ratio = ratio_statistic(qf)
    res = FixResult(integers=cand[:, 0], ratio=ratio, keys=fa.keys, qforms=qf)
    if cand.shape[1] < 2 or ratio < threshold:
        res.reason = "ratio test failed"
        return None, res
    fixed = fs.copy()
    H = np.zeros((len(fa.a), fs.dim))
    H[:, cols] = fa.D
    if not _constrain(fixed, H, cand[:, 0] - fa.a):
        res.reason = "singular constraint"
        return None, res
    fixed.fix_status = "fixed"
    res.applied = True
    return fixed, res


def _system(sat):
    for system, prefix in SYSTEM_PREFIX.items():
        if sat.startswith(prefix):
            return system
    raise ValueError(f"unknown satellite prefix in {sat!r}")


def _constrain(fs, H, r):
    """Zero-variance conditional update ``H dx = r``."""
    PHt = fs.P @ H.T
    S = H @ PHt
    S = 0.5 * (S + S.T)
    try:
        K = np.linalg.solve(S, PHt.T).T
    except np.linalg.LinAlgError:
        return False
    dx = K @ r
    P = fs.P - K @ PHt.T
    fs.P = 0.5 * (P + P.T)
    inject(fs, dx)
    return True
