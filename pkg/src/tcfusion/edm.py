"""Cycle-slip and multipath estimation, detection and mitigation (EDM).

Two preprocessors share one interface:

* :class:`InnovationEdm` screens pseudoranges and classifies carriers from
  innovations (prefit residuals) against the INS-predicted geometry. It never
  solves a least-squares problem.
* :class:`ResidualEdm` is the residual-based baseline: a weighted
  least-squares fit with a prior-position pseudo-observation, followed by the
  same thresholds on postfit residuals.

:class:`PassthroughEdm` applies no screening and only restarts ambiguities on
loss of lock; the weighting-only modes use it.

Per epoch the caller runs ``process`` with geometry predicted from the INS
state, updates the filter, then calls ``end_epoch`` with the geometry of the
updated state so the next epoch can form between-epoch differences.
"""

import enum
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .geo import REFERENCE_BAND

PR_THRESHOLD = 1.0  # m
PR_DOWNWEIGHT = 1.0e-3
DELTA_TH = 0.05  # m
MP_LIMIT = 0.2  # m
DBSCAN_EPS = 0.5  # m
DBSCAN_MIN_PTS = 3
MIN_CARRIERS = 4


class ObsClass(enum.Enum):
    GOOD = "good"
    MULTIPATH = "multipath"
    CYCLE_SLIP = "cycle_slip"


@dataclass(frozen=True)
class Classification:
    cls: ObsClass
    estimate: float = 0.0  # multipath estimate (m), MULTIPATH only
    reason: str = ""

    @property
    def is_slip(self):
        return self.cls is ObsClass.CYCLE_SLIP


def threshold_class(value, delta_th=DELTA_TH):
    """Three-band classification of a between-epoch carrier innovation.

    ``|v| < d`` is good, ``|v| > 3d`` is a cycle slip and the closed band in
    between is multipath.
    """
    a = abs(value)
    if a < delta_th:
        return Classification(ObsClass.GOOD)
    if a > 3.0 * delta_th:
        return Classification(ObsClass.CYCLE_SLIP, reason="innovation")
    return Classification(ObsClass.MULTIPATH, float(value))


# --- DBSCAN ----------------------------------------------------------------

@dataclass
class Clusters:
    clusters: list  # index arrays into the input, ordered by value
    noise: np.ndarray

    @property
    def largest(self):
        """Indices of the most populated cluster (lowest values win ties)."""
        if not self.clusters:
            return np.array([], dtype=int)
        return max(self.clusters, key=len)


def dbscan_1d(values, eps=DBSCAN_EPS, min_pts=DBSCAN_MIN_PTS):
    """Density-based clustering of scalars.

    A point is a core point when at least ``min_pts`` points (itself
    included) lie within ``eps``. Cores closer than ``eps`` share a cluster;
    a border point joins the cluster of its nearest core.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("eps must be positive and min_pts >= 1")
    x = np.asarray(values, dtype=float)
    n = len(x)
    if n < min_pts:
        return Clusters([], np.arange(n))
    order = np.argsort(x, kind="stable")
    xs = x[order]
    lo = np.searchsorted(xs, xs - eps, side="left")
    hi = np.searchsorted(xs, xs + eps, side="right")
    core = (hi - lo) >= min_pts
    labels = np.full(n, -1)
    core_idx = np.flatnonzero(core)
    if len(core_idx):
        breaks = np.diff(xs[core_idx]) > eps
        labels[core_idx] = np.concatenate([[0], np.cumsum(breaks)])
        core_x = xs[core_idx]
        border = np.flatnonzero(~core)
        if len(border):
            # nearest core on either side; ties go to the lower one
            j = np.searchsorted(core_x, xs[border])
            left = np.clip(j - 1, 0, len(core_x) - 1)
            right = np.clip(j, 0, len(core_x) - 1)
            dl = np.where(j > 0, np.abs(xs[border] - core_x[left]), np.inf)
            dr = np.where(j < len(core_x), np.abs(core_x[right] - xs[border]), np.inf)
            pick = np.where(dr < dl, right, left)
            dist = np.minimum(dl, dr)
            labels[border] = np.where(dist <= eps, labels[core_idx[pick]], -1)
    clusters = [np.sort(order[labels == k]) for k in range(labels.max() + 1)] if len(core_idx) else []
    noise = np.sort(order[labels == -1])
    return Clusters(clusters, noise)


# --- inter-frequency biases ------------------------------------------------

@dataclass
class IfbEntry:
    mean: float
    count: int
    last_epoch: float


@dataclass
class IfbTable:
    entries: dict = field(default_factory=dict)

    def get(self, band_key, default=None):
        band_key = tuple(band_key)
        if band_key == REFERENCE_BAND:
            return 0.0
        e = self.entries.get(band_key)
        return default if e is None else e.mean

    def update(self, band_key, value, epoch):
        band_key = tuple(band_key)
        if band_key == REFERENCE_BAND:
            return
        e = self.entries.get(band_key)
        if e is None:
            self.entries[band_key] = IfbEntry(float(value), 1, epoch)
        else:
            e.count += 1
            e.mean += (value - e.mean) / e.count
            e.last_epoch = epoch

    def snapshot(self):
        out = {"/".join(REFERENCE_BAND): 0.0}
        for k in sorted(self.entries):
            out["/".join(k)] = self.entries[k].mean
        return out


def _band_groups(sd):
    groups = {}
    for i, o in enumerate(sd):
        groups.setdefault((o.system, o.band), []).append(i)
    return {k: np.array(v) for k, v in groups.items()}


def ifb_estimate(sd, drho, eps=DBSCAN_EPS, min_pts=DBSCAN_MIN_PTS):
    """One-epoch clock level of the reference band and per-band IFBs.

    Returns ``(m_ref, {band_key: ifb})`` or ``(None, {})`` when the reference
    band has no dense cluster. Bands too sparse to cluster fall back to the
    median of their calibrated values.
    """
    z = np.array([o.dP for o in sd]) - np.asarray(drho, dtype=float)
    groups = _band_groups(sd)
    ref = groups.get(REFERENCE_BAND)
    if ref is None or len(ref) < min_pts:
        return None, {}
    best = dbscan_1d(z[ref], eps, min_pts).largest
    if len(best) == 0:
        return None, {}
    m_ref = float(z[ref][best].mean())
    ifbs = {}
    for band_key, idx in groups.items():
        if band_key == REFERENCE_BAND:
            continue
        cal = z[idx] - m_ref
        members = dbscan_1d(cal, eps, min_pts).largest
        ifbs[band_key] = float(cal[members].mean()) if len(members) else statistics.median(cal.tolist())
    return m_ref, ifbs


def ifb_initialize(sd, drho, epoch=0.0, eps=DBSCAN_EPS, min_pts=DBSCAN_MIN_PTS):
    """Build an :class:`IfbTable` from one epoch.

    Returns ``(table, m_ref)``; ``(None, None)`` defers initialization when
    the reference band cannot be clustered.
    """
    m_ref, ifbs = ifb_estimate(sd, drho, eps, min_pts)
    if m_ref is None:
        return None, None
    table = IfbTable()
    for k, v in ifbs.items():
        table.update(k, v, epoch)
    return table, m_ref


def clock_datum(sd, drho, ifb):
    """Receiver clock from the highest-elevation satellite's pseudoranges."""
    if not sd:
        raise ValueError("no observations for the clock datum")
    by_sat = {}
    for i, o in enumerate(sd):
        by_sat.setdefault(o.sat, []).append(i)
    sats = sorted(by_sat, key=lambda s: (-max(sd[i].elev for i in by_sat[s]), s))
    for s in sats:
        vals = [sd[i].dP - drho[i] - b for i in by_sat[s]
                if (b := ifb.get((sd[i].system, sd[i].band))) is not None]
        if vals:
            return float(np.mean(vals))
    raise ValueError("no observation with a known IFB")


def screen_pseudorange(sd, drho, ifb, clock, threshold=PR_THRESHOLD, downweight=PR_DOWNWEIGHT):
    """Pseudorange innovations and weight factors.

    Innovations larger than ``threshold`` in magnitude get ``downweight``.
    Bands with no IFB estimate are treated as outliers.
    """
    bias = {}
    b = np.array([bias[k] if (k := (o.system, o.band)) in bias else bias.setdefault(k, _nan_if_none(ifb.get(k)))
                  for o in sd])
    innov = np.array([o.dP for o in sd]) - np.asarray(drho, dtype=float) - b - clock
    factor = np.where(np.isfinite(innov) & (np.abs(innov) <= threshold), 1.0, downweight)
    return innov, factor


def _nan_if_none(x):
    return np.nan if x is None else x


def classify_carrier(values, delta_th=DELTA_TH, min_obs=MIN_CARRIERS):
    """Classify geometry-corrected between-epoch carrier differences.

    ``values`` holds ``dd_L - dd_rho_hat`` per signal, ``nan`` where the
    track is new. The median of the finite values is the common clock
    datum. Returns ``(classifications, innovations, datum)``.
    """
    v = np.asarray(values, dtype=float)
    ok = np.isfinite(v)
    if ok.sum() < min_obs:
        cls = [Classification(ObsClass.CYCLE_SLIP, reason="new_track" if not f else "too_few")
               for f in ok]
        return cls, np.full(len(v), np.nan), np.nan
    datum = float(np.median(v[ok]))
    innov = v - datum
    cls = [threshold_class(e, delta_th) if f else Classification(ObsClass.CYCLE_SLIP, reason="new_track")
           for e, f in zip(innov, ok)]
    return cls, innov, datum


@dataclass
class MultipathAccumulator:
    limit: float = MP_LIMIT
    sums: dict = field(default_factory=dict)
    last_reset: dict = field(default_factory=dict)

    def reset(self, key, epoch=None):
        self.sums[key] = 0.0
        self.last_reset[key] = epoch

    def value(self, key):
        return self.sums.get(key, 0.0)

    def drop(self, keep):
        for k in [k for k in self.sums if k not in keep]:
            del self.sums[k]
            self.last_reset.pop(k, None)


def accumulate_multipath(acc, key, mp, epoch=None):
    """Add a multipath estimate to the signed running sum of ``key``.

    Returns MULTIPATH while ``|sum| <= limit``; once exceeded the signal is
    re-labelled CYCLE_SLIP and the sum restarts from zero.
    """
    s = acc.sums.get(key, 0.0) + mp
    if abs(s) > acc.limit:
        acc.reset(key, epoch)
        return Classification(ObsClass.CYCLE_SLIP, reason="accumulated")
    acc.sums[key] = s
    return Classification(ObsClass.MULTIPATH, mp)


# --- reports ---------------------------------------------------------------

@dataclass
class ObsReport:
    sat: str
    system: str
    band: str
    kind: str  # "P" or "L"
    innovation: float
    classification: Classification
    weight_factor: float = 1.0
    correction: float = 0.0  # accumulated carrier multipath since the last reset (m)


@dataclass
class EdmReport:
    epoch: float
    method: str
    clock: float = np.nan
    ifb: dict = field(default_factory=dict)
    entries: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)  # ms
    skipped: bool = False
    diagnostic: str = ""

    def carrier(self):
        return {(e.sat, e.band): e for e in self.entries if e.kind == "L"}

    def pseudorange(self):
        return {(e.sat, e.band): e for e in self.entries if e.kind == "P"}

    def slips(self):
        return {(e.sat, e.band) for e in self.entries if e.kind == "L" and e.classification.is_slip}

    def to_dict(self, include_timing=False):
        d = {
            "t": self.epoch,
            "method": self.method,
            "clock": _finite_or_none(self.clock),
            "ifb": self.ifb,
            "skipped": self.skipped,
            "obs": [{
                "sat": e.sat, "sys": e.system, "band": e.band, "type": e.kind,
                "innovation": _finite_or_none(e.innovation),
                "class": e.classification.cls.value,
                "estimate": e.classification.estimate,
                "reason": e.classification.reason,
                "weight_factor": e.weight_factor,
                "correction": e.correction,
            } for e in self.entries],
        }
        if self.diagnostic:
            d["diagnostic"] = self.diagnostic
        if include_timing:
            d["timing_ms"] = self.timing
        return d

    @classmethod
    def from_dict(cls, d):
        entries = [ObsReport(
            sat=o["sat"], system=o["sys"], band=o["band"], kind=o["type"],
            innovation=np.nan if o["innovation"] is None else o["innovation"],
            classification=Classification(ObsClass(o["class"]), o.get("estimate", 0.0), o.get("reason", "")),
            weight_factor=o["weight_factor"], correction=o.get("correction", 0.0),
        ) for o in d["obs"]]
        return cls(epoch=d["t"], method=d["method"],
                   clock=np.nan if d["clock"] is None else d["clock"], ifb=d.get("ifb", {}),
                   entries=entries, timing=d.get("timing_ms", {}), skipped=d.get("skipped", False),
                   diagnostic=d.get("diagnostic", ""))

    def csv_rows(self):
        for e in self.entries:
            yield (self.epoch, e.sat, e.band, e.kind, e.innovation, e.classification.cls.value, e.weight_factor)


def _finite_or_none(x):
    return None if x is None or not np.isfinite(x) else float(x)


# --- preprocessors ---------------------------------------------------------

class _CarrierTracker:
    """Between-epoch carrier bookkeeping shared by the preprocessors."""

    def __init__(self):
        self.prev = {}  # key -> (dL, drho at the updated state)

    def dd_values(self, sd, drho):
        out = np.full(len(sd), np.nan)
        for i, o in enumerate(sd):
            p = self.prev.get(o.key)
            if p is not None:
                out[i] = (o.dL - p[0]) - (drho[i] - p[1])
        return out

    def end_epoch(self, sd, drho_post):
        self.prev = {o.key: (o.dL, float(drho_post[i])) for i, o in enumerate(sd)}


class _EdmBase:
    method = ""

    def __init__(self, delta_th=DELTA_TH, mp_limit=MP_LIMIT, pr_threshold=PR_THRESHOLD,
                 downweight=PR_DOWNWEIGHT, eps=DBSCAN_EPS, min_pts=DBSCAN_MIN_PTS):
        self.delta_th = delta_th
        self.pr_threshold = pr_threshold
        self.downweight = downweight
        self.eps = eps
        self.min_pts = min_pts
        self.acc = MultipathAccumulator(limit=mp_limit)
        self.tracker = _CarrierTracker()

    def end_epoch(self, sd, drho_post):
        self.tracker.end_epoch(sd, drho_post)

    def _finish_carriers(self, t, sd, cls, innov):
        """Apply multipath accumulation and return carrier report entries."""
        entries = []
        self.acc.drop({o.key for o in sd})
        for o, c, e in zip(sd, cls, innov):
            if c.cls is ObsClass.MULTIPATH:
                c = accumulate_multipath(self.acc, o.key, c.estimate, t)
            elif c.is_slip:
                self.acc.reset(o.key, t)
            entries.append(ObsReport(o.sat, o.system, o.band, "L", float(e), c,
                                     correction=self.acc.value(o.key)))
        return entries


class InnovationEdm(_EdmBase):
    """Innovation-based EDM.

    Pseudoranges: DBSCAN-derived IFBs, a clock datum from the highest
    satellite, then a 1 m innovation screen. Carriers: median-datum
    classification of between-epoch differences with multipath accumulation.
    """

    method = "I-EDM"

    def __init__(self, **kw):
        super().__init__(**kw)
        self.ifb = None

    def process(self, t, sd, drho, los=None):
        t0 = time.perf_counter()
        drho = np.asarray(drho, dtype=float)
        report = EdmReport(epoch=t, method=self.method)
        fresh = self.ifb is None
        if fresh:
            self.ifb, _ = ifb_initialize(sd, drho, t, self.eps, self.min_pts)
        if self.ifb is not None and sd:
            clock = clock_datum(sd, drho, self.ifb)
            innov, factor = screen_pseudorange(sd, drho, self.ifb, clock, self.pr_threshold, self.downweight)
            report.clock = clock
            if not fresh:
                _, ifbs = ifb_estimate(sd, drho, self.eps, self.min_pts)
                for k, v in ifbs.items():
                    self.ifb.update(k, v, t)
            report.ifb = self.ifb.snapshot()
        else:
            # initialization deferred: nothing can be screened yet
            innov, factor = np.full(len(sd), np.nan), np.ones(len(sd))
            report.diagnostic = "ifb initialization deferred"
        for o, e, f in zip(sd, innov, factor):
            report.entries.append(ObsReport(o.sat, o.system, o.band, "P", float(e),
                                            Classification(ObsClass.GOOD), float(f)))
        t1 = time.perf_counter()
        cls, cinnov, _ = classify_carrier(self.tracker.dd_values(sd, drho), self.delta_th)
        report.entries.extend(self._finish_carriers(t, sd, cls, cinnov))
        t2 = time.perf_counter()
        report.timing = {"pseudorange": (t1 - t0) * 1e3, "carrier": (t2 - t1) * 1e3,
                         "total": (t2 - t0) * 1e3}
        return report


class ResidualEdm(_EdmBase):
    """Residual-based EDM with a prior-position constraint of ``sigma_prior``.

    Pseudoranges: DBSCAN culls per-band gross outliers, then position
    correction, clock and IFBs are solved by weighted least squares with the
    INS position as a prior; postfit residuals above 1 m are de-weighted.
    Carriers: position-change and clock-change least squares on
    between-epoch differences, classified on postfit residuals.
    """

    method = "R-EDM"

    def __init__(self, sigma_prior=0.1, **kw):
        super().__init__(**kw)
        if sigma_prior <= 0:
            raise ValueError("sigma_prior must be positive")
        self.sigma_prior = sigma_prior
        self.last_ifb = {}

    def _solve(self, A, z, w, n_pos):
        N = A.T @ (A * w[:, None])
        N[:n_pos, :n_pos] += np.eye(n_pos) / self.sigma_prior ** 2
        if np.linalg.matrix_rank(N) < N.shape[0]:
            raise np.linalg.LinAlgError("normal matrix is rank deficient")
        return np.linalg.solve(N, A.T @ (w * z))

    def _pseudorange(self, t, sd, drho, los, report):
        z = np.array([o.dP for o in sd]) - drho
        groups = _band_groups(sd)
        inlier = np.ones(len(sd), dtype=bool)
        for idx in groups.values():
            cl = dbscan_1d(z[idx], self.eps, self.min_pts)
            if cl.clusters:
                inlier[idx[cl.noise]] = False
        bands = sorted(k for k, idx in groups.items() if k != REFERENCE_BAND and inlier[idx].any())
        col = {k: 4 + j for j, k in enumerate(bands)}
        A = np.zeros((len(sd), 4 + len(bands)))
        A[:, :3] = -los
        A[:, 3] = 1.0
        for i, o in enumerate(sd):
            c = col.get((o.system, o.band))
            if c is not None:
                A[i, c] = 1.0
        w = 1.0 / np.array([o.var_P for o in sd])
        x = self._solve(A[inlier], z[inlier], w[inlier], 3)
        resid = z - A @ x
        for k, c in col.items():
            self.last_ifb[k] = float(x[c])
        for i, o in enumerate(sd):
            k = (o.system, o.band)
            if k != REFERENCE_BAND and k not in col:
                resid[i] -= self.last_ifb.get(k, 0.0)
        report.clock = float(x[3])
        report.ifb = {"/".join(REFERENCE_BAND): 0.0, **{"/".join(k): float(x[c]) for k, c in col.items()}}
        factor = np.where(np.abs(resid) > self.pr_threshold, self.downweight, 1.0)
        for o, e, f in zip(sd, resid, factor):
            report.entries.append(ObsReport(o.sat, o.system, o.band, "P", float(e),
                                            Classification(ObsClass.GOOD), float(f)))

    def _carrier(self, t, sd, drho, los):
        v = self.tracker.dd_values(sd, drho)
        ok = np.isfinite(v)
        if ok.sum() < MIN_CARRIERS:
            return classify_carrier(v, self.delta_th)[:2]
        A = np.hstack([-los, np.ones((len(sd), 1))])
        w = 1.0 / (2.0 * np.array([o.var_L for o in sd]))
        x = self._solve(A[ok], v[ok], w[ok], 3)
        resid = np.where(ok, v - A @ x, np.nan)
        cls = [threshold_class(e, self.delta_th) if f else Classification(ObsClass.CYCLE_SLIP, reason="new_track")
               for e, f in zip(resid, ok)]
        return cls, resid

    def process(self, t, sd, drho, los):
        t0 = time.perf_counter()
        drho = np.asarray(drho, dtype=float)
        los = np.asarray(los, dtype=float).reshape(len(sd), 3)
        report = EdmReport(epoch=t, method=self.method)
        try:
            self._pseudorange(t, sd, drho, los, report)
            t1 = time.perf_counter()
            cls, resid = self._carrier(t, sd, drho, los)
        except np.linalg.LinAlgError as exc:
            report.entries = [ObsReport(o.sat, o.system, o.band, "P", np.nan, Classification(ObsClass.GOOD))
                              for o in sd]
            report.skipped = True
            report.diagnostic = f"epoch skipped: {exc}"
            t1 = time.perf_counter()
            cls = [Classification(ObsClass.CYCLE_SLIP, reason="skipped") for _ in sd]
            resid = np.full(len(sd), np.nan)
        report.entries.extend(self._finish_carriers(t, sd, cls, resid))
        t2 = time.perf_counter()
        report.timing = {"pseudorange": (t1 - t0) * 1e3, "carrier": (t2 - t1) * 1e3,
                         "total": (t2 - t0) * 1e3}
        return report


class PassthroughEdm(_EdmBase):
    """No screening; ambiguities restart only when a track is interrupted."""

    method = "none"

    def process(self, t, sd, drho, los=None):
        report = EdmReport(epoch=t, method=self.method)
        for o in sd:
            report.entries.append(ObsReport(o.sat, o.system, o.band, "P", np.nan, Classification(ObsClass.GOOD)))
        prev = self.tracker.prev
        for o in sd:
            c = (Classification(ObsClass.GOOD) if o.key in prev
                 else Classification(ObsClass.CYCLE_SLIP, reason="new_track"))
            report.entries.append(ObsReport(o.sat, o.system, o.band, "L", np.nan, c))
        return report


def make_edm(mode, sigma_prior=0.1, **kw):
    if mode == "i-edm":
        return InnovationEdm(**kw)
    if mode == "r-edm":
        return ResidualEdm(sigma_prior=sigma_prior, **kw)
    return PassthroughEdm(**kw)
