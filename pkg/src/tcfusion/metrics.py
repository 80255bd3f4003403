"""Scoring of runs against simulator truth and plot-ready tables."""

import json
from pathlib import Path

import numpy as np
from scipy.stats import chi2

from .io import _f, write_json

# flags that only restart a track and are never counted as false alarms
BOOKKEEPING_REASONS = ("new_track", "too_few")


def _tkey(t):
    return int(round(float(t) * 1000.0))


def rmse(errors):
    """Per-axis and 3D root-mean-square of an (n, 3) error array."""
    e = np.asarray(errors, dtype=float).reshape(-1, 3)
    if len(e) == 0:
        return {"E": None, "N": None, "U": None, "3D": None}
    m = np.sqrt(np.mean(e * e, axis=0))
    return {"E": float(m[0]), "N": float(m[1]), "U": float(m[2]),
            "3D": float(np.sqrt(np.mean(np.sum(e * e, axis=1))))}


def position_errors(traj, truth):
    """Estimated-minus-true positions at the trajectory epochs.

    ``traj`` and ``truth`` are column dicts as returned by the CSV readers.
    """
    idx = {_tkey(t): i for i, t in enumerate(truth["t"])}
    rows, ts = [], []
    for i, t in enumerate(traj["t"]):
        j = idx.get(_tkey(t))
        if j is None:
            continue
        rows.append([traj[c][i] - truth[c][j] for c in ("E", "N", "U")])
        ts.append(t)
    return np.array(ts), np.array(rows).reshape(-1, 3)


def score_detection(reports, labels, window=10.0):
    """Cycle-slip confusion matrix of EDM reports against truth labels.

    A labelled slip counts as detected when the report flags that signal as
    a cycle slip at the same epoch, whatever the reason. A flag without a
    label is a false alarm unless it only restarts a new or sparse track.
    """
    by_epoch = {_tkey(r.epoch): r for r in reports}
    slips = {}
    for lab in labels:
        if lab["class"] != "cycle_slip":
            continue
        k = _tkey(lab["t"])
        if k not in by_epoch:
            raise ValueError(f"label at t={lab['t']} has no matching report epoch")
        slips[(k, lab["sat"], lab["band"])] = lab
    tp = fn = fp = tn = 0
    missed = []
    per_window = {}
    for r in reports:
        k = _tkey(r.epoch)
        w = int(np.floor(r.epoch / window))
        pw = per_window.setdefault(w, [0, 0])
        for e in r.entries:
            if e.kind != "L":
                continue
            labelled = (k, e.sat, e.band) in slips
            flagged = e.classification.is_slip
            if labelled:
                pw[0] += 1
                if flagged:
                    tp += 1
                else:
                    fn += 1
                    pw[1] += 1
                    missed.append({"t": r.epoch, "sat": e.sat, "band": e.band,
                                   "innovation": None if not np.isfinite(e.innovation) else float(e.innovation)})
            elif flagged and e.classification.reason not in BOOKKEEPING_REASONS:
                fp += 1
            else:
                tn += 1
    # labelled slips whose signal never reached the report are misses too
    seen = {(_tkey(r.epoch), e.sat, e.band) for r in reports for e in r.entries if e.kind == "L"}
    for key in slips:
        if key not in seen:
            fn += 1
            missed.append({"t": key[0] / 1000.0, "sat": key[1], "band": key[2], "innovation": None})
    n_lab = len(slips)
    rates = [m / n for n, m in per_window.values() if n > 0]
    return {
        "labeled": n_lab,
        "true_positive": tp, "false_negative": fn, "false_positive": fp, "true_negative": tn,
        "missed_rate": fn / n_lab if n_lab else 0.0,
        "false_alarm_rate": fp / (fp + tn) if fp + tn else 0.0,
        "window_s": window,
        "window_missed_rate_mean": float(np.mean(rates)) if rates else 0.0,
        "missed": missed,
    }


def score_multipath(reports, labels, threshold=1.0):
    """Multipath estimates against truth and pseudorange exceedance statistics.

    Carrier estimates are the accumulated corrections; pseudorange estimates
    are the screening innovations.
    """
    entries = {}
    innov_p = []
    for r in reports:
        k = _tkey(r.epoch)
        for e in r.entries:
            entries[(k, e.sat, e.band, e.kind)] = e
            if e.kind == "P" and np.isfinite(e.innovation):
                innov_p.append(e.innovation)
    err = {"L": [], "P": []}
    truth_p = []
    for lab in labels:
        if lab["class"] != "multipath":
            continue
        if lab["type"] == "P":
            truth_p.append(lab["value"])
        e = entries.get((_tkey(lab["t"]), lab["sat"], lab["band"], lab["type"]))
        if e is None:
            continue
        est = e.correction if lab["type"] == "L" else e.innovation
        if np.isfinite(est):
            err[lab["type"]].append(est - lab["value"])
    innov_p = np.asarray(innov_p)
    truth_p = np.asarray(truth_p)

    def _rms(x):
        return float(np.sqrt(np.mean(np.square(x)))) if len(x) else None

    return {
        "carrier_rmse": _rms(err["L"]),
        "carrier_n": len(err["L"]),
        "pseudorange_rmse": _rms(err["P"]),
        "pseudorange_n": len(err["P"]),
        "threshold": threshold,
        "innovation_exceedance": exceedance(innov_p, threshold),
        "truth_exceedance": exceedance(truth_p, threshold),
    }


def exceedance(values, threshold):
    v = np.asarray(values, dtype=float)
    return float(np.count_nonzero(np.abs(v) > threshold) / len(v)) if len(v) else 0.0


def cdf_table(values):
    """Sorted values with their empirical CDF (ending at 1)."""
    v = np.sort(np.asarray(values, dtype=float))
    return v, np.arange(1, len(v) + 1) / max(len(v), 1)


def histogram_table(values, bins=40):
    v = np.asarray(values, dtype=float)
    counts, edges = np.histogram(v, bins=bins) if len(v) else (np.zeros(0, int), np.zeros(1))
    return edges[:-1], edges[1:], counts


def nees_fraction(nees, dof=3, prob=0.95):
    """Fraction of NEES values inside the two-sided ``prob`` chi-square envelope."""
    lo, hi = chi2.ppf((1 - prob) / 2, dof), chi2.ppf(1 - (1 - prob) / 2, dof)
    x = np.asarray(nees, dtype=float)
    return float(np.mean((x >= lo) & (x <= hi))) if len(x) else 0.0


def emit_plots(out_dir, t, errors, reports):
    """Write CSV tables for error time series, CDFs and histograms.

    Files: ``trajectory_error.csv`` (t,dE,dN,dU,d3D), ``innovation_cdf_P.csv``
    and ``innovation_cdf_L.csv`` (value,cdf), ``innovation_hist_P.csv`` and
    ``innovation_hist_L.csv`` (lo,hi,count). Returns the written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    p = out / "trajectory_error.csv"
    with open(p, "w") as fh:
        fh.write("t,dE,dN,dU,d3D\n")
        for ti, e in zip(t, errors):
            fh.write(",".join(_f(x) for x in (ti, *e, np.linalg.norm(e))) + "\n")
    paths.append(p)
    for kind in ("P", "L"):
        vals = [e.innovation for r in reports for e in r.entries
                if e.kind == kind and np.isfinite(e.innovation)]
        v, c = cdf_table(vals)
        p = out / f"innovation_cdf_{kind}.csv"
        with open(p, "w") as fh:
            fh.write("value,cdf\n")
            for a, b in zip(v, c):
                fh.write(f"{_f(a)},{_f(b)}\n")
        paths.append(p)
        lo, hi, n = histogram_table(vals)
        p = out / f"innovation_hist_{kind}.csv"
        with open(p, "w") as fh:
            fh.write("lo,hi,count\n")
            for a, b, k in zip(lo, hi, n):
                fh.write(f"{_f(a)},{_f(b)},{int(k)}\n")
        paths.append(p)
    return paths


def compare(run_dirs):
    """Collect headline numbers from several run directories."""
    rows = []
    for d in run_dirs:
        with open(Path(d) / "metrics.json") as fh:
            m = json.load(fh)
        det = m.get("detection") or {}
        rows.append({
            "run": str(d), "mode": m.get("mode"),
            "rmse_E": m["rmse"]["E"], "rmse_N": m["rmse"]["N"], "rmse_U": m["rmse"]["U"],
            "rmse_3D": m["rmse"]["3D"], "fix_rate": m.get("fix_rate"),
            "missed_rate": det.get("missed_rate"), "false_alarms": det.get("false_positive"),
        })
    return rows


def write_metrics(path, metrics):
    write_json(path, metrics)
