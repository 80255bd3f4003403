"""Readers and writers for dataset and run files.

Floats are written with ``repr`` (shortest round-trip form), so identical
inputs always produce identical bytes.

Dataset directory layout::

    imu.csv               t,wx,wy,wz,ax,ay,az
    rover_obs.jsonl       {t, obs: [{sat, sys, band, P, L, snr, elev, az}]}
    base_obs.jsonl        same schema
    features.jsonl        {t, features: [{id, u1, v1, u2, v2}]}
    truth_labels.jsonl    {t, sat, sys, band, type, class, value, event}
    truth_trajectory.csv  t,E,N,U,vE,vN,vU,roll,pitch,yaw,bgx,bgy,bgz,bax,bay,baz
    meta.json             scenario, geometry, sensor setup, initial estimate
"""

import csv
import json
import os
from pathlib import Path

import numpy as np

from .edm import EdmReport
from .gnss import GnssObservation

IMU_HEADER = ["t", "wx", "wy", "wz", "ax", "ay", "az"]
TRUTH_HEADER = ["t", "E", "N", "U", "vE", "vN", "vU", "roll", "pitch", "yaw",
                "bgx", "bgy", "bgz", "bax", "bay", "baz"]
TRAJ_HEADER = ["t", "E", "N", "U", "vE", "vN", "vU", "roll", "pitch", "yaw", "fix_status"]
EDM_CSV_HEADER = ["epoch", "sat", "band", "type", "innovation", "class", "weight_factor"]


class InputError(ValueError):
    """Malformed or missing input file."""


def _f(x):
    return repr(float(x))


def _dumps(obj):
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(x if isinstance(x, str) else _f(x) for x in r) + "\n")


def _read_table(path, header):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"missing file {path}")
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        try:
            head = next(rd)
        except StopIteration:
            raise InputError(f"empty file {path}") from None
        if head[:len(header)] != header:
            raise InputError(f"{path.name}: expected header {','.join(header)}")
        rows = list(rd)
    return head, rows


def write_imu_csv(path, t, gyro, accel):
    _write_rows(path, IMU_HEADER, (np.r_[ti, g, a] for ti, g, a in zip(t, gyro, accel)))


def read_imu_csv(path):
    """Return ``(t, gyro, accel)`` arrays."""
    _, rows = _read_table(path, IMU_HEADER)
    try:
        a = np.array(rows, dtype=float).reshape(-1, 7)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    if not np.all(np.isfinite(a)):
        raise InputError(f"{path}: non-finite IMU value")
    if len(a) > 1 and np.any(np.diff(a[:, 0]) <= 0):
        raise InputError(f"{path}: IMU timestamps not strictly increasing")
    return a[:, 0], a[:, 1:4], a[:, 4:7]


def write_truth_csv(path, truth):
    bg = truth.bg if truth.bg is not None else np.zeros_like(truth.p)
    ba = truth.ba if truth.ba is not None else np.zeros_like(truth.p)
    _write_rows(path, TRUTH_HEADER, (np.r_[t, p, v, e, g, a] for t, p, v, e, g, a in
                                     zip(truth.t, truth.p, truth.v, truth.euler, bg, ba)))


def read_truth_csv(path):
    """Return a dict of column arrays."""
    head, rows = _read_table(path, TRUTH_HEADER[:10])
    a = np.array(rows, dtype=float).reshape(-1, len(head))
    return {h: a[:, i] for i, h in enumerate(head)}


def write_obs_jsonl(path, epochs):
    with open(path, "w") as fh:
        for t, obs in epochs:
            fh.write(_dumps({"t": float(t), "obs": [
                {"sat": o.sat, "sys": o.system, "band": o.band, "P": o.P, "L": o.L,
                 "snr": o.snr, "elev": o.elev, "az": o.az} for o in obs]}) + "\n")


def _jsonl(path):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"missing file {path}")
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path.name}:{n}: {exc.msg}") from None
    return out


def read_obs_jsonl(path):
    """Return ``[(t, [GnssObservation])]``."""
    out = []
    for d in _jsonl(path):
        try:
            t = float(d["t"])
            out.append((t, [GnssObservation(t, o["sat"], o["sys"], o["band"], float(o["P"]), float(o["L"]),
                                            float(o["snr"]), float(o["elev"]), float(o["az"]))
                            for o in d["obs"]]))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{Path(path).name}: bad observation record ({exc})") from None
    return out


def write_features_jsonl(path, frames):
    with open(path, "w") as fh:
        for f in frames:
            fh.write(_dumps({"t": float(f.t), "features": [
                {"id": int(i), "u1": float(z[0]), "v1": float(z[1]), "u2": float(z[2]), "v2": float(z[3])}
                for i, z in zip(f.ids, f.z)]}) + "\n")


def read_features_jsonl(path):
    """Return ``[(t, ids, z)]`` with ``z`` of shape (n, 4)."""
    out = []
    for d in _jsonl(path):
        try:
            fs = d["features"]
            ids = np.array([f["id"] for f in fs], dtype=int)
            z = np.array([[f["u1"], f["v1"], f["u2"], f["v2"]] for f in fs], dtype=float).reshape(-1, 4)
            out.append((float(d["t"]), ids, z))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{Path(path).name}: bad feature record ({exc})") from None
    return out


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(_dumps(r) + "\n")


def read_jsonl(path):
    return _jsonl(path)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_json(path):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"missing file {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path.name}: {exc.msg}") from None


def write_dataset(ds, out_dir):
    """Write every stream of a simulated dataset into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_imu_csv(out / "imu.csv", ds.imu.t, ds.imu.gyro, ds.imu.accel)
    write_obs_jsonl(out / "rover_obs.jsonl", ds.gnss.rover)
    write_obs_jsonl(out / "base_obs.jsonl", ds.gnss.base)
    write_features_jsonl(out / "features.jsonl", ds.features)
    write_jsonl(out / "truth_labels.jsonl", ds.gnss.labels)
    write_truth_csv(out / "truth_trajectory.csv", ds.truth)
    write_json(out / "meta.json", ds.meta)
    return out


def read_dataset(path):
    """Load a dataset directory into a dict of parsed streams."""
    p = Path(path)
    if not p.is_dir():
        raise InputError(f"dataset directory not found: {p}")
    t, gyro, accel = read_imu_csv(p / "imu.csv")
    return {
        "meta": read_json(p / "meta.json"),
        "imu": (t, gyro, accel),
        "rover": read_obs_jsonl(p / "rover_obs.jsonl"),
        "base": read_obs_jsonl(p / "base_obs.jsonl"),
        "features": read_features_jsonl(p / "features.jsonl"),
        "path": str(p),
    }


def write_trajectory_csv(path, rows):
    """Rows of ``(t, E, N, U, vE, vN, vU, roll, pitch, yaw, fix_status)``."""
    _write_rows(path, TRAJ_HEADER, ([*map(float, r[:10]), str(r[10])] for r in rows))


def read_trajectory_csv(path):
    head, rows = _read_table(path, TRAJ_HEADER)
    num = np.array([r[:10] for r in rows], dtype=float).reshape(-1, 10)
    out = {h: num[:, i] for i, h in enumerate(TRAJ_HEADER[:10])}
    out["fix_status"] = [r[10] for r in rows]
    return out


def write_edm_reports(jsonl_path, csv_path, reports, include_timing=False):
    write_jsonl(jsonl_path, (r.to_dict(include_timing) for r in reports))
    with open(csv_path, "w", newline="") as fh:
        fh.write(",".join(EDM_CSV_HEADER) + "\n")
        for r in reports:
            for epoch, sat, band, kind, innov, cls, wf in r.csv_rows():
                inn = "" if not np.isfinite(innov) else _f(innov)
                fh.write(f"{_f(epoch)},{sat},{band},{kind},{inn},{cls},{_f(wf)}\n")


def read_edm_reports(path):
    return [EdmReport.from_dict(d) for d in _jsonl(path)]


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
