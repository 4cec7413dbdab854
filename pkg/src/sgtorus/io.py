"""CSV and JSON artifacts of a run, and reading them back."""
from __future__ import annotations

import csv
import json
import platform
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import Snapshot
from .eulerian import diagram_of
from .laguerre import build_diagram

SNAPSHOT_COLUMNS = ("atom_id", "y1", "y2", "lift1", "lift2", "mass", "weight")
DIAGRAM_COLUMNS = ("atom_id", "area", "b1", "b2", "neighbor_ids")
TRACER_COLUMNS = ("tracer_id", "z1", "z2", "F1", "F2", "G1", "G2")
WEAK_COLUMNS = ("test_id", "k1", "k2", "residual")
DIAGNOSTIC_COLUMNS = ("step", "t", "mass_sum", "u_max", "hist_min", "hist_max", "hist_drift",
                      "ot_residual", "ot_iterations", "max_disp", "max_disp1")


class MissingArtifacts(FileNotFoundError):
    def __init__(self, run_dir, missing):
        self.missing = list(missing)
        super().__init__(f"{run_dir}: missing artifacts: {', '.join(self.missing)}")


def fmt(x) -> str:
    """Shortest repr that round-trips; keeps CSVs byte-stable."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in r])


def _read_rows(path):
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        return header, list(rd)


def snapshot_name(step: int) -> str:
    return f"step_{step}.csv"


def write_snapshot(path, snap: Snapshot, masses):
    rows = ((i, p[0], p[1], l[0], l[1], m, w) for i, (p, l, m, w) in
            enumerate(zip(snap.positions, snap.lifts, masses, snap.weights)))
    _write_rows(path, SNAPSHOT_COLUMNS, rows)


def read_snapshot(path, step: int, t: float) -> tuple[Snapshot, np.ndarray]:
    """Rebuild a Snapshot (barycenters and areas from a fresh diagram) and the masses."""
    header, rows = _read_rows(path)
    if tuple(header) != SNAPSHOT_COLUMNS:
        raise ValueError(f"{path}: unexpected columns {header}")
    a = np.array(rows, dtype=float).reshape(-1, len(SNAPSHOT_COLUMNS))
    if not np.array_equal(a[:, 0], np.arange(len(a))):
        raise ValueError(f"{path}: atom ids must be 0..n-1 in order")
    pos, lifts, m, w = a[:, 1:3], a[:, 3:5], a[:, 5], a[:, 6]
    d = build_diagram(pos, w)
    res = float(np.abs(d.areas - m).max())
    snap = Snapshot(step, t, pos, lifts, w, d.barycenters, d.areas, res)
    return snap, m


def write_diagnostics(path, rows):
    _write_rows(path, DIAGNOSTIC_COLUMNS, ([r[c] for c in DIAGNOSTIC_COLUMNS] for r in rows))


def read_diagnostics(path) -> list[dict]:
    header, rows = _read_rows(path)
    out = []
    for r in rows:
        d = {}
        for k, v in zip(header, r):
            d[k] = int(v) if k in ("step", "ot_iterations") else float(v)
        out.append(d)
    return out


def write_diagram(path, snap: Snapshot):
    d = diagram_of(snap)
    nb = d.neighbors()
    rows = ((i, d.areas[i], d.barycenters[i, 0], d.barycenters[i, 1],
             " ".join(str(int(j)) for j in nb[i])) for i in range(d.n))
    _write_rows(path, DIAGRAM_COLUMNS, rows)


def write_tracers(path, flow):
    rows = ((i, z[0], z[1], f[0], f[1], g[0], g[1]) for i, (z, f, g) in
            enumerate(zip(flow.z, flow.f, flow.g)))
    _write_rows(path, TRACER_COLUMNS, rows)


def write_weak_report(path, report):
    _write_rows(path, WEAK_COLUMNS, report.rows())


def versions() -> dict:
    import numba
    import scipy
    import yaml

    return {"sgtorus": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "pyyaml": yaml.__version__}


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def monitor_summary(rows) -> dict:
    return {
        "steps": rows[-1]["step"] if rows else 0,
        "t_final": rows[-1]["t"] if rows else 0.0,
        "u_max": max(r["u_max"] for r in rows),
        "hist_min": min(r["hist_min"] for r in rows),
        "hist_max": max(r["hist_max"] for r in rows),
        "hist_drift_max": max(r["hist_drift"] for r in rows),
        "ot_residual_max": max(r["ot_residual"] for r in rows),
        "max_disp": max(r["max_disp"] for r in rows),
        "mass_sum_final": rows[-1]["mass_sum"],
    }


def load_run(run_dir):
    """Manifest, diagnostics rows, snapshots and masses of a finished run."""
    run_dir = Path(run_dir)
    missing = [n for n in ("manifest.json", "diagnostics.csv") if not (run_dir / n).is_file()]
    if missing:
        raise MissingArtifacts(run_dir, missing)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    diag = read_diagnostics(run_dir / "diagnostics.csv")
    times = {r["step"]: r["t"] for r in diag}
    steps = manifest.get("snapshot_steps", [])
    files = [f"snapshots/{snapshot_name(k)}" for k in steps]
    missing = [f for f in files if not (run_dir / f).is_file()]
    missing += [f"diagnostics row for step {k}" for k in steps if k not in times]
    if missing or not steps:
        raise MissingArtifacts(run_dir, missing or ["snapshots"])
    snaps, masses = [], None
    for k, f in zip(steps, files):
        s, m = read_snapshot(run_dir / f, k, times[k])
        snaps.append(s)
        masses = m
    return manifest, diag, snaps, masses
