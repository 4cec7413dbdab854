"""Command line: run, verify, oracle, report.

Exit codes: 0 success, 1 a check failed, 2 bad input (config, paths,
missing artifacts), 3 a hard invariant was violated during the run.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import io as sgio
from .config import ConfigError, RunConfig, load_config
from .dynamics import InvariantViolation, Snapshot, StepFailure, simulate
from .eulerian import appendix_identity, flow_check, weak_residuals
from .laguerre import set_threads_from_env
from .measures import DiracCloud, make_pressure, sample_initial_cloud
from .ot import compare_with_grid_oracle, compare_with_rearrangement
from .verification import dynamic_checks, orlicz_estimate_report, static_checks, write_report

log = logging.getLogger("sgtorus")

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_VIOLATION = 0, 1, 2, 3


def bundled(kind: str) -> list[Path]:
    """Paths of bundled files under data/<kind>."""
    root = resources.files("sgtorus") / "data" / kind
    return sorted(Path(str(p)) for p in root.iterdir() if p.name.endswith(".yaml"))


# run

def execute_run(cfg: RunConfig, out_dir: Path, overwrite: bool = False) -> tuple[int, dict]:
    """Simulate and write all artifacts; returns (exit code, manifest)."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not overwrite:
        raise FileExistsError(f"{out_dir} exists and is not empty (use --overwrite)")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.partial-", dir=out_dir.parent))
    try:
        code, manifest = _run_into(cfg, stage)
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(stage, out_dir)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return code, manifest


def _run_into(cfg: RunConfig, d: Path) -> tuple[int, dict]:
    (d / "snapshots").mkdir()
    p0 = cfg.pressure()
    cloud = sample_initial_cloud(p0, cfg.N)
    snaps, rows = [], []

    def collect(state, row):
        snaps.append(Snapshot.of(row["step"], state))
        rows.append(row)

    status, code, meta = "ok", EXIT_OK, {}
    try:
        res = simulate(cloud, cfg.dt, cfg.T, cfg.scheme, cfg.tol, cfg.histogram_bins, collect)
        meta = res.meta
        bins = res.histogram_bins
    except (InvariantViolation, StepFailure) as exc:
        status, code = f"violation: {exc}", EXIT_VIOLATION
        bins = cfg.histogram_bins
        log.error("run aborted: %s", exc)

    last = len(snaps) - 1
    keep = [k for k in range(len(snaps)) if k % cfg.snapshot_stride == 0 or k == last]
    for k in keep:
        sgio.write_snapshot(d / "snapshots" / sgio.snapshot_name(k), snaps[k], cloud.masses)
    if rows:
        sgio.write_diagnostics(d / "diagnostics.csv", rows)
        sgio.write_diagram(d / "diagram_final.csv", snaps[-1])

    analyses = {}
    if code == EXIT_OK:
        analyses = _analyses(cfg, res, d)

    manifest = {
        "status": status,
        "config": cfg.to_dict(),
        "scenario": p0.describe(),
        "atoms": cloud.n,
        "versions": sgio.versions(),
        "threads": set_threads_from_env(),
        "run": {k: meta.get(k) for k in ("dt", "steps", "scheme", "tol")},
        "histogram_bins": bins,
        "snapshot_steps": keep,
        "monitors": sgio.monitor_summary(rows) if rows else {},
        "analyses": analyses,
    }
    sgio.write_json(d / "manifest.json", manifest)
    return code, manifest


def _analyses(cfg: RunConfig, res, d: Path) -> dict:
    out = {}
    snaps, m = res.snapshots, res.masses
    v = cfg.verify
    if v.appendix and len(snaps) >= 3:
        out["appendix_gap"] = appendix_identity(snaps, m)
    if v.orlicz and len(snaps) >= 2:
        reps = orlicz_estimate_report(snaps, m, 1, res.histogram_bins)
        with open(d / "orlicz.csv", "w") as fh:
            fh.write("t,k,lhs,rhs_h,rhs_u,ratio\n")
            for r in reps:
                fh.write(",".join(sgio.fmt(x) for x in (r.t, r.k, r.lhs, r.rhs_h, r.rhs_u, r.ratio)) + "\n")
        out["orlicz_ratio_max"] = max(r.ratio for r in reps)
    if v.weak:
        try:
            rep = weak_residuals(snaps)
        except ValueError as exc:
            out["weak"] = f"skipped: {exc}"
        else:
            sgio.write_weak_report(d / "weak_residuals.csv", rep)
            out["weak_momentum"] = rep.momentum_norm
            out["weak_divergence"] = rep.divergence_norm
    if (v.flow or cfg.tracer_K > 0) and len(snaps) >= 2:
        k = cfg.tracer_K or 64
        flow, frep = flow_check(snaps, k, bins=4)
        sgio.write_tracers(d / "tracers_final.csv", flow)
        out["flow"] = {"K": k, "bins": frep.bins, "hist_min": frep.hist_min,
                       "hist_max": frep.hist_max, "roundtrip_dual": frep.roundtrip_dual,
                       "roundtrip_physical": frep.roundtrip_physical, "frozen": frep.frozen}
    return out


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    out = Path(args.output or cfg.output_dir)
    try:
        code, man = execute_run(cfg, out, args.overwrite)
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    mon = man["monitors"]
    print(f"{man['status']}: {man['atoms']} atoms, {mon.get('steps', 0)} steps -> {out}")
    return code


# verify

def cmd_verify(args) -> int:
    if args.target == "static":
        checks = static_checks(args.lemma_samples, args.cofactor_samples, seed=args.seed)
        path = Path(args.output or "verify_report.json")
        meta = {"target": "static", "seed": args.seed}
    else:
        run_dir = Path(args.target)
        if not run_dir.is_dir():
            print(f"error: {run_dir} is not a run directory", file=sys.stderr)
            return EXIT_INPUT
        try:
            man, _, snaps, masses = sgio.load_run(run_dir)
        except sgio.MissingArtifacts as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INPUT
        checks = dynamic_checks(snaps, masses, man.get("histogram_bins") or 8)
        path = Path(args.output or run_dir / "verify_report.json")
        meta = {"target": str(run_dir), "atoms": len(masses), "snapshots": len(snaps)}
    doc = write_report(path, checks, meta)
    for c in checks:
        print(f"{c.status.upper():4s} {c.name}: value={c.value:.4g} limit={c.limit}")
    print(f"report -> {path}")
    return EXIT_OK if doc["passed"] else EXIT_CHECK


# oracle

def _load_instance(spec: str) -> tuple[str, dict]:
    p = Path(spec)
    if not p.is_file():
        names = {q.stem: q for q in bundled("oracle")}
        if spec not in names:
            raise ValueError(f"no instance file or bundled instance {spec!r} "
                             f"(bundled: {', '.join(sorted(names))})")
        p = names[spec]
    doc = yaml.safe_load(p.read_text())
    if not isinstance(doc, dict) or doc.get("kind") not in ("ot", "rearrangement"):
        raise ValueError(f"{p}: instance needs kind: ot | rearrangement")
    return p.stem, doc


def oracle_table(doc: dict, grid: int = 512) -> list[tuple]:
    """Rows (quantity, solver, oracle, delta) for one instance."""
    if doc["kind"] == "ot":
        pos = np.asarray(doc["positions"], dtype=float)
        m = np.asarray(doc["masses"], dtype=float)
        if len(m) > 4:
            raise ValueError("OT oracle instances are limited to N <= 4 atoms")
        cmp = compare_with_grid_oracle(DiracCloud(pos, m), grid)
        rows = []
        for i in range(len(m)):
            rows.append((f"w[{i}]", cmp["solver_weights"][i], cmp["oracle_weights"][i],
                         cmp["solver_weights"][i] - cmp["oracle_weights"][i]))
        for i in range(len(m)):
            rows.append((f"area[{i}]", cmp["solver_areas"][i], cmp["exact_areas_at_oracle_weights"][i],
                         cmp["solver_areas"][i] - cmp["exact_areas_at_oracle_weights"][i]))
        if "expected_weights" in doc:
            exp = np.asarray(doc["expected_weights"], dtype=float)
            for i in range(len(m)):
                rows.append((f"w_expected[{i}]", cmp["solver_weights"][i], exp[i],
                             cmp["solver_weights"][i] - exp[i]))
        return rows
    p0 = make_pressure(doc.get("scenario", "shear"), doc.get("epsilon", 0.01),
                       doc.get("profile", "cos1"))
    if np.abs(p0.grad(np.array([[0.3, 0.1], [0.3, 0.7]]))[:, 1]).max() > 0.0:
        raise ValueError("rearrangement oracle needs a pressure that depends on x1 only")
    cmp = compare_with_rearrangement(sample_initial_cloud(p0, int(doc.get("N", 16))))
    return [("max |g1_solver - g1_oracle|", math.nan, math.nan, cmp["max_g1_gap"]),
            ("max |g2 offset|", math.nan, 0.0, cmp["max_g2"])]


def cmd_oracle(args) -> int:
    try:
        name, doc = _load_instance(args.instance)
        rows = oracle_table(doc, args.grid)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(f"instance {name} ({doc['kind']})")
    print(f"{'quantity':32s} {'solver':>22s} {'oracle':>22s} {'delta':>12s}")
    for q, a, b, dlt in rows:
        print(f"{q:32s} {a:22.15g} {b:22.15g} {dlt:12.3e}")
    return EXIT_OK


# report

def cmd_report(args) -> int:
    path = Path(args.run_dir) / "diagnostics.csv"
    if not path.is_file():
        print(f"error: {path} not found", file=sys.stderr)
        return EXIT_INPUT
    rows = sgio.read_diagnostics(path)
    if not rows:
        print(f"error: {path} has no rows", file=sys.stderr)
        return EXIT_INPUT
    summary = sgio.monitor_summary(rows)
    print(f"run {args.run_dir}")
    for k, v in summary.items():
        print(f"  {k:18s} {v:.6g}")
    cols = ("step", "t", "u_max", "hist_min", "hist_max", "ot_residual", "max_disp")
    every = max(1, len(rows) // args.rows)
    print("  " + " ".join(f"{c:>12s}" for c in cols))
    for r in rows[::every]:
        print("  " + " ".join(f"{r[c]:12.5g}" for c in cols))
    man = Path(args.run_dir) / "manifest.json"
    if man.is_file():
        analyses = json.loads(man.read_text()).get("analyses", {})
        for k, v in analyses.items():
            print(f"  {k}: {v}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sg-torus", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="simulate from a YAML config")
    p.add_argument("config")
    p.add_argument("-o", "--output", help="output directory (overrides output_dir)")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="static checks or checks on a run directory")
    p.add_argument("target", help='"static" or a run directory')
    p.add_argument("-o", "--output", help="report path (default verify_report.json)")
    p.add_argument("--lemma-samples", type=int, default=1_000_000)
    p.add_argument("--cofactor-samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("oracle", help="compare the solver with an independent oracle")
    p.add_argument("instance", help="instance YAML or a bundled name")
    p.add_argument("--grid", type=int, default=512)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("report", help="summary tables from diagnostics.csv")
    p.add_argument("run_dir")
    p.add_argument("--rows", type=int, default=10)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_threads_from_env()
    except ValueError:
        print(f"error: SG_TORUS_THREADS must be a positive integer, "
              f"got {os.environ.get('SG_TORUS_THREADS')!r}", file=sys.stderr)
        return EXIT_INPUT
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
