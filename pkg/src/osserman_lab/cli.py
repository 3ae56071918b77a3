"""Command line front end: ``check``, ``solve``, ``rate`` and ``ko``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .drivers import (CampaignError, WindowTooSparse, entire_campaign,
                      finite_campaign, fit_blowup_rate, infinite_campaign, semifinite_campaign)
from .expr import ExprError, parse
from .mesh import GridFunction, Interval, Mesh, Uniform
from .model import (STRICT_SLACK, Check, CertificateReport, Inconclusive, PreconditionError,
                    TailDiverges,
                    TailOptions, check_exponent_family, check_f_class, g_tail, keller_osserman,
                    verify_structural)
from .problem import ProblemError, ProblemFile, load_problem, parse_schedule
from .solver import NonConvergence, SingularJacobian

EXIT_OK, EXIT_INPUT, EXIT_CERT, EXIT_CAMPAIGN, EXIT_ANALYSIS = 0, 1, 2, 3, 4

INPUT_ERRORS = (ProblemError, PreconditionError, ExprError, ValueError)
CAMPAIGN_ERRORS = (CampaignError, NonConvergence, SingularJacobian, ArithmeticError)


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


# ------------------------------------------------------------------ check

def _ko_report(name, h, opts) -> CertificateReport:
    res = keller_osserman(h, opts)
    margin = (-1.0 - res.exponent) if res.converges else -1.0
    point = {"exponent": res.exponent, "integral": res.integral}
    return CertificateReport((Check(f"{name} Keller-Osserman", margin, point),), 1)


def run_checks(prob: ProblemFile) -> dict:
    """All applicable gate certificates; returns {name: report} plus a skip list."""
    spec = prob.spec
    chk = prob.raw.get("check", {})
    opts = TailOptions(t_split=float(chk.get("t_split", 100.0)),
                       tail_tol=float(chk.get("tail_tol", 1e-6)))
    x, t = prob.check_samples()
    grid = np.union1d([0.0], t)
    certs, skipped = {}, []

    fs = [(n, getattr(spec, n)) for n in ("f1", "f2") if getattr(spec, n) is not None]
    if fs:
        rep = None
        for name, f in fs:
            r = check_f_class(f, grid, name)
            rep = r if rep is None else rep.merged(r)
        certs["f_class"] = rep
        ko = None
        for name, f in fs:
            r = _ko_report(name, f, opts)
            ko = r if ko is None else ko.merged(r)
        certs["keller_osserman"] = ko
    else:
        skipped += ["f_class", "keller_osserman"]

    needed = ("a1", "a2", "a1_sq", "a2_sq", "f1", "f2", "g")
    if all(getattr(spec, k) is not None for k in needed):
        certs["structural"] = verify_structural(spec, x, t, t)
    else:
        skipped.append("structural")

    p = prob.params
    if all(k in p for k in ("rho", "sigma", "gamma", "theta")):
        rho, sigma, gamma, theta = (float(p[k]) for k in ("rho", "sigma", "gamma", "theta"))
        margin = min(rho - 2, theta - 2, sigma + gamma - 2, 2 - sigma, 2 - gamma) - STRICT_SLACK
        if not check_exponent_family(rho, sigma, gamma, theta):
            margin = min(margin, -STRICT_SLACK)
        point = {"rho": rho, "sigma": sigma, "gamma": gamma, "theta": theta}
        certs["exponent_family"] = CertificateReport((Check("exponent family", margin, point),), 1)
    else:
        skipped.append("exponent_family")

    if prob.campaign_type == "entire" and spec.g is not None:
        try:
            value = g_tail(spec.g, 1.0, opts)
            certs["g_tail"] = CertificateReport((Check("int_1^inf dt/g finite", 1.0, {"G(1)": value}),), 1)
        except TailDiverges as exc:
            certs["g_tail"] = CertificateReport((Check(f"int_1^inf dt/g finite: {exc}", -1.0, {}),), 1)
    return {"certificates": certs, "skipped": skipped}


def _check_payload(result):
    certs = result["certificates"]
    return {
        "passed": all(c.passed for c in certs.values()),
        "certificates": {k: v.to_dict() for k, v in certs.items()},
        "skipped": result["skipped"],
    }


def cmd_check(args) -> int:
    try:
        prob = load_problem(args.problem)
        payload = _check_payload(run_checks(prob))
    except Inconclusive as exc:
        _err(f"inconclusive: {exc}")
        return EXIT_ANALYSIS
    except INPUT_ERRORS as exc:
        _err(str(exc))
        return EXIT_INPUT
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        for name, rep in payload["certificates"].items():
            print(f"{'PASS' if rep['passed'] else 'FAIL'} {name}")
            for c in rep["checks"]:
                if c["worst_margin"] < 0:
                    print(f"  {c['name']}: margin {c['worst_margin']:.6g} at {c['worst_point']}")
        for name in payload["skipped"]:
            print(f"SKIP {name}")
    return EXIT_OK if payload["passed"] else EXIT_CERT


# ------------------------------------------------------------------ solve

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _grid_csv(path: Path, gf: GridFunction, name):
    gf.to_csv(path, header=("x", name))


def _run_campaign(prob: ProblemFile, out: Path, args) -> dict:
    kind = prob.campaign_type
    camp = prob.campaign
    opts = prob.campaign_options()
    summary = {}
    if kind == "entire":
        radii = [float(r) for r in camp.get("radii", [1, 2, 3])]
        res = entire_campaign(prob.spec, int(prob.domain["N"]), radii,
                              int(camp.get("cells_per_unit", 40)), gate=False, opts=opts,
                              compacts=[tuple(c) for c in camp.get("compacts", [[0.0, 1.0]])])
        res.trace.to_csv(out / "trace.csv")
        _grid_csv(out / "z.csv", res.z, "z")
        _grid_csv(out / "w.csv", res.w, "w")
        res.results[-1].to_csv(out / "solution.csv")
        res.results[-1].write_sidecar(out / "solution.json")
        summary = {"lower_margin": res.lower_margin, "growth_increasing": res.growth_increasing}
        _write_json(out / "entire.json", summary)
        return summary

    mesh = prob.mesh(args.mesh_cells, args.min_spacing)
    if kind == "finite":
        b = prob.boundary
        res = finite_campaign(prob.spec, mesh, b.alpha, b.beta, float(camp["m"]),
                              float(camp["M"]), opts, gate=False)
        _grid_csv(out / "u.csv", res.result.u, "u")
        _grid_csv(out / "v.csv", res.result.v, "v")
        _grid_csv(out / "psi.csv", res.psi, "psi")
        res.result.to_csv(out / "solution.csv")
        res.result.write_sidecar(out / "solution.json")
        _write_json(out / "subsuper.json", res.certificate.to_dict())
        return {"subsuper_passed": res.certificate.passed}

    schedule = prob.schedule(args.schedule)
    compacts = [tuple(c) for c in camp.get("compacts", [[0.4, 0.6]])]
    if kind == "infinite":
        trace = infinite_campaign(prob.spec, mesh, schedule, compacts, opts)
    else:
        b = prob.boundary
        fixed, value = ("v", b.beta) if b.kind == "semifinite_u" else ("u", b.alpha)
        trace, dev = semifinite_campaign(prob.spec, mesh, fixed, value, schedule, compacts, opts,
                                         trace_nodes=int(camp.get("trace_nodes", 1)))
        summary["boundary_trace_deviation"] = dev
        _write_json(out / "boundary_trace.json", {"fixed": fixed, "value": value, "deviation": dev})
    trace.to_csv(out / "trace.csv")
    (out / "rate_fit.json").write_text(trace.rate_fit_json())
    trace.final.to_csv(out / "solution.csv")
    trace.final.write_sidecar(out / "solution.json")
    _grid_csv(out / "u.csv", trace.final.u, "u")
    summary["converged_on_compacts"] = trace.converged
    return summary


def _solve_one(path, out: Path, args) -> int:
    try:
        prob = load_problem(path)
    except INPUT_ERRORS as exc:
        _err(f"{path}: {exc}")
        return EXIT_INPUT
    out.mkdir(parents=True, exist_ok=True)
    check = None
    if not args.skip_check:
        try:
            check = _check_payload(run_checks(prob))
        except Inconclusive as exc:
            _err(f"{path}: inconclusive gate: {exc}")
            return EXIT_ANALYSIS
        except INPUT_ERRORS as exc:
            _err(f"{path}: {exc}")
            return EXIT_INPUT
        _write_json(out / "certificates.json", check)
        if not check["passed"]:
            _err(f"{path}: certificate failure; see {out / 'certificates.json'}")
            return EXIT_CERT
    try:
        summary = _run_campaign(prob, out, args)
    except CAMPAIGN_ERRORS as exc:
        _err(f"{path}: campaign failed: {type(exc).__name__}: {exc}")
        return EXIT_CAMPAIGN
    except INPUT_ERRORS as exc:
        _err(f"{path}: {exc}")
        return EXIT_INPUT
    artifacts = {p.name: _sha256(p) for p in sorted(out.iterdir())
                 if p.is_file() and p.name != "manifest.json"}
    manifest = {
        "problem": {"path": str(path), "sha256": prob.sha256},
        "campaign": prob.campaign_type,
        "options": {
            "schedule": args.schedule, "mesh_cells": args.mesh_cells,
            "min_spacing": args.min_spacing, "skip_check": bool(args.skip_check),
        },
        "tolerances": {"solver_tol": prob.campaign_options().solve.tol,
                       "rel_tol": prob.campaign_options().rel_tol},
        "seed": None,
        "versions": {"artifact": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "summary": summary,
        "artifacts": artifacts,
    }
    _write_json(out / "manifest.json", manifest)
    print(f"{path}: ok -> {out}")
    return EXIT_OK


def cmd_solve(args) -> int:
    paths = args.problems
    base = Path(args.out)
    if len(paths) == 1:
        jobs = [(paths[0], base)]
    else:
        stems = [Path(p).stem for p in paths]
        if len(set(stems)) != len(stems):
            _err("batch problem files must have distinct names")
            return EXIT_INPUT
        jobs = [(p, base / s) for p, s in zip(paths, stems)]
    try:
        cap = int(os.environ.get("OSSERMAN_LAB_THREADS", "4"))
    except ValueError:
        _err("OSSERMAN_LAB_THREADS must be an integer")
        return EXIT_INPUT
    workers = max(1, min(cap, len(jobs)))
    if workers == 1:
        codes = [_solve_one(p, o, args) for p, o in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            codes = list(pool.map(lambda job: _solve_one(job[0], job[1], args), jobs))
    return max(codes)


# ------------------------------------------------------------- rate / ko

def _read_xu(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    if not rows or any(len(r) < 2 for r in rows):
        raise ProblemError(f"{path}: expected at least two columns (x, u)")
    data = np.array([[float(r[0]), float(r[1])] for r in rows])
    return data[:, 0], data[:, 1]


def _is_number(text):
    try:
        float(text)
        return True
    except ValueError:
        return False


def cmd_rate(args) -> int:
    try:
        x, u = _read_xu(args.csv)
        ends = ("left", "right") if args.ends == "both" else (args.ends,)
        if x.size < 3:
            raise WindowTooSparse(f"{x.size} rows; need at least 5 in the window")
        mesh = Mesh(x, Interval(float(x[0]), float(x[-1])), Uniform(), ends)
        keep = np.isfinite(u)
        fit = fit_blowup_rate(GridFunction(mesh, np.where(keep, u, 0.0)), tuple(args.window))
    except WindowTooSparse as exc:
        _err(str(exc))
        return EXIT_ANALYSIS
    except INPUT_ERRORS as exc:
        _err(str(exc))
        return EXIT_INPUT
    if args.json:
        print(json.dumps(fit.to_dict(), sort_keys=True))
    else:
        print(f"C={fit.C:.6f} tau={fit.tau:.6f}")
        print(f"residual={fit.residual:.6e} points={fit.points}")
    return EXIT_OK


def cmd_ko(args) -> int:
    opts = TailOptions(t_split=args.t_split, tail_tol=args.tail_tol)
    try:
        h = parse(args.expr, ("t",))
        res = keller_osserman(h, opts)
    except Inconclusive as exc:
        _err(f"inconclusive: {exc}")
        return EXIT_ANALYSIS
    except INPUT_ERRORS as exc:
        _err(str(exc))
        return EXIT_INPUT
    body = {"converges": res.converges,
            "integral": None if math.isinf(res.integral) else res.integral,
            "error_estimate": None if math.isnan(res.error_estimate) else res.error_estimate,
            "exponent": res.exponent}
    if args.json:
        print(json.dumps(body, sort_keys=True))
    else:
        print(f"converges={'true' if res.converges else 'false'} integral={res.integral:.6f} "
              f"error={res.error_estimate:.3e} exponent={res.exponent:.6f}")
    return EXIT_OK


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="osserman-lab",
                                description="Blow-up solutions of elliptic systems with convection.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("check", help="run the hypothesis gates on a problem file")
    c.add_argument("problem")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_check)

    s = sub.add_parser("solve", help="run the campaign declared in one or more problem files")
    s.add_argument("problems", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--skip-check", action="store_true")
    s.add_argument("--schedule", type=str, default=None,
                   help="comma-separated levels or 2^K for levels 2,4,...,2^K")
    s.add_argument("--mesh-cells", type=int, default=None)
    s.add_argument("--min-spacing", type=float, default=None)
    s.set_defaults(func=cmd_solve)

    r = sub.add_parser("rate", help="fit u ~ C d^-tau near the boundary from a CSV (x, u)")
    r.add_argument("csv")
    r.add_argument("--window", nargs=2, type=float, default=(1e-3, 1e-2), metavar=("D_MIN", "D_MAX"))
    r.add_argument("--ends", choices=("both", "left", "right"), default="both",
                   help="which interval ends blow up")
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=cmd_rate)

    k = sub.add_parser("ko", help="Keller-Osserman test for an expression h(t)")
    k.add_argument("expr")
    k.add_argument("--t-split", type=float, default=100.0)
    k.add_argument("--tail-tol", type=float, default=1e-6)
    k.add_argument("--json", action="store_true")
    k.set_defaults(func=cmd_ko)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "schedule", None) is not None:
        try:
            parse_schedule(args.schedule)
        except ProblemError as exc:
            _err(str(exc))
            return EXIT_INPUT
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
