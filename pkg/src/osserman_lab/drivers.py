"""Campaigns: finite barrier sandwich, boundary escalation, semifinite traces,
comparison envelopes and the expanding-ball construction on R^N."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .expr import ScalarFunctionExpr, differentiate, parse
from .mesh import (GradedBoundary, GridFunction, Mesh, Radial, Uniform, boundary_distances,
                   build_mesh)
from .model import (CertificateReport, NonlinearitySpec, PreconditionError, TailOptions,
                    _TailFunction, as_function, invert_tail,
                    partial_derivative, verify_structural)
from .solver import (DiscreteSystem, NegativeState, NonConvergence, SolveOptions, SolveResult, newton_solve,
                     verify_subsuper)
from .tails import Antiderivative, Inconclusive, classify_tail, quad

__all__ = [
    "CampaignError", "BarrierFailure", "CertificateFailure", "MonotonicityViolation",
    "BoundTrespass", "WindowTooSparse", "SlowDecay", "BarrierOrderViolation",
    "CampaignOptions", "LevelRecord", "EscalationTrace", "RateFit", "FiniteOutcome",
    "EnvelopeSpec", "EntireOutcome", "finite_campaign", "infinite_campaign",
    "semifinite_campaign", "solve_envelope", "fit_blowup_rate", "radial_supersolution_z",
    "entire_campaign", "boundary_trace_deviation", "default_schedule", "structural_gate",
]


class CampaignError(RuntimeError):
    pass


class BarrierFailure(CampaignError):
    pass


class CertificateFailure(CampaignError):
    def __init__(self, message, report: Optional[CertificateReport] = None):
        super().__init__(message)
        self.report = report


class MonotonicityViolation(CampaignError):
    def __init__(self, message, level=None):
        super().__init__(message)
        self.level = level


class BoundTrespass(CampaignError):
    pass


class BarrierOrderViolation(CampaignError):
    pass


class WindowTooSparse(ValueError):
    pass


class SlowDecay(CampaignError):
    pass


def default_schedule(k_max: int, k_min: int = 1):
    return [2.0 ** k for k in range(k_min, k_max + 1)]


@dataclass(frozen=True)
class CampaignOptions:
    solve: SolveOptions = SolveOptions()
    rel_tol: float = 1e-6
    mono_tol: float = 1e-8
    window: Optional[tuple] = None
    keep_solutions: bool = True


# ----------------------------------------------------------- rate fitting

@dataclass(frozen=True)
class RateFit:
    C: float
    tau: float
    residual: float
    window: tuple
    points: int

    def to_dict(self):
        return {"C": self.C, "tau": self.tau, "residual": self.residual,
                "window": list(self.window), "points": self.points}


def fit_blowup_rate(u: GridFunction, window=(1e-3, 1e-2)) -> RateFit:
    """Least squares ``log u = log C - tau log d`` over nodes with d in the window."""
    d_min, d_max = window
    d = boundary_distances(u.mesh)
    sel = (d >= d_min) & (d <= d_max) & (u.values > 0)
    if sel.sum() < 5:
        raise WindowTooSparse(f"{int(sel.sum())} nodes in window {window}; need at least 5")
    ld, lu = np.log(d[sel]), np.log(u.values[sel])
    slope, intercept = np.polyfit(ld, lu, 1)
    fit = intercept + slope * ld
    rms = float(np.sqrt(np.mean((lu - fit) ** 2)))
    return RateFit(float(math.exp(intercept)), float(-slope), rms, (d_min, d_max), int(sel.sum()))


# ---------------------------------------------------------------- traces

@dataclass
class LevelRecord:
    n: float
    compact_sup: tuple
    monotonicity_margin: Optional[float]
    iterations: int
    residual_norm: float
    result: Optional[SolveResult] = field(default=None, repr=False)


@dataclass
class EscalationTrace:
    compacts: tuple
    levels: list = field(default_factory=list)
    rate_fit: Optional[RateFit] = None
    converged: bool = False
    notes: list = field(default_factory=list)

    @property
    def final(self) -> Optional[SolveResult]:
        return self.levels[-1].result if self.levels else None

    def relative_change(self):
        """Per-compact relative change of the sup between the last two levels."""
        if len(self.levels) < 2:
            return None
        a, b = self.levels[-2].compact_sup, self.levels[-1].compact_sup
        return tuple(abs(y - x) / max(abs(y), 1e-300) for x, y in zip(a, b))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n"] + [f"sup[{a!r}:{b!r}]" for a, b in self.compacts]
                       + ["monotonicity_margin", "iterations"])
            for lv in self.levels:
                margin = "" if lv.monotonicity_margin is None else repr(lv.monotonicity_margin)
                w.writerow([repr(lv.n)] + [repr(s) for s in lv.compact_sup] + [margin, lv.iterations])

    def rate_fit_json(self) -> str:
        body = {"rate_fit": None if self.rate_fit is None else self.rate_fit.to_dict(),
                "converged": self.converged}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"


def _compact_sups(mesh: Mesh, values, compacts):
    out = []
    for a, b in compacts:
        sel = (mesh.nodes >= a) & (mesh.nodes <= b)
        if not sel.any():
            raise PreconditionError(f"compact [{a}, {b}] contains no mesh node")
        out.append(float(values[sel].max()))
    return tuple(out)


def _escalate(spec, mesh, schedule, compacts, bc_for_level, opts: CampaignOptions,
              escalated=("u", "v"), level_hook=None, init=None) -> EscalationTrace:
    schedule = [float(s) for s in schedule]
    if not schedule or any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise PreconditionError("schedule must be non-empty and strictly increasing")
    trace = EscalationTrace(tuple(tuple(map(float, c)) for c in compacts))
    prev = init
    for n in schedule:
        bc_u, bc_v = bc_for_level(n)
        sys = DiscreteSystem(spec, mesh, bc_u, bc_v)
        start = sys.linear_interpolant() if prev is None else (prev.u.values, prev.v.values)
        res = newton_solve(sys, start, opts.solve)
        if not res.converged:
            raise NonConvergence(
                f"level n={n:g} did not converge (residual {res.residual_norm:.3g} "
                f"after {res.iterations} iterations)"
            )
        margin = None
        if prev is not None:
            parts = []
            for name, new, old in (("u", res.u.values, prev.u.values), ("v", res.v.values, prev.v.values)):
                if name not in escalated:
                    continue
                m = float(np.min(new - old))
                parts.append(m)
                allowed = -opts.mono_tol * (1.0 + float(np.max(old)))
                if m < allowed:
                    raise MonotonicityViolation(
                        f"{name}_(n+1) - {name}_n = {m:.3g} < {allowed:.3g} at level n={n:g}", n)
            margin = min(parts) if parts else None
        if level_hook is not None:
            level_hook(n, res)
        trace.levels.append(LevelRecord(
            n, _compact_sups(mesh, res.u.values, trace.compacts), margin, res.iterations,
            res.residual_norm, res if opts.keep_solutions or n == schedule[-1] else None))
        if prev is not None and not opts.keep_solutions and len(trace.levels) >= 2:
            trace.levels[-2].result = None
        prev = res
    change = trace.relative_change()
    trace.converged = change is not None and all(c < opts.rel_tol for c in change)
    return trace


def _require_graded(mesh: Mesh):
    if not isinstance(mesh.grading, GradedBoundary):
        raise PreconditionError("blow-up campaigns need a GradedBoundary mesh")


def _default_window(mesh):
    m = mesh.grading.min_spacing
    return (10.0 * m, 100.0 * m)


def _maybe_fit(trace, mesh, opts):
    if len(trace.levels) < 2:
        trace.notes.append("single level: no rate fit")
        return
    window = opts.window or _default_window(mesh)
    try:
        trace.rate_fit = fit_blowup_rate(trace.final.u, window)
    except WindowTooSparse as exc:
        trace.notes.append(f"rate fit skipped: {exc}")


# -------------------------------------------------------------- campaigns

def structural_gate(spec: NonlinearitySpec, x_samples, t_samples) -> Optional[CertificateReport]:
    """Run verify_structural when the comparison data is complete; None otherwise."""
    needed = ("a1", "a2", "a1_sq", "a2_sq", "f1", "f2", "g")
    if any(getattr(spec, k) is None for k in needed):
        return None
    return verify_structural(spec, x_samples, t_samples, t_samples)


def _derivative_1d(f, var="t"):
    if isinstance(f, str):
        f = parse(f, (var,))
    if isinstance(f, ScalarFunctionExpr):
        return as_function(differentiate(f, var), (var,))
    return partial_derivative(f, var, (var,))


def _barrier_spec(spec: NonlinearitySpec):
    """Scalar problem Δψ = (a1_sq + a2_sq)(x) g(ψ), run as two decoupled copies."""
    if spec.g is None or spec.a1_sq is None or spec.a2_sq is None:
        raise PreconditionError("the barrier needs g, a1_sq and a2_sq")
    A1 = as_function(spec.a1_sq, ("x",))
    A2 = as_function(spec.a2_sq, ("x",))
    g = as_function(spec.g, ("t",))
    dg = _derivative_1d(spec.g)
    return NonlinearitySpec.scalar(lambda x, w: (A1(x) + A2(x)) * g(w),
                                   df=lambda x, w: (A1(x) + A2(x)) * dg(w))


@dataclass
class FiniteOutcome:
    result: SolveResult
    certificate: CertificateReport
    psi: GridFunction
    structural: Optional[CertificateReport] = None


def finite_campaign(spec: NonlinearitySpec, mesh: Mesh, alpha: float, beta: float, m: float,
                    M: float, opts: CampaignOptions = CampaignOptions(), gate: bool = True
                    ) -> FiniteOutcome:
    """Barrier sandwich (ψ, ψ) <= (u, v) <= (M, M) and the solve with data (α, β)."""
    if not (0.0 < m < min(alpha, beta) and max(alpha, beta) < M):
        raise PreconditionError(f"need 0 < m < min(alpha, beta) <= max(alpha, beta) < M; "
                                f"got m={m}, alpha={alpha}, beta={beta}, M={M}")
    structural = None
    if gate:
        structural = structural_gate(spec, mesh.nodes, np.geomspace(min(m, 0.1), max(M, 10.0), 40))
        if structural is not None and not structural.passed:
            raise CertificateFailure("structural hypotheses fail", structural)
    bspec = _barrier_spec(spec)
    bsys = DiscreteSystem.dirichlet(bspec, mesh, m, m)
    bres = newton_solve(bsys, (np.full(mesh.nodes.size, m),) * 2, opts.solve)
    if not bres.converged:
        raise BarrierFailure(f"barrier solve did not converge (residual {bres.residual_norm:.3g})")
    psi = bres.u.values
    sys = DiscreteSystem.dirichlet(spec, mesh, alpha, beta)
    top = np.full(mesh.nodes.size, float(M))
    try:
        cert = verify_subsuper(sys, (psi, psi), (top, top), opts.solve.tol)
    except NegativeState as exc:
        # g(0) > 0 lets the barrier dip below zero on large domains
        raise BarrierFailure(
            f"F cannot be evaluated on the barrier (min psi = {np.min(psi):.6g}): {exc}; "
            "shrink the domain or the coefficients") from exc
    if not cert.passed:
        raise CertificateFailure("sub/supersolution certificate failed", cert)
    mid = 0.5 * (psi + top)
    solve_opts = replace(opts.solve, lower=(psi, psi))
    res = newton_solve(sys, (mid, mid), solve_opts)
    if not res.converged:
        raise NonConvergence(f"finite solve did not converge (residual {res.residual_norm:.3g})")
    return FiniteOutcome(res, cert, GridFunction(mesh, psi), structural)


def infinite_campaign(spec: NonlinearitySpec, mesh: Mesh, schedule=None, compacts=((0.4, 0.6),),
                      opts: CampaignOptions = CampaignOptions(), envelope=None) -> EscalationTrace:
    """Escalate u = v = n on the boundary along ``schedule`` (default 2^k, k=1..14).

    ``envelope`` may be a pair of grid functions (ũ, ṽ); every level is then
    checked against them.
    """
    _require_graded(mesh)
    schedule = default_schedule(14) if schedule is None else schedule
    hook = None
    if envelope is not None:
        eu, ev = (np.asarray(getattr(e, "values", e)) for e in envelope)

        def hook(n, res):
            tol = 10.0 * opts.solve.tol * (1.0 + max(np.max(eu), np.max(ev)))
            worst = max(np.max(res.u.values - eu), np.max(res.v.values - ev))
            if worst > tol:
                raise BarrierOrderViolation(
                    f"level n={n:g} exceeds the comparison envelope by {worst:.3g}")

    trace = _escalate(spec, mesh, schedule, compacts,
                      lambda n: ((n, n), (n, n)), opts, ("u", "v"), hook)
    _maybe_fit(trace, mesh, opts)
    return trace


def boundary_trace_deviation(f: GridFunction, value: float, k: int = 1):
    """Largest |f - value| over the k nodes nearest each blow-up end (boundary nodes excluded)."""
    mesh = f.mesh
    devs = []
    if "left" in mesh.blowup_ends and not mesh.radial:
        devs.extend(np.abs(f.values[1:1 + k] - value))
    if "right" in mesh.blowup_ends:
        devs.extend(np.abs(f.values[-1 - k:-1] - value))
    return float(max(devs))


def semifinite_campaign(spec: NonlinearitySpec, mesh: Mesh, fixed: str, value: float,
                        schedule=None, compacts=((0.4, 0.6),),
                        opts: CampaignOptions = CampaignOptions(), bound_tol: float = 1e-8,
                        trace_nodes: int = 1):
    """Escalate one component while the other keeps the boundary value ``value``.

    Returns ``(trace, deviation)`` where ``deviation`` is the final-level
    :func:`boundary_trace_deviation` of the fixed component.
    """
    _require_graded(mesh)
    if fixed not in ("u", "v"):
        raise PreconditionError("fixed must be 'u' or 'v'")
    if not (0.0 < value < math.inf):
        raise PreconditionError(f"the fixed boundary value must lie in (0, +inf), got {value}")
    schedule = default_schedule(14) if schedule is None else schedule

    def bc(n):
        return ((n, n), (value, value)) if fixed == "v" else ((value, value), (n, n))

    def hook(n, res):
        w = res.v.values if fixed == "v" else res.u.values
        top = float(np.max(w))
        if top > value + bound_tol:
            raise BoundTrespass(f"{fixed} = {top!r} exceeds {value} + {bound_tol} at level n={n:g}")

    escalated = ("u",) if fixed == "v" else ("v",)
    trace = _escalate(spec, mesh, schedule, compacts, bc, opts, escalated, hook)
    _maybe_fit(trace, mesh, opts)
    final = trace.final
    w = final.v if fixed == "v" else final.u
    return trace, boundary_trace_deviation(w, value, trace_nodes)


# -------------------------------------------------------------- envelopes

@dataclass(frozen=True)
class EnvelopeSpec:
    """Scalar comparison problem Δw + b_sup |∇w|^q = a_min f(w)."""

    direction: str
    b_sup: float
    a_min: float
    f: object
    q: float = 1.0

    def __post_init__(self):
        if self.direction not in ("lower", "upper"):
            raise PreconditionError("direction must be 'lower' or 'upper'")
        if not (self.a_min > 0 and self.b_sup >= 0):
            raise PreconditionError("envelope needs a_min > 0 and b_sup >= 0")

    @classmethod
    def upper_for(cls, spec: NonlinearitySpec, mesh: Mesh, component: str = "u"):
        """Coefficients sup b_i and min a_i sampled on the mesh nodes."""
        x = mesh.nodes
        if component == "u":
            b, a, f, q = spec.b1_fn(x), as_function(spec.a1, ("x",))(x), spec.f1, spec.q1
        else:
            b, a, f, q = spec.b2_fn(x), as_function(spec.a2, ("x",))(x), spec.f2, spec.q2
        return cls("upper", float(np.max(b)), float(np.min(a)), f, q)

    def scalar_spec(self) -> NonlinearitySpec:
        f = as_function(self.f, ("t",))
        df = _derivative_1d(self.f)
        a = self.a_min
        return NonlinearitySpec.scalar(lambda x, w: a * f(w), b=self.b_sup, q=self.q,
                                       df=lambda x, w: a * df(w))


def solve_envelope(env: EnvelopeSpec, mesh: Mesh, schedule=None, compacts=((0.4, 0.6),),
                   opts: CampaignOptions = CampaignOptions(keep_solutions=False)) -> GridFunction:
    """Last escalation level of the scalar comparison problem."""
    trace = infinite_campaign(env.scalar_spec(), mesh, schedule, compacts, opts)
    return trace.final.u


# ----------------------------------------------------------- entire space

def radial_supersolution_z(a_sq_sum, N: int, r_grid, opts: TailOptions = TailOptions()
                           ) -> GridFunction:
    """Radial decaying solution of -Δz = a_sq_sum(r) on R^N:

        z(r) = int_r^inf s^(1-N) int_0^s t^(N-1) a(t) dt ds.
    """
    if N < 3:
        raise PreconditionError("a decaying radial supersolution needs N >= 3")
    if isinstance(r_grid, Mesh):
        mesh = r_grid
    else:
        r = np.asarray(r_grid, dtype=float)
        mesh = Mesh(r, Radial(N, float(r[-1])), Uniform(), ("right",))
    r = mesh.nodes
    if r[0] != 0.0:
        raise PreconditionError("r_grid must start at 0")
    a = as_function(a_sq_sum, ("r",))

    def first_moment(t):
        return t * float(a(t))

    try:
        converges, tau = classify_tail(first_moment, opts)
    except Inconclusive as exc:
        raise SlowDecay(f"cannot certify int t*a(t) dt < inf: {exc}") from exc
    if not converges:
        raise SlowDecay(
            f"int_0^inf t*a(t) dt diverges (t*a(t) decays like t^{tau:.3f}); "
            "no decaying radial supersolution exists")

    mass = Antiderivative(lambda t: t ** (N - 1) * float(a(t)), opts.epsrel)

    def outer(s):
        return s ** (1 - N) * mass(s) if s > 0 else 0.0

    R = r[-1]

    def tail(sig):
        s = R / sig
        return outer(s) * R / (sig * sig)

    z = np.empty_like(r)
    z[-1] = quad(tail, 0.0, 1.0, opts.epsrel, opts.limit)[0]
    for k in range(r.size - 2, -1, -1):
        z[k] = z[k + 1] + quad(outer, r[k], r[k + 1], opts.epsrel, opts.limit)[0]
    if np.any(np.diff(z) > 1e-12 * z[:-1]) or not np.all(np.isfinite(z)):
        raise SlowDecay("computed z is not decreasing")
    return GridFunction(mesh, z)


@dataclass
class EntireOutcome:
    trace: EscalationTrace
    z: GridFunction
    w: GridFunction
    results: list
    lower_margin: float
    growth_increasing: bool


def entire_campaign(spec: NonlinearitySpec, N: int, ball_radii: Sequence[float],
                    cells_per_unit: int = 40, a_sq_sum=None, g=None, gate: bool = True,
                    opts: CampaignOptions = CampaignOptions(), order_tol: float = 1e-8,
                    growth_points: int = 5, compacts=((0.0, 1.0),)) -> EntireOutcome:
    """Solve on balls B_n with data w_n = max w, checking w <= u_n <= u_(n+1)."""
    radii = [float(n) for n in ball_radii]
    if not radii or any(b <= a for a, b in zip(radii, radii[1:])):
        raise PreconditionError("ball radii must be non-empty and strictly increasing")
    g = spec.g if g is None else g
    if g is None:
        raise PreconditionError("entire_campaign needs g")
    if a_sq_sum is None:
        if spec.a1_sq is None or spec.a2_sq is None:
            raise PreconditionError("entire_campaign needs a1_sq, a2_sq or a_sq_sum")
        A1, A2 = as_function(spec.a1_sq, ("x",)), as_function(spec.a2_sq, ("x",))

        def a_sq_sum(r):
            return A1(r) + A2(r)

    h = 1.0 / cells_per_unit
    n_max = radii[-1]
    master_cells = int(round(n_max / h))
    if abs(master_cells * h - n_max) > 1e-9 * n_max:
        raise PreconditionError("ball radii must be multiples of 1/cells_per_unit")
    master = build_mesh(Radial(N, n_max), master_cells)
    if gate:
        rep = structural_gate(spec, master.nodes, np.geomspace(0.1, 10.0, 40))
        if rep is not None and not rep.passed:
            raise CertificateFailure("structural hypotheses fail", rep)

    G = _TailFunction(g, TailOptions())  # raises TailDiverges
    z = radial_supersolution_z(a_sq_sum, N, master)
    w_vals = np.empty_like(z.values)
    guess = None
    for k in range(w_vals.size):
        guess = invert_tail(g, float(z.values[k]), guess=guess, _G=G)
        w_vals[k] = guess
    w = GridFunction(master, w_vals)

    trace = EscalationTrace(tuple(tuple(map(float, c)) for c in compacts))
    results = []
    prev = None
    lower_margin = math.inf
    for n in radii:
        cells = int(round(n / h))
        mesh = build_mesh(Radial(N, n), cells)
        wn_nodes = np.interp(mesh.nodes, master.nodes, w_vals)
        w_n = float(np.max(wn_nodes))
        sys = DiscreteSystem.dirichlet(spec, mesh, w_n, w_n)
        solve_opts = replace(opts.solve, lower=(wn_nodes, wn_nodes))
        res = newton_solve(sys, (wn_nodes, wn_nodes), solve_opts)
        if not res.converged:
            raise NonConvergence(f"ball n={n:g} did not converge (residual {res.residual_norm:.3g})")
        tol = order_tol * (1.0 + w_n)
        low = min(np.min(res.u.values - wn_nodes), np.min(res.v.values - wn_nodes))
        lower_margin = min(lower_margin, float(low))
        if low < -tol:
            raise BarrierOrderViolation(f"u_n < w by {-low:.3g} on ball n={n:g}")
        high = max(np.max(res.u.values), np.max(res.v.values)) - w_n
        if high > tol:
            raise BarrierOrderViolation(f"u_n > w_n by {high:.3g} on ball n={n:g}")
        margin = None
        if prev is not None:
            k = prev.u.values.size
            margin = float(min(np.min(res.u.values[:k] - prev.u.values),
                               np.min(res.v.values[:k] - prev.v.values)))
            if margin < -tol:
                raise MonotonicityViolation(f"u_(n+1) < u_n by {-margin:.3g} on ball n={n:g}", n)
        trace.levels.append(LevelRecord(
            n, _compact_sups(mesh, res.u.values, trace.compacts), margin, res.iterations,
            res.residual_norm, res))
        results.append(res)
        prev = res
    outer = results[-1].u.values[-growth_points - 1:-1]
    growth = bool(np.all(np.diff(outer) > 0))
    change = trace.relative_change()
    trace.converged = change is not None and all(c < opts.rel_tol for c in change)
    return EntireOutcome(trace, z, w, results, lower_margin, growth)
