"""Hypothesis system: nonlinearity declarations, boundary data and certificates.

A :class:`NonlinearitySpec` carries the right-hand sides ``F_u, F_v`` of

    Δu + b1(x)|∇u|^q1 = F_u(x, u, v),   Δv + b2(x)|∇v|^q2 = F_v(x, u, v)

together with the comparison data (``a_i``, ``a_i_sq``, ``f_i``, ``g``) used
to certify the structural inequalities.  Functions may be given as parsed
expressions, as vectorized Python callables, or as plain numbers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Union

import numpy as np

from .expr import ScalarFunctionExpr, differentiate, parse, to_source
from .tails import Antiderivative, Inconclusive, TailOptions, classify_tail, quad

__all__ = [
    "NonlinearitySpec", "BoundaryCondition", "CertificateReport", "Check",
    "KOResult", "TailOptions", "Inconclusive", "TailDiverges", "OutOfRange",
    "PreconditionError", "check_f_class", "keller_osserman", "g_tail",
    "invert_tail", "verify_structural", "check_exponent_family",
    "as_function", "partial_derivative", "STRICT_SLACK",
]

# slack required before a strict inequality is accepted at a sample point
STRICT_SLACK = 1e-12

Func = Union[ScalarFunctionExpr, Callable, float, int]


class PreconditionError(ValueError):
    pass


class TailDiverges(ArithmeticError):
    pass


class OutOfRange(ValueError):
    pass


# ------------------------------------------------------------ function glue

def _coerce(f: Func, argnames):
    """Parse expression strings over ``argnames`` (x and r interchangeable)."""
    if not isinstance(f, str):
        return f
    names = tuple(argnames)
    if "x" in names and "r" not in names:
        names += ("r",)
    elif "r" in names and "x" not in names:
        names += ("x",)
    return parse(f, names)


def as_function(f: Func, argnames) -> Callable:
    """Vectorized positional callable for an expression, string, callable or number."""
    argnames = tuple(argnames)
    f = _coerce(f, argnames)
    if isinstance(f, ScalarFunctionExpr):
        inner = f.compile(argnames)
    elif callable(f):
        inner = f
    else:
        value = float(f)

        def inner(*args):
            return value

    def call(*args):
        out = inner(*args)
        if type(out) is float and all(type(a) is float for a in args):
            return out
        shape = np.broadcast(*args).shape if args else ()
        out = np.asarray(out, dtype=float)
        if out.shape != shape:
            out = np.broadcast_to(out, shape).copy()
        return out if shape else float(out)

    return call


def partial_derivative(f: Func, var: str, argnames) -> Callable:
    """Symbolic partial for expressions, central differences otherwise."""
    argnames = tuple(argnames)
    f = _coerce(f, argnames)
    if isinstance(f, ScalarFunctionExpr):
        return as_function(differentiate(f, var), argnames)
    if not callable(f):
        return as_function(0.0, argnames)
    k = argnames.index(var)
    fn = as_function(f, argnames)

    def d(*args):
        args = [np.asarray(a, dtype=float) for a in args]
        h = 1e-6 * np.maximum(1.0, np.abs(args[k]))
        hi = list(args)
        lo = list(args)
        hi[k] = args[k] + h
        lo[k] = args[k] - h
        return (fn(*hi) - fn(*lo)) / (2.0 * h)

    return d


def _source(f: Func):
    if isinstance(f, ScalarFunctionExpr):
        return to_source(f)
    if callable(f):
        return getattr(f, "__name__", "<callable>")
    return float(f)


# --------------------------------------------------------------- nonlinearity specification

_XUV = ("x", "u", "v")


@dataclass
class NonlinearitySpec:
    """Declaration of the system right-hand side and its comparison data.

    Either ``F`` (a potential in ``x, u, v``) or both partials ``Fu, Fv``
    must be given.  ``a1_sq``/``a2_sq`` are independent coefficient
    functions, not squares of ``a1``/``a2``.
    """

    Fu: Optional[Func] = None
    Fv: Optional[Func] = None
    F: Optional[Func] = None
    b1: Func = 0.0
    b2: Func = 0.0
    q1: float = 1.0
    q2: float = 1.0
    a1: Optional[Func] = None
    a2: Optional[Func] = None
    a1_sq: Optional[Func] = None
    a2_sq: Optional[Func] = None
    f1: Optional[Func] = None
    f2: Optional[Func] = None
    g: Optional[Func] = None
    # optional closed-form Jacobian entries for callables (keys: Fu_u, Fu_v, Fv_u, Fv_v)
    jacobian: Optional[Mapping[str, Callable]] = None

    fu: Callable = field(init=False, repr=False)
    fv: Callable = field(init=False, repr=False)

    def __post_init__(self):
        for name in ("q1", "q2"):
            q = float(getattr(self, name))
            if not (0.0 < q <= 2.0):
                raise PreconditionError(f"{name} must lie in (0,2], got {q}")
            setattr(self, name, q)
        if self.F is not None:
            if not isinstance(self.F, ScalarFunctionExpr):
                raise PreconditionError("a potential F must be an expression; pass Fu/Fv for callables")
            if self.Fu is None:
                self.Fu = differentiate(self.F, "u")
            if self.Fv is None:
                self.Fv = differentiate(self.F, "v")
        if self.Fu is None or self.Fv is None:
            raise PreconditionError("need F or both Fu and Fv")
        self.fu = as_function(self.Fu, _XUV)
        self.fv = as_function(self.Fv, _XUV)
        jac = dict(self.jacobian or {})
        self.fu_u = jac.get("Fu_u") or partial_derivative(self.Fu, "u", _XUV)
        self.fu_v = jac.get("Fu_v") or partial_derivative(self.Fu, "v", _XUV)
        self.fv_u = jac.get("Fv_u") or partial_derivative(self.Fv, "u", _XUV)
        self.fv_v = jac.get("Fv_v") or partial_derivative(self.Fv, "v", _XUV)
        self.b1_fn = as_function(self.b1, ("x",))
        self.b2_fn = as_function(self.b2, ("x",))

    @classmethod
    def from_sources(cls, sources: Mapping[str, object], params=None, coordinate="x"):
        """Build from expression strings (numbers pass through unchanged)."""
        coord_vars = ("x", "r")
        kinds = {
            "F": coord_vars + ("u", "v"), "Fu": coord_vars + ("u", "v"),
            "Fv": coord_vars + ("u", "v"),
            "a1": coord_vars, "a2": coord_vars, "a1_sq": coord_vars, "a2_sq": coord_vars,
            "b1": coord_vars, "b2": coord_vars,
            "f1": ("t",), "f2": ("t",), "g": ("t",),
        }
        kw = {}
        for key, value in sources.items():
            if key in ("q1", "q2"):
                kw[key] = float(value)
            elif key in kinds:
                kw[key] = parse(value, kinds[key], params) if isinstance(value, str) else value
            else:
                raise PreconditionError(f"unknown nonlinearity key {key!r}")
        return cls(**kw)

    @classmethod
    def scalar(cls, f: Func, b: Func = 0.0, q: float = 1.0, df: Optional[Callable] = None):
        """Two decoupled copies of ``Δw + b|∇w|^q = f(x, w)``.

        ``f`` is an expression in ``x, u`` or a callable ``f(x, w)``.
        """
        if isinstance(f, ScalarFunctionExpr):
            fx = as_function(f, ("x", "u"))
            dfx = as_function(differentiate(f, "u"), ("x", "u"))
        else:
            fx = as_function(f, ("x", "u"))
            dfx = df or partial_derivative(f, "u", ("x", "u"))
        zero = as_function(0.0, _XUV)
        return cls(
            Fu=lambda x, u, v: fx(x, u), Fv=lambda x, u, v: fx(x, v),
            b1=b, b2=b, q1=q, q2=q,
            jacobian={
                "Fu_u": lambda x, u, v: dfx(x, u), "Fu_v": zero,
                "Fv_u": zero, "Fv_v": lambda x, u, v: dfx(x, v),
            },
        )

    def describe(self) -> dict:
        keys = ("F", "Fu", "Fv", "b1", "b2", "a1", "a2", "a1_sq", "a2_sq", "f1", "f2", "g")
        out = {k: _source(getattr(self, k)) for k in keys if getattr(self, k) is not None}
        out.update(q1=self.q1, q2=self.q2)
        return out


@dataclass(frozen=True)
class BoundaryCondition:
    """One of ``finite`` (u=α, v=β), ``infinite`` (both blow up),
    ``semifinite_u`` (u blows up, v=β) or ``semifinite_v`` (u=α, v blows up)."""

    kind: str
    alpha: Optional[float] = None
    beta: Optional[float] = None

    def __post_init__(self):
        needs = {
            "finite": ("alpha", "beta"), "infinite": (),
            "semifinite_u": ("beta",), "semifinite_v": ("alpha",),
        }
        if self.kind not in needs:
            raise PreconditionError(f"unknown boundary kind {self.kind!r}")
        for name in needs[self.kind]:
            value = getattr(self, name)
            if value is None or not (0.0 < value < math.inf):
                raise PreconditionError(f"{name} must lie in (0, +inf), got {value}")

    @classmethod
    def finite(cls, alpha, beta):
        return cls("finite", float(alpha), float(beta))

    @classmethod
    def infinite(cls):
        return cls("infinite")

    @classmethod
    def semifinite_u(cls, beta):
        return cls("semifinite_u", beta=float(beta))

    @classmethod
    def semifinite_v(cls, alpha):
        return cls("semifinite_v", alpha=float(alpha))


# ------------------------------------------------------------ certificates

@dataclass(frozen=True)
class Check:
    name: str
    worst_margin: float
    worst_point: dict

    @property
    def passed(self) -> bool:
        return bool(self.worst_margin >= 0.0)


@dataclass(frozen=True)
class CertificateReport:
    """Signed-margin verdicts; ``passed`` iff every worst margin is >= 0."""

    checks: tuple
    samples_used: int

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failed(self):
        return [c for c in self.checks if not c.passed]

    def merged(self, other: "CertificateReport") -> "CertificateReport":
        return CertificateReport(self.checks + other.checks, self.samples_used + other.samples_used)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [
                {"name": c.name, "worst_margin": c.worst_margin, "worst_point": c.worst_point}
                for c in self.checks
            ],
            "samples_used": self.samples_used,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def margin_check(name: str, margins, points: Mapping[str, np.ndarray]) -> Check:
    """Worst (smallest) margin over a sample set; NaN counts as a failure."""
    margins = np.asarray(margins, dtype=float).ravel()
    if margins.size == 0:
        return Check(name, math.inf, {})
    bad = np.isnan(margins)
    k = int(np.flatnonzero(bad)[0]) if bad.any() else int(np.argmin(margins))
    worst = -math.inf if bad.any() else float(margins[k])
    where = {key: float(np.asarray(val, dtype=float).ravel()[k]) for key, val in points.items()}
    return Check(name, worst, where)


# ------------------------------------------------------------- operations

def check_f_class(h: Func, t_grid, name="h") -> CertificateReport:
    """Sampled F-class test: h(0) = 0, h nondecreasing, h > 0 for t > 0."""
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size < 2 or np.any(np.diff(t) <= 0) or t[0] != 0.0:
        raise PreconditionError("t_grid must be sorted, strictly increasing and start at 0")
    values = as_function(h, ("t",))(t)
    h0 = float(values[0])
    zero = Check(f"{name}(0)=0", 0.0 if abs(h0) <= 1e-12 else -abs(h0), {"t": 0.0})
    mono = margin_check(f"{name} nondecreasing", np.diff(values), {"t": t[1:]})
    pos = margin_check(f"{name}>0 for t>0", values[1:] - STRICT_SLACK, {"t": t[1:]})
    return CertificateReport((zero, mono, pos), t.size)


@dataclass(frozen=True)
class KOResult:
    converges: bool
    integral: float
    error_estimate: float
    exponent: float


def _improper_tail(f, t_split, opts):
    """int_1^inf f = int_1^T f + int_0^{1/T} f(1/s) s^-2 ds."""
    head, e1 = quad(f, 1.0, t_split, opts.epsrel, opts.limit)

    def sub(s):
        t = 1.0 / s
        return f(t) * t * t

    tail, e2 = quad(sub, 0.0, 1.0 / t_split, opts.epsrel, opts.limit)
    return head + tail, e1 + e2


def keller_osserman(h: Func, opts: TailOptions = TailOptions()) -> KOResult:
    """Decide ``int_1^inf H(t)^(-1/2) dt < inf`` with ``H(t) = int_0^t h``."""
    hf = as_function(h, ("t",))
    pre = check_f_class(hf, np.linspace(0.0, opts.t_split, 201))
    if not pre.passed:
        raise PreconditionError(
            "h is not F-class on [0, t_split]: " + ", ".join(c.name for c in pre.failed())
        )
    H = Antiderivative(hf, opts.epsrel)

    def integrand(t):
        Ht = H(t)
        if Ht <= 0.0:
            raise PreconditionError(f"H({t}) = {Ht} is not positive")
        return 0.0 if math.isinf(Ht) else Ht ** -0.5

    converges, tau = classify_tail(integrand, opts)
    if not converges:
        return KOResult(False, math.inf, math.nan, tau)
    i1, q1 = _improper_tail(integrand, opts.t_split, opts)
    i2, q2 = _improper_tail(integrand, 2.0 * opts.t_split, opts)
    err = abs(i2 - i1) + max(q1, q2)
    if err > opts.tail_tol * max(1.0, abs(i2)):
        raise Inconclusive(
            f"decay exponent {tau:.4f} suggests convergence but the tail estimate "
            f"moved by {err:.3g} under doubling of t_split"
        )
    return KOResult(True, i2, err, tau)


def g_tail(g: Func, s: float, opts: TailOptions = TailOptions()) -> float:
    """``G(s) = int_s^inf dt / g(t)``."""
    gf = as_function(g, ("t",))
    s = float(s)
    if s < 0:
        raise PreconditionError("s must be non-negative")

    def recip(t):
        gt = gf(t)
        if not gt > 0:
            raise PreconditionError(f"g({t}) = {gt} is not positive")
        return 1.0 / gt

    try:
        converges, tau = classify_tail(recip, opts)
    except Inconclusive as exc:
        raise TailDiverges(f"cannot certify convergence of int^inf 1/g: {exc}") from exc
    if not converges:
        raise TailDiverges(f"int^inf 1/g diverges (decay exponent {tau:.4f})")
    if s == 0.0:
        head, _ = quad(recip, 0.0, 1.0, opts.epsrel, opts.limit)
        return head + g_tail(g, 1.0, opts)

    def sub(w):
        # t = s / w maps (0, 1] onto [s, inf)
        t = s / w
        with np.errstate(over="ignore"):
            gt = gf(t)
        return 0.0 if math.isinf(gt) else s / (w * w * gt)

    value, _ = quad(sub, 0.0, 1.0, opts.epsrel, opts.limit)
    return value


class _TailFunction:
    """G with the convergence decision made once, for repeated evaluation."""

    def __init__(self, g, opts):
        self.gf = as_function(g, ("t",))
        self.opts = opts
        g_tail(self.gf, 1.0, opts)  # raises TailDiverges when appropriate

    def __call__(self, s):
        gf, opts = self.gf, self.opts

        def sub(w):
            t = s / w
            with np.errstate(over="ignore"):
                gt = gf(t)
            return 0.0 if math.isinf(gt) else s / (w * w * gt)

        return quad(sub, 0.0, 1.0, opts.epsrel, opts.limit)[0]


def invert_tail(g: Func, z_val: float, t_min: float = 0.0, opts: TailOptions = TailOptions(),
                guess: Optional[float] = None, _G=None) -> float:
    """Solve ``G(w) = z_val`` for ``w > t_min`` (G strictly decreasing)."""
    z = float(z_val)
    if not (z > 0.0) or not math.isfinite(z):
        raise OutOfRange(f"z_val must be a positive finite number, got {z_val}")
    G = _G or _TailFunction(g, opts)
    gf = G.gf
    floor = max(t_min, 1e-300)
    if t_min > 0 and G(t_min) <= z:
        raise OutOfRange(f"z_val={z} >= G(t_min)={G(t_min)}")
    w = guess if guess and guess > floor else 1.0
    Gw = G(w)
    lo, hi = (w, None) if Gw >= z else (None, w)
    step = 4.0
    while hi is None:
        w *= step
        Gw = G(w)
        if Gw < z:
            hi = w
        else:
            lo = w
    while lo is None:
        w /= step
        if w < floor:
            raise OutOfRange(f"z_val={z} exceeds the range of G on (t_min, inf)")
        Gw = G(w)
        if Gw >= z:
            lo = w
        else:
            hi = w
    w = math.sqrt(lo * hi)
    for _ in range(200):
        Gw = G(w)
        resid = Gw - z
        if abs(resid) <= 1e-13 * z:
            return w
        if resid > 0:
            lo = w
        else:
            hi = w
        # Newton on G, using G' = -1/g; bisect in log space when it leaves the bracket
        cand = w + resid * float(gf(w))
        if not (lo < cand < hi):
            cand = math.sqrt(lo * hi)
        if hi - lo <= 4e-16 * hi:
            break
        w = cand
    if abs(G(w) - z) > 1e-10 * z:
        raise ArithmeticError(f"tail inversion stalled at w={w}: G(w)-z={G(w) - z:.3g}")
    return w


def verify_structural(spec: NonlinearitySpec, x_samples, t_samples, s_samples=None
                      ) -> CertificateReport:
    """Sample the comparison inequalities

        F_u(x,t,s) >= a1(x) f1(t),  F_v(x,t,s) >= a2(x) f2(s),
        g(t) > max_i F_i(x,t,t) / a_i_sq(x),

    plus positivity of the coefficients and the F-class shape of f1, f2, g.
    """
    for name in ("a1", "a2", "a1_sq", "a2_sq", "f1", "f2", "g"):
        if getattr(spec, name) is None:
            raise PreconditionError(f"verify_structural needs {name}")
    x = np.asarray(x_samples, dtype=float).ravel()
    t = np.asarray(t_samples, dtype=float).ravel()
    s = t if s_samples is None else np.asarray(s_samples, dtype=float).ravel()
    if np.any(t <= 0) or np.any(s <= 0):
        raise PreconditionError("t and s samples must be strictly positive")
    a1 = as_function(spec.a1, ("x",))(x)
    a2 = as_function(spec.a2, ("x",))(x)
    a1s = as_function(spec.a1_sq, ("x",))(x)
    a2s = as_function(spec.a2_sq, ("x",))(x)
    f1 = as_function(spec.f1, ("t",))
    f2 = as_function(spec.f2, ("t",))
    g = as_function(spec.g, ("t",))

    checks = [
        margin_check("a1 positive", a1 - STRICT_SLACK, {"x": x}),
        margin_check("a2 positive", a2 - STRICT_SLACK, {"x": x}),
        margin_check("a1_sq positive", a1s - STRICT_SLACK, {"x": x}),
        margin_check("a2_sq positive", a2s - STRICT_SLACK, {"x": x}),
        margin_check("b1 nonnegative", spec.b1_fn(x), {"x": x}),
        margin_check("b2 nonnegative", spec.b2_fn(x), {"x": x}),
    ]

    X, T, S = np.meshgrid(x, t, s, indexing="ij")
    pts = {"x": X, "t": T, "s": S}
    checks.append(margin_check(
        "F_u >= a1 f1", spec.fu(X, T, S) - as_function(spec.a1, ("x",))(X) * f1(T), pts))
    checks.append(margin_check(
        "F_v >= a2 f2", spec.fv(X, T, S) - as_function(spec.a2, ("x",))(X) * f2(S), pts))

    X2, T2 = np.meshgrid(x, t, indexing="ij")
    ratio = np.maximum(
        spec.fu(X2, T2, T2) / as_function(spec.a1_sq, ("x",))(X2),
        spec.fv(X2, T2, T2) / as_function(spec.a2_sq, ("x",))(X2),
    )
    checks.append(margin_check("g > max F_i/a_i_sq", g(T2) - ratio - STRICT_SLACK,
                               {"x": X2, "t": T2}))

    grid = np.union1d([0.0], t)
    for label, fn in (("f1", f1), ("f2", f2)):
        checks.extend(check_f_class(fn, grid, label).checks)
    # g only needs to be positive and nondecreasing for the barrier constructions
    g_checks = check_f_class(g, grid, "g").checks
    checks.extend(c for c in g_checks if c.name != "g(0)=0")
    return CertificateReport(tuple(checks), X.size + X2.size + x.size + grid.size)


def check_exponent_family(rho: float, sigma: float, gamma: float, theta: float) -> bool:
    """Admissible exponents for F = c1 u^rho + c2 u^sigma v^gamma + c3 v^theta."""
    return rho > 2 and theta > 2 and sigma + gamma > 2 and sigma < 2 and gamma < 2
