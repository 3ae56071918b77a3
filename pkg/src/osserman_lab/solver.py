"""Discrete truncated system, damped Newton, and a-posteriori certificates.

At each free node ``i`` the residual of the u-equation is

    Δ_h u(i) + b1(x_i) min(|∇_h u(i)|^q1, R) - F_u(x_i, u_i, v_i)

and likewise for v.  ``R = inf`` gives the untruncated system through the
same arithmetic, so the two residuals agree bit for bit below the knee.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, sparse

from .expr import EvalError
from .mesh import GridFunction, Mesh, gradient
from .model import Check, CertificateReport, NonlinearitySpec, margin_check

__all__ = [
    "xi_R", "DiscreteSystem", "SolveOptions", "SolveResult", "residual", "jacobian",
    "newton_solve", "verify_subsuper", "certify_gradient_bound", "NegativeState",
    "SingularJacobian", "NonConvergence", "MeshMismatch",
]


class NegativeState(ArithmeticError):
    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (node {index})")
        self.index = index


class SingularJacobian(ArithmeticError):
    def __init__(self, iteration):
        super().__init__(f"singular Jacobian at Newton iteration {iteration}")
        self.iteration = iteration


class NonConvergence(ArithmeticError):
    pass


class MeshMismatch(ValueError):
    pass


def xi_R(t, R):
    """Truncation ``min(t, R)``."""
    return np.minimum(t, R)


@dataclass(frozen=True)
class DiscreteSystem:
    """One boundary-data level of the (possibly truncated) system.

    ``bc_u``/``bc_v`` are (left, right) Dirichlet values; on radial meshes
    only the right value is used.
    """

    spec: NonlinearitySpec
    mesh: Mesh
    bc_u: tuple
    bc_v: tuple
    R_trunc: float = math.inf

    def __post_init__(self):
        for pair in (self.bc_u, self.bc_v):
            if len(pair) != 2 or not all(math.isfinite(float(p)) for p in pair):
                raise ValueError("boundary values must be a finite (left, right) pair")
        if not self.R_trunc > 0:
            raise ValueError("R_trunc must be positive")

    @classmethod
    def dirichlet(cls, spec, mesh, alpha, beta, R_trunc=math.inf):
        return cls(spec, mesh, (float(alpha),) * 2, (float(beta),) * 2, R_trunc)

    def with_R(self, R_trunc) -> "DiscreteSystem":
        return DiscreteSystem(self.spec, self.mesh, self.bc_u, self.bc_v, R_trunc)

    def apply_bc(self, u, v):
        """Copies of ``u, v`` with the Dirichlet data written into the boundary nodes."""
        u = np.array(u, dtype=float)
        v = np.array(v, dtype=float)
        if not self.mesh.radial:
            u[0], v[0] = self.bc_u[0], self.bc_v[0]
        u[-1], v[-1] = self.bc_u[1], self.bc_v[1]
        return u, v

    def linear_interpolant(self):
        x = self.mesh.nodes
        if self.mesh.radial:
            return np.full(x.size, self.bc_u[1]), np.full(x.size, self.bc_v[1])
        s = (x - x[0]) / (x[-1] - x[0])
        return (self.bc_u[0] + s * (self.bc_u[1] - self.bc_u[0]),
                self.bc_v[0] + s * (self.bc_v[1] - self.bc_v[0]))


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-10
    max_iter: int = 100
    damping: float = 1.0
    max_halvings: int = 40
    picard_warmup: int = 20
    lower: Optional[tuple] = None  # (u, v) barrier used when clipping a negative state


@dataclass
class SolveResult:
    u: GridFunction
    v: GridFunction
    iterations: int
    residual_norm: float
    converged: bool
    max_grad_u: float
    max_grad_v: float
    R_trunc: float = math.inf
    events: list = field(default_factory=list)

    def sidecar(self) -> dict:
        return {
            "iterations": self.iterations, "residual_norm": self.residual_norm,
            "max_grad_u": self.max_grad_u, "max_grad_v": self.max_grad_v,
            "R_trunc": None if math.isinf(self.R_trunc) else self.R_trunc,
            "converged": self.converged,
        }

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("x", "u", "v"))
            for row in zip(self.u.mesh.nodes, self.u.values, self.v.values):
                w.writerow(tuple(repr(float(c)) for c in row))

    def write_sidecar(self, path):
        with open(path, "w") as fh:
            json.dump(self.sidecar(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _values(f):
    return f.values if isinstance(f, GridFunction) else np.asarray(f, dtype=float)


# ------------------------------------------------------------- residual

@dataclass
class _Parts:
    """Residual pieces at the free nodes, kept for the Jacobian and scaling."""

    r: np.ndarray
    scale: np.ndarray
    grad: np.ndarray
    power: np.ndarray


def _eval_F(fn, x, u, v, label):
    try:
        with np.errstate(all="ignore"):
            out = np.asarray(fn(x, u, v), dtype=float)
    except EvalError as exc:
        raise NegativeState(f"{label} cannot be evaluated: {exc}",
                            getattr(exc, "index", None)) from exc
    bad = ~np.isfinite(out)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise NegativeState(f"{label} is not finite at u={u.flat[k]:.6g}, v={v.flat[k]:.6g}", k)
    return np.broadcast_to(out, x.shape)


def _one_equation(sys, w, Fw, b, q):
    mesh = sys.mesh
    sl = mesh.free
    lo, mid, hi = (c[sl] for c in mesh.laplacian_weights())
    glo, gmid, ghi = (c[sl] for c in mesh.gradient_weights())
    idx = np.arange(mesh.nodes.size)[sl]
    wl = w[np.maximum(idx - 1, 0)]
    wc = w[idx]
    wr = w[idx + 1]
    lap = lo * wl + mid * wc + hi * wr
    g = glo * wl + gmid * wc + ghi * wr
    with np.errstate(divide="ignore", invalid="ignore"):
        power = np.abs(g) ** q
    conv = b * xi_R(power, sys.R_trunc)
    r = lap + conv - Fw
    scale = 1.0 + np.abs(lo * wl) + np.abs(mid * wc) + np.abs(hi * wr) + np.abs(conv) + np.abs(Fw)
    return _Parts(r, scale, g, power)


def _evaluate(sys: DiscreteSystem, u, v):
    spec, mesh = sys.spec, sys.mesh
    sl = mesh.free
    x = mesh.nodes[sl]
    uu, vv = u[sl], v[sl]
    Fu = _eval_F(spec.fu, x, uu, vv, "F_u")
    Fv = _eval_F(spec.fv, x, uu, vv, "F_v")
    pu = _one_equation(sys, u, Fu, spec.b1_fn(x), spec.q1)
    pv = _one_equation(sys, v, Fv, spec.b2_fn(x), spec.q2)
    return pu, pv


def residual(sys: DiscreteSystem, u, v) -> np.ndarray:
    """Residual at the free nodes, u-equation rows first."""
    pu, pv = _evaluate(sys, _values(u), _values(v))
    return np.concatenate([pu.r, pv.r])


def _scaled_norm(pu, pv):
    return max(float(np.max(np.abs(pu.r) / pu.scale)), float(np.max(np.abs(pv.r) / pv.scale)))


def _conv_slope(parts, b, q, R):
    """d/dg of b * min(|g|^q, R); left limit at the knee, 0 at g = 0."""
    g = parts.grad
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = q * np.abs(g) ** (q - 1.0) * np.sign(g)
    slope = np.where(g == 0.0, 0.0, slope)
    slope = np.where(parts.power <= R, slope, 0.0)
    return b * slope


def _diagonals(sys, u, v, pu, pv):
    """Tridiagonal blocks (lo, mid, hi) for each equation plus the two cross diagonals."""
    spec, mesh = sys.spec, sys.mesh
    sl = mesh.free
    x = mesh.nodes[sl]
    uu, vv = u[sl], v[sl]
    lap = [c[sl] for c in mesh.laplacian_weights()]
    grd = [c[sl] for c in mesh.gradient_weights()]
    out = []
    for parts, b, q, dself, dother in (
        (pu, spec.b1_fn(x), spec.q1, spec.fu_u, spec.fu_v),
        (pv, spec.b2_fn(x), spec.q2, spec.fv_v, spec.fv_u),
    ):
        s = _conv_slope(parts, b, q, sys.R_trunc)
        lo = lap[0] + s * grd[0]
        mid = lap[1] + s * grd[1] - np.broadcast_to(dself(x, uu, vv), x.shape)
        hi = lap[2] + s * grd[2]
        cross = -np.broadcast_to(dother(x, uu, vv), x.shape)
        out.append((lo, mid, hi, cross))
    return out


def jacobian(sys: DiscreteSystem, u, v):
    """Sparse 2x2 block Jacobian with respect to the free-node values (u block first)."""
    u, v = _values(u), _values(v)
    pu, pv = _evaluate(sys, u, v)
    (ulo, umid, uhi, uv), (vlo, vmid, vhi, vu) = _diagonals(sys, u, v, pu, pv)
    n = umid.size

    def tri(lo, mid, hi):
        return sparse.diags([lo[1:], mid, hi[:-1]], [-1, 0, 1], shape=(n, n), format="csr")

    return sparse.bmat([
        [tri(ulo, umid, uhi), sparse.diags(uv, format="csr")],
        [sparse.diags(vu, format="csr"), tri(vlo, vmid, vhi)],
    ], format="csr")


def _banded(diags):
    """Interleaved (u0, v0, u1, v1, ...) pentadiagonal storage for solve_banded."""
    (ulo, umid, uhi, uv), (vlo, vmid, vhi, vu) = diags
    n = umid.size
    ab = np.zeros((5, 2 * n))

    def put(row, col, val):
        ab[2 + row - col, col] = val

    ku = 2 * np.arange(n)
    kv = ku + 1
    put(ku, ku, umid)
    put(ku, kv, uv)
    put(ku[1:], ku[:-1], ulo[1:])
    put(ku[:-1], ku[1:], uhi[:-1])
    put(kv, kv, vmid)
    put(kv, ku, vu)
    put(kv[1:], kv[:-1], vlo[1:])
    put(kv[:-1], kv[1:], vhi[:-1])
    return ab


def _max_grads(mesh, u, v):
    gu, gv = np.abs(gradient(mesh, u)), np.abs(gradient(mesh, v))
    if mesh.radial:
        gu[0] = gv[0] = 0.0
    return float(gu.max()), float(gv.max())


def _result(sys, u, v, it, norm, ok, events):
    gu, gv = _max_grads(sys.mesh, u, v)
    return SolveResult(GridFunction(sys.mesh, u), GridFunction(sys.mesh, v), it, norm, ok,
                       gu, gv, sys.R_trunc, events)


def _picard(sys, u, v, pu, pv):
    """One lagged sweep: L w - c w = F(old) - conv(old) - c w_old, with c >= dF/dw."""
    mesh = sys.mesh
    sl = mesh.free
    x = mesh.nodes[sl]
    lap = [c[sl] for c in mesh.laplacian_weights()]
    spec = sys.spec
    new = []
    for w, parts, dself in ((u, pu, spec.fu_u), (v, pv, spec.fv_v)):
        c = float(max(0.0, np.max(dself(x, u[sl], v[sl]))))
        # rhs = L w_old - r_old - c w_old  so that the sweep is a fixed point of r = 0
        lw = lap[0] * w[np.maximum(np.arange(w.size)[sl] - 1, 0)] + lap[1] * w[sl] + lap[2] * w[np.arange(w.size)[sl] + 1]
        rhs = lw - parts.r - c * w[sl]
        lo, mid, hi = lap[0].copy(), lap[1] - c, lap[2].copy()
        # move known boundary values to the right-hand side
        if not mesh.radial:
            rhs[0] -= lo[0] * w[0]
        rhs[-1] -= hi[-1] * w[-1]
        ab = np.zeros((3, mid.size))
        ab[0, 1:] = hi[:-1]
        ab[1] = mid
        ab[2, :-1] = lo[1:]
        sol = linalg.solve_banded((1, 1), ab, rhs)
        w = w.copy()
        w[sl] = sol
        new.append(w)
    return new


def newton_solve(sys: DiscreteSystem, init, opts: SolveOptions = SolveOptions()) -> SolveResult:
    """Damped Newton with backtracking; lagged sweeps when the line search stalls."""
    mesh = sys.mesh
    sl = mesh.free
    u, v = sys.apply_bc(_values(init[0]), _values(init[1]))
    events = []
    try:
        pu, pv = _evaluate(sys, u, v)
    except NegativeState as exc:
        events.append(f"initial state rejected: {exc}; clipping")
        if opts.lower is not None:
            lu, lv = (_values(w) for w in opts.lower)
            u, v = np.maximum(u, lu), np.maximum(v, lv)
        else:
            u, v = np.maximum(u, 1e-12), np.maximum(v, 1e-12)
        u, v = sys.apply_bc(u, v)
        pu, pv = _evaluate(sys, u, v)
    norm = _scaled_norm(pu, pv)
    picard_left = opts.picard_warmup
    it = 0
    while it < opts.max_iter:
        if norm <= opts.tol:
            return _result(sys, u, v, it, norm, True, events)
        it += 1
        ab = _banded(_diagonals(sys, u, v, pu, pv))
        rhs = np.empty(2 * pu.r.size)
        rhs[0::2] = -pu.r
        rhs[1::2] = -pv.r
        try:
            with np.errstate(all="ignore"):
                step = linalg.solve_banded((2, 2), ab, rhs, check_finite=True)
        except (linalg.LinAlgError, ValueError) as exc:
            raise SingularJacobian(it) from exc
        if not np.all(np.isfinite(step)):
            raise SingularJacobian(it)
        du, dv = step[0::2], step[1::2]
        lam = opts.damping
        accepted = False
        merit = math.hypot(np.linalg.norm(pu.r / pu.scale), np.linalg.norm(pv.r / pv.scale))
        for _ in range(opts.max_halvings):
            tu, tv = u.copy(), v.copy()
            tu[sl] += lam * du
            tv[sl] += lam * dv
            try:
                qu, qv = _evaluate(sys, tu, tv)
            except NegativeState:
                lam *= 0.5
                continue
            trial = math.hypot(np.linalg.norm(qu.r / qu.scale), np.linalg.norm(qv.r / qv.scale))
            if trial < merit or _scaled_norm(qu, qv) <= opts.tol:
                accepted = True
                break
            lam *= 0.5
        if accepted:
            u, v, pu, pv = tu, tv, qu, qv
            norm = _scaled_norm(pu, pv)
            continue
        if picard_left <= 0:
            events.append(f"line search stalled at iteration {it}")
            break
        picard_left -= 1
        events.append(f"lagged sweep at iteration {it}")
        try:
            nu, nv = _picard(sys, u, v, pu, pv)
            qu, qv = _evaluate(sys, nu, nv)
        except (NegativeState, linalg.LinAlgError, ValueError):
            events.append("lagged sweep left the admissible set")
            break
        u, v, pu, pv = nu, nv, qu, qv
        norm = _scaled_norm(pu, pv)
    return _result(sys, u, v, it, norm, norm <= opts.tol, events)


# --------------------------------------------------------- certificates

def _same_mesh(sys, *fns):
    for f in fns:
        if isinstance(f, GridFunction) and f.mesh is not sys.mesh:
            if f.mesh.nodes.shape != sys.mesh.nodes.shape or np.any(f.mesh.nodes != sys.mesh.nodes):
                raise MeshMismatch("grid functions live on different meshes")
        if _values(f).shape != sys.mesh.nodes.shape:
            raise MeshMismatch("grid function length does not match the mesh")


def cert_tolerance(parts, tol):
    """Per-row tolerance for discrete inequalities: 10 * tol * (1 + stencil scale)."""
    return 10.0 * tol * parts.scale


def verify_subsuper(sys: DiscreteSystem, lower: Sequence, upper: Sequence,
                    tol: float = 1e-10) -> CertificateReport:
    """Check the ordered-pair hypotheses of the sub/supersolution theorem on the mesh."""
    _same_mesh(sys, *lower, *upper)
    mesh = sys.mesh
    lu, lv = (_values(f) for f in lower)
    uu, uv = (_values(f) for f in upper)
    x = mesh.nodes
    scale_val = 10.0 * tol * (1.0 + max(np.max(np.abs(lu)), np.max(np.abs(uu)),
                                        np.max(np.abs(lv)), np.max(np.abs(uv))))
    checks = [
        margin_check("ordering u_lower <= u_upper", uu - lu + scale_val, {"x": x}),
        margin_check("ordering v_lower <= v_upper", uv - lv + scale_val, {"x": x}),
    ]
    ends = [(-1, 1)] if mesh.radial else [(0, 0), (-1, 1)]
    for node, side in ends:
        a, b = sys.bc_u[side], sys.bc_v[side]
        pt = {"x": np.array([x[node]])}
        checks += [
            margin_check("boundary u_lower <= alpha", np.array([a - lu[node] + scale_val]), pt),
            margin_check("boundary alpha <= u_upper", np.array([uu[node] - a + scale_val]), pt),
            margin_check("boundary v_lower <= beta", np.array([b - lv[node] + scale_val]), pt),
            margin_check("boundary beta <= v_upper", np.array([uv[node] - b + scale_val]), pt),
        ]
    xf = {"x": x[mesh.free]}
    pu, pv = _evaluate(sys, lu, lv)
    checks.append(margin_check("sub inequality u-equation", pu.r + cert_tolerance(pu, tol), xf))
    checks.append(margin_check("sub inequality v-equation", pv.r + cert_tolerance(pv, tol), xf))
    pu, pv = _evaluate(sys, uu, uv)
    checks.append(margin_check("super inequality u-equation", cert_tolerance(pu, tol) - pu.r, xf))
    checks.append(margin_check("super inequality v-equation", cert_tolerance(pv, tol) - pv.r, xf))
    return CertificateReport(tuple(checks), 4 * x.size)


def certify_gradient_bound(result: SolveResult, sys: DiscreteSystem):
    """``(ok, R_star)``: gradients below the truncation level and the truncated
    residual equal to the untruncated one at every node."""
    if not result.converged:
        raise NonConvergence("certify_gradient_bound needs a converged solve")
    u, v = result.u.values, result.v.values
    gu, gv = _max_grads(sys.mesh, u, v)
    pu_, pv_ = gu ** sys.spec.q1, gv ** sys.spec.q2
    R_star = max(pu_, pv_)
    ok = pu_ < sys.R_trunc and pv_ < sys.R_trunc
    if ok:
        truncated = residual(sys, u, v)
        plain = residual(sys.with_R(math.inf), u, v)
        ok = bool(np.array_equal(truncated, plain))
    return ok, R_star
