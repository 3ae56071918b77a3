import json
import math

import numpy as np
import pytest

from osserman_lab.drivers import (BoundTrespass, CampaignOptions, EnvelopeSpec, MonotonicityViolation,
                                  SlowDecay, WindowTooSparse, default_schedule, entire_campaign,
                                  finite_campaign, fit_blowup_rate, infinite_campaign,
                                  radial_supersolution_z, semifinite_campaign, solve_envelope)
from osserman_lab.mesh import GradedBoundary, GridFunction, Interval, build_mesh
from osserman_lab.model import NonlinearitySpec, PreconditionError

from oracles import green_z, shoot_center_value, shoot_value_at

CUBIC = dict(Fu="u^3", Fv="v^3", g="8*(1 + t^3)", a1=1, a2=1, a1_sq=1, a2_sq=1,
             f1="t^3", f2="t^3")
SQUARE = NonlinearitySpec.from_sources({"Fu": "u^2", "Fv": "v^2"})
DOUBLE_CUBE = NonlinearitySpec.from_sources({"Fu": "2*u^3", "Fv": "2*v^3"})


def graded(cells=400, spacing=1e-4, a=0.0, b=1.0, ends=("left", "right")):
    return build_mesh(Interval(a, b), cells, GradedBoundary(0.95, spacing, ends))


# ---------------------------------------------------------------- finite

def test_finite_decoupled_cubic_sandwich():
    spec = NonlinearitySpec.from_sources(CUBIC)
    mesh = build_mesh(Interval(0, 1), 200)
    out = finite_campaign(spec, mesh, 1.0, 1.0, 0.5, 2.0)
    assert out.certificate.passed
    assert out.structural.passed
    tol = 1e-8
    for w in (out.result.u.values, out.result.v.values):
        assert np.all(out.psi.values - tol <= w) and np.all(w <= 2.0 + tol)
    # the barrier may go negative: Δψ = 16(1+ψ³) still dominates ψ³ there
    assert out.psi.values.min() < 0


def test_finite_requires_M_above_data():
    spec = NonlinearitySpec.from_sources(CUBIC)
    mesh = build_mesh(Interval(0, 1), 50)
    with pytest.raises(PreconditionError):
        finite_campaign(spec, mesh, 1.0, 3.0, 0.5, 2.0)
    with pytest.raises(PreconditionError):
        finite_campaign(spec, mesh, 1.0, 1.0, 1.0, 2.0)


def test_finite_symmetric_data_gives_equal_components():
    family = dict(F="u^3 + u^1.5*v^1.5 + v^3", a1=1, a2=1, a1_sq=1, a2_sq=1,
                  f1="3*t^2", f2="3*t^2", g="8*(1 + t^3)")
    spec = NonlinearitySpec.from_sources(family)
    mesh = build_mesh(Interval(0, 0.4), 100)
    out = finite_campaign(spec, mesh, 1.5, 1.5, 0.5, 2.0)
    np.testing.assert_allclose(out.result.u.values, out.result.v.values, rtol=1e-10)


# -------------------------------------------------------------- rate fit

def test_rate_fit_examples():
    mesh = graded(400, 1e-4)
    d = np.minimum(mesh.nodes, 1 - mesh.nodes)
    d[[0, -1]] = 1.0  # boundary nodes lie outside every window
    fit = fit_blowup_rate(GridFunction(mesh, 6 / d ** 2), (1e-3, 1e-2))
    assert fit.C == pytest.approx(6.0, rel=1e-6) and fit.tau == pytest.approx(2.0, abs=1e-6)
    fit = fit_blowup_rate(GridFunction(mesh, 1 / d), (1e-3, 1e-2))
    assert fit.C == pytest.approx(1.0, rel=1e-6) and fit.tau == pytest.approx(1.0, abs=1e-6)
    fit = fit_blowup_rate(GridFunction(mesh, 6 / d ** 2 + 10), (1e-3, 1e-2))
    assert 1.99 <= fit.tau <= 2.0 and fit.C == pytest.approx(6.0, rel=0.01)
    with pytest.raises(WindowTooSparse):
        fit_blowup_rate(GridFunction(mesh, 1 / d), (0.5, 0.5001))


def test_rate_fit_invariance():
    mesh = graded(400, 1e-4)
    d = np.minimum(mesh.nodes, 1 - mesh.nodes)
    d[[0, -1]] = 1.0
    base = fit_blowup_rate(GridFunction(mesh, 6 / d ** 2), (1e-3, 1e-2))
    scaled = fit_blowup_rate(GridFunction(mesh, 600 / d ** 2), (1e-3, 1e-2))
    assert abs(scaled.tau - base.tau) <= 1e-6
    shifted = fit_blowup_rate(GridFunction(mesh, 6 / d ** 2 + 1.0), (1e-3, 1e-2))
    assert abs(shifted.tau - base.tau) < 0.01


# -------------------------------------------------------------- infinite

def test_single_level_trace_is_degenerate():
    trace = infinite_campaign(SQUARE, graded(100, 1e-3), [4.0])
    assert len(trace.levels) == 1
    assert trace.rate_fit is None and not trace.converged
    assert trace.levels[0].monotonicity_margin is None


def test_schedule_must_increase():
    with pytest.raises(PreconditionError):
        infinite_campaign(SQUARE, graded(100, 1e-3), [4.0, 2.0])
    with pytest.raises(PreconditionError):
        infinite_campaign(SQUARE, build_mesh(Interval(0, 1), 100), [2.0, 4.0])


def test_escalation_monotone_and_compact_sups_grow():
    trace = infinite_campaign(SQUARE, graded(200, 1e-3), default_schedule(10))
    sups = [lv.compact_sup[0] for lv in trace.levels]
    assert all(b >= a for a, b in zip(sups, sups[1:]))
    for lv in trace.levels[1:]:
        assert lv.monotonicity_margin >= 0.0


def test_extended_escalation_reproduces_square_asymptotics():
    mesh = graded(800, 1e-5)
    opts = CampaignOptions(window=(1e-3, 1e-2), keep_solutions=False)
    trace = infinite_campaign(SQUARE, mesh, default_schedule(36), opts=opts)
    fit = trace.rate_fit
    assert abs(fit.tau - 2) <= 0.05 and abs(fit.C - 6) / 6 <= 0.10
    # frozen from this configuration; independent check is the shooting oracle below
    assert fit.tau == pytest.approx(1.99739, abs=1e-4)
    u = trace.final.u.values
    center = u[np.argmin(np.abs(mesh.nodes - 0.5))]
    assert center == pytest.approx(shoot_center_value(lambda w: w * w, 0.5), rel=5e-3)
    assert trace.levels[-1].compact_sup[0] == pytest.approx(
        shoot_value_at(lambda w: w * w, 0.5, 0.1), rel=5e-3)


def test_extended_escalation_reproduces_cube_asymptotics():
    mesh = graded(800, 1e-5)
    opts = CampaignOptions(window=(1e-3, 1e-2), keep_solutions=False)
    trace = infinite_campaign(DOUBLE_CUBE, mesh, default_schedule(20), opts=opts)
    fit = trace.rate_fit
    assert abs(fit.tau - 1) <= 0.05 and abs(fit.C - 1) <= 0.10
    u = trace.final.u.values
    center = u[np.argmin(np.abs(mesh.nodes - 0.5))]
    assert center == pytest.approx(shoot_center_value(lambda w: 2 * w ** 3, 0.5), rel=1e-3)


def test_trace_serialization(tmp_path):
    trace = infinite_campaign(SQUARE, graded(200, 1e-3), default_schedule(6))
    trace.to_csv(tmp_path / "trace.csv")
    rows = (tmp_path / "trace.csv").read_text().splitlines()
    assert rows[0] == "n,sup[0.4:0.6],monotonicity_margin,iterations"
    assert len(rows) == 7
    body = json.loads(trace.rate_fit_json())
    assert set(body) == {"rate_fit", "converged"}


# ------------------------------------------------------------ semifinite

def test_semifinite_decoupled_fixed_component_ignores_escalation():
    mesh = graded(200, 1e-3)
    trace, dev = semifinite_campaign(SQUARE, mesh, "v", 1.0, default_schedule(8))
    first = trace.levels[0].result.v.values
    for lv in trace.levels:
        np.testing.assert_allclose(lv.result.v.values, first, rtol=1e-12)
    assert np.all(first <= 1.0)
    sups = [lv.compact_sup[0] for lv in trace.levels]
    assert all(b > a for a, b in zip(sups, sups[1:]))


def test_semifinite_constant_is_exact_when_F_vanishes_at_the_datum():
    spec = NonlinearitySpec.from_sources({"Fu": "u^2", "Fv": "v^3 - 1"})
    trace, dev = semifinite_campaign(spec, graded(200, 1e-3), "v", 1.0, default_schedule(8))
    for lv in trace.levels:
        np.testing.assert_allclose(lv.result.v.values, 1.0, rtol=0, atol=1e-12)
    assert dev <= 1e-12


def test_semifinite_rejects_zero_datum():
    with pytest.raises(PreconditionError):
        semifinite_campaign(SQUARE, graded(100, 1e-3), "v", 0.0, [2.0, 4.0])


def test_semifinite_bound_trespass_reported():
    # F_v = v - u pulls v above its boundary datum once u grows
    spec = NonlinearitySpec.from_sources({"Fu": "u^2", "Fv": "v - u"})
    with pytest.raises(BoundTrespass):
        semifinite_campaign(spec, graded(100, 1e-3), "v", 1.0, [2.0, 4.0, 8.0])


def test_monotonicity_violation_reported():
    # boundary data that shrink with the level produce shrinking solutions
    spec = SQUARE
    mesh = graded(100, 1e-3)
    from osserman_lab import drivers

    def reversed_bc(n):
        return (1.0 / n, 1.0 / n), (1.0 / n, 1.0 / n)

    with pytest.raises(MonotonicityViolation):
        drivers._escalate(spec, mesh, [2.0, 4.0], ((0.4, 0.6),), reversed_bc, CampaignOptions())


# -------------------------------------------------------------- envelopes

def test_envelope_without_convection_is_the_campaign_limit():
    mesh = graded(200, 1e-3)
    sched = default_schedule(12)
    env = solve_envelope(EnvelopeSpec("upper", 0.0, 1.0, "t^2"), mesh, sched)
    trace = infinite_campaign(SQUARE, mesh, sched)
    np.testing.assert_allclose(env.values, trace.final.u.values, rtol=1e-12)


def test_convection_raises_the_envelope():
    # Δw + |∇w| = w² is a subsolution problem for Δw = w²: the solution with
    # convection lies above the one without (maximum principle)
    mesh = graded(200, 1e-3)
    sched = default_schedule(12)
    plain = solve_envelope(EnvelopeSpec("upper", 0.0, 1.0, "t^2"), mesh, sched)
    conv = solve_envelope(EnvelopeSpec("upper", 1.0, 1.0, "t^2", q=1.0), mesh, sched)
    assert np.all(conv.values >= plain.values - 1e-8)
    assert np.max(conv.values[1:-1] - plain.values[1:-1]) > 0


def test_system_stays_below_its_envelope():
    spec = NonlinearitySpec.from_sources({"Fu": "(2 + x)*u^2", "Fv": "(2 + x)*v^2",
                                          "a1": "2 + x", "a2": "2 + x", "f1": "t^2", "f2": "t^2"})
    mesh = graded(200, 1e-3)
    sched = default_schedule(10)
    env = EnvelopeSpec.upper_for(spec, mesh)
    assert env.a_min == 2.0
    eu = solve_envelope(env, mesh, sched)
    trace = infinite_campaign(spec, mesh, sched, envelope=(eu, eu))
    assert len(trace.levels) == 10


def test_envelope_spec_validation():
    with pytest.raises(PreconditionError):
        EnvelopeSpec("sideways", 0.0, 1.0, "t^2")
    with pytest.raises(PreconditionError):
        EnvelopeSpec("upper", 0.0, 0.0, "t^2")


# ---------------------------------------------------------- entire space

def _indicator(height):
    return lambda r: np.where(np.asarray(r) < 1.0, height, 0.0)


def test_z_for_compact_mass():
    r = np.linspace(0, 4, 161)
    z = radial_supersolution_z(_indicator(3.0), 3, r)
    out = r >= 1
    np.testing.assert_allclose(z.values[out] * r[out], 1.0, rtol=1e-6)
    inner = r < 1
    np.testing.assert_allclose(z.values[inner], 1.5 - r[inner] ** 2 / 2, rtol=1e-6)


def test_z_for_exponential_weight():
    r = np.linspace(0, 6, 61)
    a = lambda t: np.exp(-np.asarray(t))
    z = radial_supersolution_z(a, 3, r)
    assert np.all(np.diff(z.values) < 0)
    from osserman_lab.tails import TailOptions
    tight = radial_supersolution_z(a, 3, r, TailOptions(epsrel=1e-13))
    np.testing.assert_allclose(z.values, tight.values, rtol=1e-9)
    for k in (0, 10, 30, 60):
        assert z.values[k] == pytest.approx(green_z(lambda t: math.exp(-t), 3, r[k]), rel=1e-8)
    # closed form of the N = 3 Green integral: z(0) = int_0^inf t e^-t dt = 1
    assert z.values[0] == pytest.approx(1.0, rel=1e-9)


def test_slow_decay_detected():
    with pytest.raises(SlowDecay):
        radial_supersolution_z(lambda r: 1.0 / (1.0 + np.asarray(r)), 3, np.linspace(0, 2, 11))
    with pytest.raises(PreconditionError):
        radial_supersolution_z(_indicator(3.0), 2, np.linspace(0, 2, 11))


def _entire_spec():
    jac = {"Fu_u": lambda x, u, v: 2.4 * (x < 1) * u, "Fu_v": lambda x, u, v: 0.0 * u,
           "Fv_v": lambda x, u, v: 2.4 * (x < 1) * v, "Fv_u": lambda x, u, v: 0.0 * v}
    return NonlinearitySpec(Fu=lambda x, u, v: 1.2 * (x < 1) * u ** 2,
                            Fv=lambda x, u, v: 1.2 * (x < 1) * v ** 2,
                            a1_sq=_indicator(1.5), a2_sq=_indicator(1.5), g="t^2", jacobian=jac)


def test_entire_single_ball():
    out = entire_campaign(_entire_spec(), 3, [1.0], gate=False)
    assert len(out.trace.levels) == 1 and not out.trace.converged
    res = out.results[0]
    w_nodes = np.interp(res.u.mesh.nodes, out.w.mesh.nodes, out.w.values)
    assert np.all(res.u.values >= w_nodes - 1e-8)
    assert np.all(res.u.values <= w_nodes.max() + 1e-8)


def test_entire_gate_refuses_bad_g():
    spec = NonlinearitySpec.from_sources({"Fu": "exp(-r)*u^2", "Fv": "exp(-r)*v^2",
                                          "a1": "exp(-r)", "a2": "exp(-r)", "f1": "t^2", "f2": "t^2",
                                          "a1_sq": "exp(-r)", "a2_sq": "exp(-r)", "g": "0.1*t^2"})
    from osserman_lab.drivers import CertificateFailure
    with pytest.raises(CertificateFailure):
        entire_campaign(spec, 3, [1.0, 2.0])
