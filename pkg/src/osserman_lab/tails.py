"""Improper-integral helpers: cumulative antiderivatives and tail classification.

The decay of an integrand ``f`` on ``[1, inf)`` is decided from a log-log
slope fit over the last two decades below ``fit_t_max``.  Slopes clearly
below -1 mean convergence, slopes clearly above -1 mean divergence.  Inside
the ``exponent_margin`` band around -1 a comparison with the harmonic tail
``c/t`` is tried (``t*f(t)`` not decreasing means divergence); anything else
there is reported as inconclusive instead of guessed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate

__all__ = ["TailOptions", "Inconclusive", "Antiderivative", "decay_exponent", "classify_tail", "quad"]


class Inconclusive(ArithmeticError):
    """The numerical evidence cannot separate convergence from divergence."""


@dataclass(frozen=True)
class TailOptions:
    t_split: float = 100.0
    tail_tol: float = 1e-6
    exponent_margin: float = 0.02
    fit_t_max: float = 1e12
    fit_points: int = 21
    epsrel: float = 1e-12
    limit: int = 200


def quad(f, a, b, epsrel=1e-12, limit=200):
    """``scipy.integrate.quad`` with overflow in the integrand treated as data."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            return integrate.quad(f, a, b, epsabs=0.0, epsrel=epsrel, limit=limit)


def _scalar(f):
    # callers run inside quad(), which already silences floating-point warnings
    def call(t):
        return float(f(t))
    return call


class Antiderivative:
    """``H(t) = int_0^t h(s) ds`` evaluated through a lazily built ladder of
    dyadic knots, so that each call integrates only one short panel."""

    _FIRST = -20

    def __init__(self, h, epsrel=1e-12):
        self.h = _scalar(h)
        self.epsrel = epsrel
        self._knots = [0.0, 2.0 ** self._FIRST]
        self._values = [0.0, quad(self.h, 0.0, self._knots[1], epsrel)[0]]

    def _extend_to(self, t):
        while self._knots[-1] < t:
            a = self._knots[-1]
            b = 2.0 * a
            if math.isinf(b):
                self._knots.append(math.inf)
                self._values.append(math.inf)
                return
            prev = self._values[-1]
            if math.isinf(prev):
                piece = 0.0
            else:
                piece = quad(self.h, a, b, self.epsrel)[0]
            self._knots.append(b)
            self._values.append(prev + piece if math.isfinite(piece) else math.inf)

    def __call__(self, t: float) -> float:
        if t <= 0.0:
            return 0.0
        if t <= self._knots[1]:
            return quad(self.h, 0.0, t, self.epsrel)[0]
        self._extend_to(t)
        k = int(np.searchsorted(self._knots, t, side="right")) - 1
        base = self._values[k]
        if math.isinf(base):
            return math.inf
        return base + quad(self.h, self._knots[k], t, self.epsrel)[0]


def decay_exponent(f, opts: TailOptions):
    """Fit ``log f ~ tau log t`` over ``[fit_t_max/100, fit_t_max]``.

    Returns ``(tau, t, values)``; ``tau`` is ``-inf`` when ``f`` vanishes
    (underflows) anywhere in the window.
    """
    t = np.geomspace(opts.fit_t_max / 100.0, opts.fit_t_max, opts.fit_points)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        values = np.array([float(f(ti)) for ti in t])
    if np.any(np.isnan(values)) or np.any(values < 0):
        raise ValueError("tail integrand must be non-negative and defined on the fit window")
    if np.any(values == 0.0):
        return -math.inf, t, values
    if np.any(np.isinf(values)):
        return math.inf, t, values
    tau = float(np.polyfit(np.log(t), np.log(values), 1)[0])
    return tau, t, values


def classify_tail(f, opts: TailOptions):
    """Return ``(converges, tau)`` for ``int^inf f``; raise :class:`Inconclusive`."""
    tau, t, values = decay_exponent(f, opts)
    if tau < -1.0 - opts.exponent_margin:
        return True, tau
    if tau > -1.0 + opts.exponent_margin:
        return False, tau
    # harmonic comparison: f >= c/t on the window means the tail diverges
    weighted = t * values
    if np.all(np.diff(weighted) >= -1e-9 * weighted[:-1]):
        return False, tau
    raise Inconclusive(
        f"fitted decay exponent {tau:.6f} lies within {opts.exponent_margin} of -1 "
        "and the harmonic comparison is not decisive"
    )
