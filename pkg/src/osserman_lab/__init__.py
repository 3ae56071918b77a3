"""Numerical laboratory for boundary blow-up solutions of elliptic systems
with gradient (convection) terms."""

__version__ = "0.1.0"
