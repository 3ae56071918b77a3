"""TOML problem files: schema validation and construction of solver objects."""

from __future__ import annotations

import hashlib
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import numpy as np

from .drivers import CampaignOptions, default_schedule
from .mesh import GradedBoundary, Interval, Radial, Uniform, build_mesh
from .model import BoundaryCondition, NonlinearitySpec
from .solver import SolveOptions

__all__ = ["ProblemError", "ProblemFile", "load_problem", "parse_schedule"]


class ProblemError(ValueError):
    pass


_TABLES = {
    "params": None,  # free-form name = number
    "nonlinearity": {"F", "Fu", "Fv", "f1", "f2", "g", "a1", "a2", "a1_sq", "a2_sq",
                     "b1", "b2", "q1", "q2"},
    "domain": {"type", "a", "b", "N", "R_max"},
    "boundary": {"kind", "alpha", "beta"},
    "mesh": {"cells", "grading", "ratio", "min_spacing", "ends"},
    "campaign": {"type", "schedule", "compacts", "window", "m", "M", "radii",
                 "cells_per_unit", "tol", "max_iter", "rel_tol", "trace_nodes"},
    "check": {"x_count", "t_min", "t_max", "t_count", "t_split", "tail_tol"},
}
_REQUIRED = ("nonlinearity", "domain", "boundary", "mesh", "campaign")
_CAMPAIGN_BOUNDARY = {
    "finite": {"finite"},
    "infinite": {"infinite"},
    "semifinite": {"semifinite_u", "semifinite_v"},
    "entire": {"infinite"},
}


def parse_schedule(value) -> list:
    """A list of levels, an integer K (levels 2^1..2^K), or the string "2^K"."""
    if isinstance(value, bool):
        raise ProblemError("schedule must be a list, an integer or '2^K'")
    if isinstance(value, int):
        return default_schedule(value)
    if isinstance(value, str):
        text = value.strip()
        if text.startswith("2^") and text[2:].isdigit():
            return default_schedule(int(text[2:]))
        try:
            return [float(p) for p in text.split(",") if p.strip()]
        except ValueError:
            raise ProblemError(f"cannot read schedule {value!r}") from None
    if isinstance(value, list) and all(isinstance(v, (int, float)) for v in value):
        return [float(v) for v in value]
    raise ProblemError(f"cannot read schedule {value!r}")


@dataclass
class ProblemFile:
    path: Path
    raw: dict
    sha256: str
    spec: NonlinearitySpec
    boundary: BoundaryCondition
    params: dict = field(default_factory=dict)

    @property
    def campaign(self) -> dict:
        return self.raw["campaign"]

    @property
    def campaign_type(self) -> str:
        return self.raw["campaign"]["type"]

    @property
    def domain(self) -> dict:
        return self.raw["domain"]

    def geometry(self):
        d = self.domain
        if d["type"] == "interval":
            return Interval(float(d.get("a", 0.0)), float(d.get("b", 1.0)))
        return Radial(int(d["N"]), float(d.get("R_max", 1.0)))

    def mesh(self, cells: Optional[int] = None, min_spacing: Optional[float] = None):
        m = self.raw["mesh"]
        n = int(cells if cells is not None else m.get("cells", 200))
        grading = m.get("grading", "uniform")
        if grading == "uniform":
            if min_spacing is not None:
                raise ProblemError("--min-spacing needs a graded mesh")
            return build_mesh(self.geometry(), n, Uniform())
        ends = tuple(m.get("ends", ["left", "right"]))
        spacing = float(min_spacing if min_spacing is not None else m["min_spacing"])
        return build_mesh(self.geometry(), n, GradedBoundary(float(m.get("ratio", 0.95)), spacing, ends))

    def schedule(self, override=None):
        value = override if override is not None else self.campaign.get("schedule", 14)
        return parse_schedule(value)

    def campaign_options(self) -> CampaignOptions:
        c = self.campaign
        solve = SolveOptions(tol=float(c.get("tol", 1e-10)), max_iter=int(c.get("max_iter", 100)))
        window = c.get("window")
        return CampaignOptions(solve=solve, rel_tol=float(c.get("rel_tol", 1e-6)),
                               window=tuple(window) if window else None)

    def check_samples(self):
        chk = self.raw.get("check", {})
        geo = self.geometry()
        lo, hi = (geo.a, geo.b) if isinstance(geo, Interval) else (0.0, geo.R_max)
        x = np.linspace(lo, hi, int(chk.get("x_count", 21)))
        t = np.geomspace(float(chk.get("t_min", 0.1)), float(chk.get("t_max", 10.0)),
                         int(chk.get("t_count", 40)))
        return x, t


def _validate_tables(doc: dict):
    for table in doc:
        if table not in _TABLES:
            raise ProblemError(f"unknown table [{table}]")
        if not isinstance(doc[table], dict):
            raise ProblemError(f"[{table}] must be a table")
        allowed = _TABLES[table]
        if allowed is None:
            continue
        for key in doc[table]:
            if key not in allowed:
                raise ProblemError(f"unknown key {key!r} in [{table}]")
    for table in _REQUIRED:
        if table not in doc:
            raise ProblemError(f"missing required table [{table}]")
    for name, value in doc.get("params", {}).items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ProblemError(f"[params] {name} must be a number")


def _validate_semantics(doc: dict):
    dom = doc["domain"]
    if dom.get("type") not in ("interval", "radial"):
        raise ProblemError("[domain] type must be 'interval' or 'radial'")
    if dom["type"] == "radial" and "N" not in dom:
        raise ProblemError("[domain] radial needs N")
    camp = doc["campaign"]
    kind = doc["boundary"].get("kind")
    ctype = camp.get("type")
    if ctype not in _CAMPAIGN_BOUNDARY:
        raise ProblemError(f"[campaign] type must be one of {sorted(_CAMPAIGN_BOUNDARY)}")
    if kind not in _CAMPAIGN_BOUNDARY[ctype]:
        raise ProblemError(f"[boundary] kind {kind!r} does not fit a {ctype} campaign")
    if ctype == "entire" and dom["type"] != "radial":
        raise ProblemError("an entire campaign needs a radial domain")
    grading = doc["mesh"].get("grading", "uniform")
    if grading not in ("uniform", "graded"):
        raise ProblemError("[mesh] grading must be 'uniform' or 'graded'")
    if ctype in ("infinite", "semifinite") and grading != "graded":
        raise ProblemError("blow-up campaigns need [mesh] grading = 'graded'")
    if ctype == "finite" and not ("m" in camp and "M" in camp):
        raise ProblemError("[campaign] finite needs m and M")


def load_problem(path) -> ProblemFile:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ProblemError(f"cannot read {path}: {exc}") from exc
    try:
        doc = tomllib.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ProblemError(f"{path}: {exc}") from exc
    _validate_tables(doc)
    _validate_semantics(doc)
    params = dict(doc.get("params", {}))
    spec = NonlinearitySpec.from_sources(doc["nonlinearity"], params)
    b = doc["boundary"]
    kind = b["kind"]
    if kind == "finite":
        bc = BoundaryCondition.finite(b.get("alpha", math.nan), b.get("beta", math.nan))
    elif kind == "infinite":
        bc = BoundaryCondition.infinite()
    elif kind == "semifinite_u":
        bc = BoundaryCondition.semifinite_u(b.get("beta", math.nan))
    else:
        bc = BoundaryCondition.semifinite_v(b.get("alpha", math.nan))
    return ProblemFile(path, doc, hashlib.sha256(data).hexdigest(), spec, bc, params)
