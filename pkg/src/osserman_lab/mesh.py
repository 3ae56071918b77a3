"""One-dimensional interval and radial meshes with nonuniform stencils."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np

__all__ = [
    "Interval", "Radial", "Uniform", "GradedBoundary", "BadGrading", "Mesh",
    "GridFunction", "build_mesh", "laplacian_row", "gradient_at", "gradient",
    "boundary_distance", "boundary_distances",
]


class BadGrading(ValueError):
    pass


@dataclass(frozen=True)
class Interval:
    a: float
    b: float

    def __post_init__(self):
        if not self.b > self.a:
            raise ValueError("Interval needs a < b")


@dataclass(frozen=True)
class Radial:
    N: int
    R_max: float

    def __post_init__(self):
        if self.N < 1 or self.R_max <= 0:
            raise ValueError("Radial needs N >= 1 and R_max > 0")


@dataclass(frozen=True)
class Uniform:
    pass


@dataclass(frozen=True)
class GradedBoundary:
    """Cells shrink by ``ratio`` toward each listed end ("left"/"right")."""

    ratio: float
    min_spacing: float
    ends: Tuple[str, ...] = ("left", "right")


Geometry = Union[Interval, Radial]
Grading = Union[Uniform, GradedBoundary]


@dataclass(frozen=True, eq=False)
class Mesh:
    nodes: np.ndarray
    geometry: Geometry
    grading: Grading
    blowup_ends: Tuple[str, ...]
    _lap: tuple = field(init=False, repr=False)
    _grad: tuple = field(init=False, repr=False)

    def __post_init__(self):
        x = np.array(self.nodes, dtype=float)
        x.setflags(write=False)
        object.__setattr__(self, "nodes", x)
        if x.size < 3 or np.any(np.diff(x) <= 0):
            raise ValueError("mesh nodes must be strictly increasing, at least 3")
        object.__setattr__(self, "_lap", _laplacian_weights(self))
        object.__setattr__(self, "_grad", _gradient_weights(self))

    @property
    def radial(self) -> bool:
        return isinstance(self.geometry, Radial)

    @property
    def M(self) -> int:
        """Index of the last node."""
        return self.nodes.size - 1

    @property
    def spacing(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def free(self) -> slice:
        """Nodes carrying unknowns: interior ones, plus r = 0 on radial meshes."""
        return slice(0 if self.radial else 1, self.M)

    @property
    def left(self) -> float:
        return float(self.nodes[0])

    @property
    def right(self) -> float:
        return float(self.nodes[-1])

    def laplacian_weights(self):
        """(lower, diagonal, upper) stencil arrays over all nodes; boundary rows are 0."""
        return self._lap

    def gradient_weights(self):
        """(lower, diagonal, upper) for the central first derivative over all nodes.

        Boundary rows and the radial center are 0; see :func:`gradient` for
        the one-sided endpoint formulas.
        """
        return self._grad

    def refine(self) -> "Mesh":
        """Bisect every cell."""
        x = self.nodes
        fine = np.empty(2 * x.size - 1)
        fine[0::2] = x
        fine[1::2] = 0.5 * (x[:-1] + x[1:])
        grading = self.grading
        if isinstance(grading, GradedBoundary):
            grading = GradedBoundary(math.sqrt(grading.ratio), grading.min_spacing / 2, grading.ends)
        return Mesh(fine, self.geometry, grading, self.blowup_ends)


def _laplacian_weights(mesh: Mesh):
    x = mesh.nodes
    n = x.size
    lo, mid, hi = np.zeros(n), np.zeros(n), np.zeros(n)
    hm = x[1:-1] - x[:-2]
    hp = x[2:] - x[1:-1]
    lo[1:-1] = 2.0 / (hm * (hm + hp))
    hi[1:-1] = 2.0 / (hp * (hm + hp))
    mid[1:-1] = -2.0 / (hm * hp)
    if mesh.radial:
        N = mesh.geometry.N
        glo, gmid, ghi = _central(x)
        k = (N - 1) / x[1:-1]
        lo[1:-1] += k * glo
        mid[1:-1] += k * gmid
        hi[1:-1] += k * ghi
        # symmetric limit at the center: Δu(0) ≈ 2N (u1 - u0) / h1²
        h1 = x[1] - x[0]
        mid[0] = -2.0 * N / h1 ** 2
        hi[0] = 2.0 * N / h1 ** 2
    return lo, mid, hi


def _central(x):
    hm = x[1:-1] - x[:-2]
    hp = x[2:] - x[1:-1]
    lo = -hp / (hm * (hm + hp))
    mid = (hp - hm) / (hm * hp)
    hi = hm / (hp * (hm + hp))
    return lo, mid, hi


def _gradient_weights(mesh: Mesh):
    n = mesh.nodes.size
    lo, mid, hi = np.zeros(n), np.zeros(n), np.zeros(n)
    lo[1:-1], mid[1:-1], hi[1:-1] = _central(mesh.nodes)
    return lo, mid, hi


def _graded_cells(length, n_cells, grading: GradedBoundary, n_ends):
    r, m = grading.ratio, grading.min_spacing
    if not (0.0 < r < 1.0):
        raise BadGrading(f"ratio must lie in (0,1), got {r}")
    if not m > 0:
        raise BadGrading("min_spacing must be positive")
    # cells listed from the boundary inward: m, m, m/r, m/r^2, ...
    best = None
    cells = []
    while True:
        k = len(cells)
        cells.append(m if k < 2 else cells[-1] / r)
        K = len(cells)
        interior = n_cells - n_ends * K
        if interior < 1:
            break
        h_int = (length - n_ends * sum(cells)) / interior
        if h_int >= cells[-1]:
            best = (list(cells), h_int, interior)
        else:
            break
    if best is None or len(best[0]) < 2:
        raise BadGrading(
            f"cannot grade {n_cells} cells on length {length} down to min_spacing {m} "
            f"with ratio {r}"
        )
    return best


def build_mesh(geometry: Geometry, n_cells: int, grading: Grading = Uniform(),
               blowup_ends=None) -> Mesh:
    """Nodes for ``geometry``.  ``n_cells`` counts all cells.

    ``blowup_ends`` defaults to the graded ends (radial meshes: the outer
    radius; uniform interval meshes: both ends).
    """
    if n_cells < 4:
        raise ValueError("n_cells must be >= 4")
    if isinstance(geometry, Interval):
        a, b = geometry.a, geometry.b
    else:
        a, b = 0.0, geometry.R_max
    if isinstance(grading, GradedBoundary):
        ends = tuple(grading.ends)
        if isinstance(geometry, Radial):
            ends = tuple(e for e in ends if e == "right")
        if not ends or any(e not in ("left", "right") for e in ends):
            raise BadGrading(f"graded ends must be 'left'/'right', got {grading.ends}")
        graded, h_int, interior = _graded_cells(b - a, n_cells, grading, len(ends))
        widths = []
        if "left" in ends:
            widths.extend(graded)
        widths.extend([h_int] * interior)
        if "right" in ends:
            widths.extend(reversed(graded))
        nodes = a + np.concatenate([[0.0], np.cumsum(widths)])
        nodes[-1] = b
        default_ends = ends
    else:
        nodes = np.linspace(a, b, n_cells + 1)
        default_ends = ("right",) if isinstance(geometry, Radial) else ("left", "right")
    ends = tuple(blowup_ends) if blowup_ends is not None else default_ends
    return Mesh(nodes, geometry, grading, ends)


def laplacian_row(mesh: Mesh, i: int):
    """Stencil ``(c_{i-1}, c_i, c_{i+1})`` of the discrete Laplacian at node ``i``."""
    if not (0 < i < mesh.M or (mesh.radial and i == 0)):
        raise IndexError(f"node {i} has no Laplacian row")
    lo, mid, hi = mesh.laplacian_weights()
    return float(lo[i]), float(mid[i]), float(hi[i])


def gradient(mesh: Mesh, values) -> np.ndarray:
    """First derivative at every node: central inside, one-sided second order at ends."""
    f = np.asarray(values, dtype=float)
    x = mesh.nodes
    lo, mid, hi = mesh.gradient_weights()
    d = np.zeros_like(f)
    d[1:-1] = lo[1:-1] * f[:-2] + mid[1:-1] * f[1:-1] + hi[1:-1] * f[2:]
    h1, h2 = x[1] - x[0], x[2] - x[1]
    d[0] = (-(2 * h1 + h2) / (h1 * (h1 + h2)) * f[0] + (h1 + h2) / (h1 * h2) * f[1]
            - h1 / (h2 * (h1 + h2)) * f[2])
    h1, h2 = x[-1] - x[-2], x[-2] - x[-3]
    d[-1] = ((2 * h1 + h2) / (h1 * (h1 + h2)) * f[-1] - (h1 + h2) / (h1 * h2) * f[-2]
             + h1 / (h2 * (h1 + h2)) * f[-3])
    return d


def gradient_at(mesh: Mesh, f, i: int) -> float:
    values = f.values if isinstance(f, GridFunction) else f
    return float(gradient(mesh, values)[i])


def boundary_distances(mesh: Mesh) -> np.ndarray:
    x = mesh.nodes
    d = np.full(x.size, np.inf)
    if "left" in mesh.blowup_ends and not mesh.radial:
        d = np.minimum(d, x - mesh.left)
    if "right" in mesh.blowup_ends:
        d = np.minimum(d, mesh.right - x)
    return d


def boundary_distance(mesh: Mesh, i: int) -> float:
    return float(boundary_distances(mesh)[i])


@dataclass(frozen=True, eq=False)
class GridFunction:
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.mesh.nodes.shape:
            raise ValueError(f"expected {self.mesh.nodes.size} values, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid function values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def to_csv(self, path, header=("x", "value")):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for x, y in zip(self.mesh.nodes, self.values):
                w.writerow((repr(float(x)), repr(float(y))))
