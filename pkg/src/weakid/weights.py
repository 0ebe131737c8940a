"""Product-of-bump weight functions, their quadrature grids and derivative tables.

Each weight is a product over axes of

    phi(s) = exp(beta / (((s - s0) / r)**2 - 1) + beta)   for |s - s0| < r

and zero elsewhere. Derivatives of phi are computed with truncated power
series: the exponent is a rational function of s, so its Taylor coefficients
follow from a series reciprocal, and the exponential of a series has a simple
recurrence. Every weight is the affine image of one master weight, so tables
are computed once on the master grid and rescaled.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from weakid.library import LibrarySpec, MultiIndex


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned problem domain; axis 0 is time."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi) or any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ConfigurationError(f"invalid box {self.lo} -> {self.hi}")

    @classmethod
    def from_bounds(cls, T: float, x_min: float, x_max: float) -> "Box":
        return cls((0.0, float(x_min)), (float(T), float(x_max)))

    @property
    def ndim(self) -> int:
        return len(self.lo)

    @property
    def widths(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= np.asarray(self.lo)) & (points <= np.asarray(self.hi)), axis=1)


@dataclass
class WeightFunction:
    center: np.ndarray
    radius: float
    beta: float = 5.0
    kind: str = "random"
    id: int = -1

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("radius must be positive")


def bump_series(z, beta: float, order: int) -> np.ndarray:
    """Derivatives d^n/dz^n of exp(beta/(z^2-1)+beta), n = 0..order.

    Returns an array of shape (order + 1, *z.shape); entries with |z| >= 1 are 0.
    """
    z = np.asarray(z, dtype=np.float64)
    shape = z.shape
    z = z.reshape(-1)
    out = np.zeros((order + 1, z.size))
    inside = np.abs(z) < 1.0
    if not inside.any():
        return out.reshape((order + 1,) + shape)
    zi = z[inside]
    d0 = zi * zi - 1.0
    d1 = 2.0 * zi
    # Taylor coefficients of 1 / ((z+h)^2 - 1) = 1 / (d0 + d1 h + h^2)
    recip = [1.0 / d0]
    for n in range(1, order + 1):
        prev2 = recip[n - 2] if n >= 2 else 0.0
        recip.append(-(d1 * recip[n - 1] + prev2) / d0)
    g = [beta * recip[0] + beta] + [beta * c for c in recip[1:]]
    e = [np.exp(g[0])]
    for n in range(1, order + 1):
        acc = np.zeros_like(zi)
        for k in range(1, n + 1):
            acc += k * g[k] * e[n - k]
        e.append(acc / n)
    for n in range(order + 1):
        out[n, inside] = math.factorial(n) * e[n]
    return out.reshape((order + 1,) + shape)


def bump_1d(s, s0: float, r: float, beta: float, order: int = 0):
    """n-th derivative (w.r.t. s) of the 1-D bump centred at s0 with radius r."""
    if r <= 0:
        raise ValueError("radius must be positive")
    if order < 0:
        raise ValueError("order must be non-negative")
    z = (np.asarray(s, dtype=np.float64) - s0) / r
    val = bump_series(z, beta, order)[order] / r**order
    return val if val.ndim else float(val)


def weight_value(w: WeightFunction, point, alpha: MultiIndex | Sequence[int] = None):
    """D^alpha w at one point (or an (n, 1+d) batch of points)."""
    point = np.asarray(point, dtype=np.float64)
    orders = _orders(alpha, len(w.center))
    val = 1.0
    for axis, n in enumerate(orders):
        val = val * bump_1d(point[..., axis], w.center[axis], w.radius, w.beta, n)
    return val


def _orders(alpha, ndim: int) -> tuple[int, ...]:
    if alpha is None:
        return (0,) * ndim
    if isinstance(alpha, MultiIndex):
        return alpha.as_tuple()
    return tuple(alpha)


@dataclass
class QuadGrid:
    """Tensor trapezoid grid: per-axis nodes and the flattened product weights."""

    axes: list[np.ndarray]
    weights: np.ndarray

    @classmethod
    def on_box(cls, lo: Sequence[float], hi: Sequence[float], n: int) -> "QuadGrid":
        if n < 2:
            raise ValueError("need at least two nodes per axis")
        axes, wts = [], []
        for a, b in zip(lo, hi):
            axes.append(np.linspace(a, b, n))
            h = (b - a) / (n - 1)
            w = np.full(n, h)
            w[0] = w[-1] = h / 2
            wts.append(w)
        return cls(axes, _outer_flat(wts))

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def integrate(self, values: np.ndarray) -> float:
        return float(np.dot(self.weights, np.ravel(values)))


def _outer_flat(vectors: Sequence[np.ndarray]) -> np.ndarray:
    out = np.ones(1)
    for v in vectors:
        out = np.multiply.outer(out, v).ravel()
    return out


@dataclass
class MasterWeight:
    center: np.ndarray
    radius: float
    beta: float
    n: int
    # node coordinates in the normalised cube [-1, 1]^(1+d)
    unit_axis: np.ndarray
    grid: QuadGrid
    tables: dict[MultiIndex, np.ndarray] = field(default_factory=dict)

    @property
    def ndim(self) -> int:
        return len(self.center)

    def nodes(self) -> np.ndarray:
        return self.grid.points()


def make_master(domain: Box, library: LibrarySpec, nodes_per_axis: int = 40, seed=0,
                beta: float = 5.0) -> MasterWeight:
    """Build the master weight and its derivative tables for every library multi-index."""
    if nodes_per_axis < 3:
        raise ConfigurationError("nodes_per_axis must be at least 3")
    rng = np.random.default_rng(seed)
    widths = domain.widths
    radius = 0.25 * float(widths.min())
    lo = np.asarray(domain.lo) + radius
    hi = np.asarray(domain.hi) - radius
    if radius <= 0 or np.any(hi <= lo):
        raise ConfigurationError("domain too small for the master weight")
    center = rng.uniform(lo, hi)

    unit = np.linspace(-1.0, 1.0, nodes_per_axis)
    grid = QuadGrid.on_box(center - radius, center + radius, nodes_per_axis)
    # the normalised coordinate is exact, so boundary nodes hit |z| = 1 exactly
    max_order = library.max_order()
    factor = bump_series(unit, beta, max_order) / radius ** np.arange(max_order + 1)[:, None]
    tables = {}
    for alpha in library.multi_indices():
        tables[alpha] = _outer_flat([factor[n] for n in alpha.as_tuple()])
    return MasterWeight(center, radius, beta, nodes_per_axis, unit, grid, tables)


@dataclass
class WeightTables:
    """Quadrature nodes, trapezoid weights and D^alpha w values for one weight."""

    weight: WeightFunction
    nodes: np.ndarray
    quad: np.ndarray
    tables: dict[MultiIndex, np.ndarray]


def map_from_master(master: MasterWeight, w: WeightFunction) -> WeightTables:
    if w.beta != master.beta:
        raise ValueError(f"beta mismatch: weight {w.beta} vs master {master.beta}")
    scale = w.radius / master.radius
    nodes = (master.nodes() - master.center) * scale + w.center
    quad = master.grid.weights * scale**master.ndim
    tables = {alpha: table / scale**alpha.order for alpha, table in master.tables.items()}
    return WeightTables(w, nodes, quad, tables)


def sample_random_weights(domain: Box, n: int, r_min: float, r_max: float, seed=None,
                          beta: float = 5.0, ids=None) -> list[WeightFunction]:
    """Uniform centres; radius = min(r_max, distance to the nearest face), redrawn below r_min."""
    if not 0 < r_min <= r_max:
        raise ConfigurationError("need 0 < r_min <= r_max")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = ids if ids is not None else itertools.count()
    lo, hi = np.asarray(domain.lo), np.asarray(domain.hi)
    out: list[WeightFunction] = []
    attempts = 0
    while len(out) < n:
        batch = max(2 * (n - len(out)), 16)
        centers = rng.uniform(lo, hi, size=(batch, len(lo)))
        face = np.minimum(centers - lo, hi - centers).min(axis=1)
        radii = np.minimum(face, r_max)
        for c, r in zip(centers, radii):
            attempts += 1
            if r >= r_min and len(out) < n:
                out.append(WeightFunction(c, float(r), beta, "random", next(ids)))
        if attempts >= 100_000 and len(out) < 0.01 * attempts:
            raise ConfigurationError(
                f"domain too thin for r_min={r_min}: accepted {len(out)} of {attempts} draws")
    return out


def default_radii(domain: Box) -> tuple[float, float]:
    side = float(domain.widths.min())
    return 0.1 * side, 0.2 * side


def dump_tables(tables: WeightTables, path) -> None:
    """Write one weight's nodes and derivative tables as JSON for inspection."""
    w = tables.weight
    doc = {
        "id": w.id,
        "kind": w.kind,
        "center": w.center.tolist(),
        "radius": w.radius,
        "beta": w.beta,
        "nodes": tables.nodes.tolist(),
        "quad": tables.quad.tolist(),
        "tables": {",".join(map(str, a.as_tuple())): t.tolist() for a, t in tables.tables.items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
