"""
Domain primitives: grids, measures, potentials, weights and costs.

All objects are immutable after construction. Arrays stored on measures and
potentials are flagged read-only and have the grid's ``shape`` (row-major,
``indexing='ij'``), so ``mass.ravel()[k]`` is the mass at node ``grid.points[k]``.
"""

from __future__ import annotations

import csv
import io
import math
import os
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import ndimage

from .errors import (
    AffineSumViolation,
    DimensionMismatch,
    EmptyInput,
    InputError,
    MeanOutsideDomain,
    NegativeMass,
    NoPositiveWeight,
    NotInvertible,
    OffGridSample,
    SingularMarginal,
    ZeroWeight,
)

MASS_TOL = 1e-10


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Grid:
    """Regular node-centred lattice on a box in 1 or 2 dimensions.

    Parameters
    ----------
    lower, upper : sequence of float
        Box corners, one entry per axis.
    resolution : sequence of int
        Number of nodes per axis (at least 2).
    """

    lower: tuple
    upper: tuple
    resolution: tuple

    def __post_init__(self):
        lower = tuple(float(v) for v in np.atleast_1d(self.lower))
        upper = tuple(float(v) for v in np.atleast_1d(self.upper))
        res = tuple(int(v) for v in np.atleast_1d(self.resolution))
        if not (len(lower) == len(upper) == len(res)):
            raise DimensionMismatch("lower, upper and resolution must have equal length")
        if len(res) not in (1, 2):
            raise DimensionMismatch(f"only 1D and 2D grids are supported, got dim={len(res)}")
        if any(n < 2 for n in res):
            raise InputError("resolution must be >= 2 on every axis")
        if any(u <= lo for lo, u in zip(lower, upper)):
            raise InputError("upper must exceed lower on every axis")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "resolution", res)

    @classmethod
    def regular(cls, n, lower=0.0, upper=1.0, dim=1):
        """Grid with ``n`` nodes per axis on ``[lower, upper]^dim``."""
        return cls((lower,) * dim, (upper,) * dim, (n,) * dim)

    @property
    def dim(self):
        return len(self.resolution)

    @property
    def shape(self):
        return self.resolution

    @cached_property
    def size(self):
        return math.prod(self.resolution)

    @cached_property
    def spacing(self):
        return tuple((u - lo) / (n - 1) for lo, u, n in zip(self.lower, self.upper, self.resolution))

    @property
    def h(self):
        """Largest grid spacing."""
        return max(self.spacing)

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    @property
    def diameter(self):
        return float(np.sqrt(sum((u - lo) ** 2 for lo, u in zip(self.lower, self.upper))))

    @cached_property
    def axes(self):
        return tuple(np.linspace(lo, u, n) for lo, u, n in zip(self.lower, self.upper, self.resolution))

    @cached_property
    def points(self):
        """Node coordinates, shape ``(size, dim)``."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        pts.setflags(write=False)
        return pts

    @cached_property
    def trapezoid_weights(self):
        w = None
        for n in self.resolution:
            wk = np.ones(n)
            wk[0] = wk[-1] = 0.5
            w = wk if w is None else np.multiply.outer(w, wk)
        w = w * self.cell_volume
        w.setflags(write=False)
        return w

    def contains(self, x, slack=0.0):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo = np.array(self.lower) - slack
        hi = np.array(self.upper) + slack
        return np.all((x >= lo) & (x <= hi), axis=-1)

    def clamp(self, x):
        return np.clip(x, np.array(self.lower), np.array(self.upper))

    def nearest_index(self, x):
        """Per-axis nearest node indices for points ``x`` of shape ``(k, dim)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo = np.array(self.lower)
        h = np.array(self.spacing)
        idx = np.rint((x - lo) / h).astype(np.int64)
        return np.clip(idx, 0, np.array(self.resolution) - 1)

    def flat_index(self, idx):
        return np.ravel_multi_index(tuple(np.asarray(idx).T), self.shape)


@dataclass(frozen=True, eq=False)
class GridMeasure:
    """Probability measure carried by grid nodes.

    ``raw_total`` records the total mass before normalisation when the measure
    was built from unnormalised data (see :func:`ingest_density`).
    """

    grid: Grid
    mass: np.ndarray
    raw_total: float = field(default=1.0, compare=False)

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=float)
        if m.size != self.grid.size:
            raise DimensionMismatch(f"mass has {m.size} entries, grid has {self.grid.size} nodes")
        m = m.reshape(self.grid.shape)
        total = float(m.sum())
        if not math.isfinite(total):
            raise InputError("mass must be finite")
        if m.min() < 0:
            raise NegativeMass("mass must be nonnegative")
        if abs(total - 1.0) > MASS_TOL:
            raise InputError(f"mass must sum to 1 (got {total:.16g})")
        object.__setattr__(self, "mass", _frozen(m))

    @classmethod
    def from_weights(cls, grid, weights, raw_total=None):
        """Normalise nonnegative ``weights`` into a measure."""
        w = np.asarray(weights, dtype=float).reshape(grid.shape)
        if np.any(w < 0):
            raise NegativeMass("weights must be nonnegative")
        total = float(w.sum())
        if not total > 0:
            raise EmptyInput("total mass is zero")
        return cls(grid, w / total, raw_total=total if raw_total is None else raw_total)

    @classmethod
    def dirac(cls, grid, point):
        """Unit mass at the node nearest to ``point``."""
        w = np.zeros(grid.shape)
        w[tuple(grid.nearest_index(point)[0])] = 1.0
        return cls(grid, w)

    @property
    def flat(self):
        return self.mass.ravel()

    def mean(self):
        return self.flat @ self.grid.points

    def integrate(self, values):
        """Integral of a node function (array or :class:`Potential`)."""
        v = values.value if isinstance(values, Potential) else np.asarray(values)
        return float(np.dot(self.flat, v.ravel()))

    def support(self, threshold=0.0):
        return np.flatnonzero(self.flat > threshold)

    def marginal(self, axis):
        """1D marginal along ``axis`` of a 2D measure."""
        if self.grid.dim == 1:
            return self
        other = 1 - axis
        g = Grid((self.grid.lower[axis],), (self.grid.upper[axis],), (self.grid.resolution[axis],))
        return GridMeasure(g, self.mass.sum(axis=other))


@dataclass(frozen=True, eq=False)
class Potential:
    """Real function sampled on grid nodes."""

    grid: Grid
    value: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.value, dtype=float)
        if v.size != self.grid.size:
            raise DimensionMismatch(f"value has {v.size} entries, grid has {self.grid.size} nodes")
        v = v.reshape(self.grid.shape)
        # one reduction in the common case; the elementwise test only runs if the sum overflows
        with np.errstate(over="ignore"):
            total = float(v.sum())
        if not math.isfinite(total) and not np.isfinite(v).all():
            raise InputError("potential values must be finite")
        object.__setattr__(self, "value", _frozen(v))

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_function(cls, grid, func):
        """Sample ``func`` at the nodes; ``func`` receives an array of shape ``(size, dim)``."""
        return cls(grid, np.asarray(func(grid.points), dtype=float).reshape(grid.shape))

    @property
    def flat(self):
        return self.value.ravel()

    def __add__(self, other):
        o = other.value if isinstance(other, Potential) else other
        return Potential(self.grid, self.value + o)

    def __sub__(self, other):
        o = other.value if isinstance(other, Potential) else other
        return Potential(self.grid, self.value - o)

    def __mul__(self, k):
        return Potential(self.grid, self.value * k)

    __rmul__ = __mul__

    def __truediv__(self, k):
        return Potential(self.grid, self.value / k)

    def __neg__(self):
        return Potential(self.grid, -self.value)


# --------------------------------------------------------------------------
# weights


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Affine weights sorted in decreasing order.

    ``perm[k]`` is the position in the caller's original ordering of the
    ``k``-th sorted weight, so ``marginals_sorted = [raw[p] for p in perm]``.
    Index sets are 0-based.
    """

    a: np.ndarray
    perm: tuple
    ell: int

    @property
    def m(self):
        return len(self.a)

    @property
    def i_plus(self):
        return tuple(range(self.ell))

    @property
    def i_minus(self):
        return tuple(range(self.ell, self.m))


def validate_weights(raw: Sequence[float]) -> WeightVector:
    """Check affine weights and sort them as ``a_1 >= ... >= a_l > 0 > ... >= a_m``.

    Raises
    ------
    ZeroWeight, NoPositiveWeight, AffineSumViolation
    """
    a = np.asarray(raw, dtype=float).ravel()
    if a.size < 1:
        raise EmptyInput("at least one weight is required")
    if not np.all(np.isfinite(a)):
        raise InputError("weights must be finite")
    if np.any(np.abs(a) < 1e-15):
        raise ZeroWeight(f"weights must be nonzero: {a.tolist()}")
    if not np.any(a > 0):
        raise NoPositiveWeight(f"at least one weight must be positive: {a.tolist()}")
    if abs(a.sum() - 1.0) > 1e-12:
        raise AffineSumViolation(f"weights must sum to 1, got {a.sum():.16g}")
    perm = np.argsort(-a, kind="stable")
    a_sorted = _frozen(a[perm])
    return WeightVector(a_sorted, tuple(int(p) for p in perm), int(np.sum(a_sorted > 0)))


# --------------------------------------------------------------------------
# costs


@dataclass(frozen=True)
class CostModel:
    """Translation-invariant ground cost.

    ``kind='quadratic'`` gives ``|x-y|^2/2``; ``kind='ppower'`` gives ``|x-y|^p``
    with ``p >= 2`` (smaller exponents are not twice differentiable on the diagonal).
    """

    kind: str = "quadratic"
    p: float = 2.0

    def __post_init__(self):
        if self.kind not in ("quadratic", "ppower"):
            raise InputError(f"unknown cost kind {self.kind!r}")
        if self.kind == "ppower" and not self.p >= 2:
            raise InputError(f"p-power cost requires p >= 2, got p={self.p}")
        if self.kind == "quadratic":
            object.__setattr__(self, "p", 2.0)

    @classmethod
    def quadratic(cls):
        return cls("quadratic")

    @classmethod
    def ppower(cls, p):
        return cls("ppower", float(p))

    @property
    def is_quadratic(self):
        return self.kind == "quadratic"

    def _radial(self, r):
        return 0.5 * r * r if self.is_quadratic else r ** self.p

    def __call__(self, x, y):
        """Cost between points; trailing axis is the coordinate axis (scalars allowed in 1D)."""
        d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        if d.ndim == 0:
            return float(self._radial(abs(d)))
        if self.is_quadratic:
            return 0.5 * np.sum(d * d, axis=-1)
        return np.sqrt(np.sum(d * d, axis=-1)) ** self.p

    def matrix(self, X, Y):
        """Pairwise cost matrix between point sets of shape ``(k, d)`` and ``(l, d)``."""
        X = np.asarray(X, dtype=float).reshape(len(X), -1)
        Y = np.asarray(Y, dtype=float).reshape(len(Y), -1)
        d2 = np.zeros((len(X), len(Y)))
        for k in range(X.shape[1]):
            diff = X[:, k, None] - Y[None, :, k]
            d2 += diff * diff
        return 0.5 * d2 if self.is_quadratic else d2 ** (self.p / 2)

    def grad_x(self, x, y):
        """Gradient of ``c(., y)`` at ``x``."""
        d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        if self.is_quadratic:
            return d
        r = np.sqrt(np.sum(np.atleast_1d(d) ** 2, axis=-1, keepdims=True))
        g = self.p * r ** (self.p - 2) * np.atleast_1d(d)
        return g.reshape(np.shape(d))

    def grad_y(self, x, y):
        return -self.grad_x(x, y)


def cost_eval(model: CostModel, x, y):
    """Evaluate ``c(x, y)``."""
    return model(x, y)


def _twist_inverse(model, x, v):
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if model.is_quadratic:
        return x - v
    # p |d|^(p-2) d = v  =>  |d| = (|v|/p)^(1/(p-1)), d parallel to v
    vv = np.atleast_1d(v)
    norm = np.sqrt(np.sum(vv * vv, axis=-1, keepdims=True))
    r = (norm / model.p) ** (1.0 / (model.p - 1.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(norm > 0, vv * (r / np.where(norm > 0, norm, 1.0)), 0.0)
    return x - d.reshape(np.shape(v))


def twist_inverse_x(model: CostModel, x, v, grid: Grid | None = None, slack=1e-12):
    """Solve ``grad_x c(x, y) = v`` for ``y``.

    Vectorised over leading axes. When ``grid`` is given, a solution outside
    the box raises :class:`NotInvertible` rather than being clamped.
    """
    y = _twist_inverse(model, x, v)
    if grid is not None:
        pts = np.reshape(y, (-1, grid.dim))
        if not np.all(grid.contains(pts, slack=slack)):
            raise NotInvertible("twist inversion leaves the box")
    return y


# --------------------------------------------------------------------------
# problem


@dataclass(frozen=True, eq=False)
class Problem:
    """Signed barycenter instance with marginals sorted consistently with the weights.

    ``ac_index`` (0-based, in sorted order) designates the positive-weight
    marginal used as the base of the dual formulation.
    """

    weights: WeightVector
    marginals: tuple
    cost: CostModel = field(default_factory=CostModel)
    ac_index: int = 0

    def __post_init__(self):
        ms = tuple(self.marginals)
        object.__setattr__(self, "marginals", ms)
        if len(ms) != self.weights.m:
            raise DimensionMismatch(f"{self.weights.m} weights but {len(ms)} marginals")
        g = ms[0].grid
        if any(mu.grid != g for mu in ms):
            raise DimensionMismatch("all marginals must share one grid")
        if self.ac_index not in self.weights.i_plus:
            raise InputError("ac_index must point at a positive-weight marginal")
        if not is_ac_proxy(ms[self.ac_index]):
            raise SingularMarginal("base marginal must have connected support with at least two nodes")

    @classmethod
    def build(cls, raw_weights, marginals, cost=None, ac_index=None):
        """Validate ``raw_weights`` and reorder ``marginals`` to match.

        ``ac_index`` refers to the caller's original ordering; by default the
        largest weight is the base.
        """
        w = validate_weights(raw_weights)
        if len(marginals) != w.m:
            raise DimensionMismatch(f"{w.m} weights but {len(marginals)} marginals")
        ms = [marginals[p] for p in w.perm]
        base = 0 if ac_index is None else w.perm.index(ac_index)
        return cls(w, tuple(ms), cost or CostModel(), base)

    @property
    def grid(self):
        return self.marginals[0].grid

    @property
    def a(self):
        return self.weights.a

    @property
    def m(self):
        return self.weights.m

    @property
    def base(self):
        return self.ac_index

    @property
    def free_indices(self):
        """Indices of the independent dual potentials (all but the base)."""
        return tuple(i for i in range(self.m) if i != self.ac_index)

    @property
    def free_plus(self):
        return tuple(i for i in self.weights.i_plus if i != self.ac_index)

    @property
    def free_minus(self):
        return self.weights.i_minus


def is_ac_proxy(mu, threshold=0.0):
    """True when the support of ``mu`` is connected and spans more than one node."""
    supp = mu.mass > threshold
    if supp.sum() < 2:
        return False
    _, n = ndimage.label(supp)
    return n == 1


# --------------------------------------------------------------------------
# constructors and file formats


def gaussian_on_grid(grid: Grid, mean, sd: float) -> GridMeasure:
    """Isotropic Gaussian density sampled at the nodes.

    Node values are multiplied by trapezoidal quadrature weights before
    normalisation, so the measure integrates node functions by the
    trapezoidal rule.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    if mean.size != grid.dim:
        raise DimensionMismatch("mean has wrong dimension")
    if not grid.contains(mean)[0]:
        raise MeanOutsideDomain(f"mean {mean.tolist()} lies outside the box")
    if not sd > 0:
        raise InputError("sd must be positive")
    r2 = np.sum((grid.points - mean) ** 2, axis=-1).reshape(grid.shape)
    dens = np.exp(-r2 / (2.0 * sd * sd))
    return GridMeasure.from_weights(grid, dens * grid.trapezoid_weights, raw_total=1.0)


def ingest_density(path_or_rows, grid: Grid, density=False) -> GridMeasure:
    """Build a measure from ``x[,y],weight`` rows or a CSV file.

    Each coordinate must lie within half a cell of a grid node. Weights are
    masses by default; with ``density=True`` they are density values and the
    trapezoidal weights are folded in. The pre-normalisation total is kept in
    ``raw_total``. Inputs whose total is one up to summation rounding are not
    rescaled, so every measure file written here re-ingests unchanged.
    """
    rows = read_density_csv(path_or_rows) if isinstance(path_or_rows, (str, os.PathLike)) else path_or_rows
    rows = np.asarray(rows, dtype=float)
    if rows.size == 0:
        raise EmptyInput("no samples")
    rows = np.atleast_2d(rows)
    if rows.shape[1] != grid.dim + 1:
        raise DimensionMismatch(f"rows need {grid.dim + 1} columns, got {rows.shape[1]}")
    x, w = rows[:, :-1], rows[:, -1]
    if np.any(w < 0):
        raise NegativeMass("negative weight in input")
    lo = np.array(grid.lower)
    h = np.array(grid.spacing)
    off = (x - lo) / h
    idx = np.rint(off)
    res = np.array(grid.resolution)
    bad = np.any((np.abs(off - idx) > 0.5 + 1e-9) | (idx < 0) | (idx > res - 1), axis=1)
    if np.any(bad):
        raise OffGridSample(f"sample {x[np.argmax(bad)].tolist()} is not within h/2 of a node")
    flat = np.ravel_multi_index(tuple(idx.astype(np.int64).T), grid.shape)
    acc = np.bincount(flat, weights=w, minlength=grid.size).reshape(grid.shape)
    if density:
        acc = acc * grid.trapezoid_weights
    total = float(acc.sum())
    if not total > 0:
        raise EmptyInput("total mass is zero")
    if abs(total - 1.0) <= 4.0 * np.finfo(float).eps * grid.size:
        # already normalised up to summation rounding; keep the masses bit for bit
        return GridMeasure(grid, acc, raw_total=total)
    return GridMeasure(grid, acc / total, raw_total=total)


def read_density_csv(path):
    """Rows of floats from a ``x[,y],weight`` CSV; ``#`` starts a comment."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                out.append([float(t) for t in next(csv.reader([line]))])
            except ValueError:
                # header row
                if out:
                    raise
    return np.array(out, dtype=float)


def write_density_csv(path, obj):
    """Write a measure or potential as ``x[,y],value`` rows (one per node)."""
    vals = obj.mass if isinstance(obj, GridMeasure) else obj.value
    buf = io.StringIO()
    names = ["x", "y"][: obj.grid.dim]
    buf.write("# " + ",".join(names + ["weight"]) + "\n")
    for p, v in zip(obj.grid.points, vals.ravel()):
        buf.write(",".join(repr(float(c)) for c in p) + "," + repr(float(v)) + "\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())


MAGIC = b"SBGD1"


def write_binary(path, mu: GridMeasure):
    """Binary grid format: magic, dim (u32), resolution (u32 each), lower and upper (f64 each), masses (f64)."""
    g = mu.grid
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", g.dim))
        fh.write(struct.pack(f"<{g.dim}I", *g.resolution))
        fh.write(struct.pack(f"<{g.dim}d", *g.lower))
        fh.write(struct.pack(f"<{g.dim}d", *g.upper))
        fh.write(np.ascontiguousarray(mu.mass, dtype="<f8").tobytes())


def read_binary(path) -> GridMeasure:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != MAGIC:
        raise InputError("not an SBGD1 file")
    off = 5
    (dim,) = struct.unpack_from("<I", data, off)
    off += 4
    res = struct.unpack_from(f"<{dim}I", data, off)
    off += 4 * dim
    lower = struct.unpack_from(f"<{dim}d", data, off)
    off += 8 * dim
    upper = struct.unpack_from(f"<{dim}d", data, off)
    off += 8 * dim
    grid = Grid(lower, upper, res)
    mass = np.frombuffer(data, dtype="<f8", count=grid.size, offset=off).astype(float)
    return GridMeasure(grid, mass.reshape(grid.shape))
