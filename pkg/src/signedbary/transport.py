"""
Induced transport maps, pushforwards of grid measures and 1D quantile functions.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import CostModel, Grid, GridMeasure, _twist_inverse
from .ctransform import TransformResult
from .errors import DimensionMismatch, DomainClampWarning, DomainTooSmall

ARGMIN = "argmin"
GRADIENT = "gradient"
NEAREST = "nearest"
MULTILINEAR = "multilinear"

MAX_CLAMP_FRACTION = 0.01
NODE_SNAP = 1e-9  # in cell units


@dataclass(frozen=True, eq=False)
class TransportMap:
    """Map from source grid nodes to target points.

    In ``'argmin'`` mode ``target`` is an array of flat node indices; in
    ``'gradient'`` mode it is an array of points, shape ``(size, dim)``,
    already clamped to the box. ``clamped`` marks nodes whose raw target left
    the box.
    """

    grid: Grid
    mode: str
    target: np.ndarray
    clamped: np.ndarray = None

    def points(self):
        if self.mode == ARGMIN:
            return self.grid.points[self.target.ravel()]
        return self.target

    def __call__(self, k):
        return self.points()[k]


def potential_gradient(values, grid):
    """Centred differences inside, one-sided at the boundary; shape ``(size, dim)``.

    Same arithmetic as ``np.gradient(..., edge_order=1)`` without its overhead.
    """
    v = np.asarray(values, dtype=float).reshape(grid.shape)
    comps = []
    for k, h in enumerate(grid.spacing):
        a = np.moveaxis(v, k, 0)
        d = np.empty_like(a)
        d[1:-1] = (a[2:] - a[:-2]) / (2.0 * h)
        d[0] = (a[1] - a[0]) / h
        d[-1] = (a[-1] - a[-2]) / h
        comps.append(np.moveaxis(d, 0, k).reshape(-1))
    return comps[0][:, None] if grid.dim == 1 else np.stack(comps, axis=-1)


def extract_map(tr: TransformResult, cost: CostModel, mode=GRADIENT) -> TransportMap:
    """Map induced by a c-transform.

    ``'argmin'`` returns the minimising node of each source node.
    ``'gradient'`` differentiates ``f^c`` and inverts the twist,
    ``T(x) = (grad_x c(x, .))^{-1}(grad f^c(x))``; targets leaving the box are
    clamped and flagged.
    """
    grid = tr.grid
    if mode == ARGMIN:
        return TransportMap(grid, ARGMIN, np.asarray(tr.argmin).ravel().copy(),
                            np.zeros(grid.size, dtype=bool))
    if mode != GRADIENT:
        raise ValueError(f"unknown map mode {mode!r}")
    grad = potential_gradient(tr.transformed.value, grid)
    y = _twist_inverse(cost, grid.points, grad)
    lo, hi = np.array(grid.lower), np.array(grid.upper)
    out = np.any((y < lo - 1e-12) | (y > hi + 1e-12), axis=-1)
    return TransportMap(grid, GRADIENT, np.clip(y, lo, hi), out)


@njit(cache=True)
def _splat_1d(s, mass, n, out):
    for k in range(s.shape[0]):
        i = min(max(int(np.floor(s[k])), 0), n - 2)
        fr = min(max(s[k] - i, 0.0), 1.0)
        w0 = 1.0 - fr
        out[i] += w0 * mass[k]
        # the last corner takes the remainder so each point's weights sum to one exactly
        out[i + 1] += (1.0 - w0) * mass[k]


@njit(cache=True)
def _splat_2d(s0, s1, mass, n0, n1, out):
    for k in range(s0.shape[0]):
        i = min(max(int(np.floor(s0[k])), 0), n0 - 2)
        j = min(max(int(np.floor(s1[k])), 0), n1 - 2)
        f0 = min(max(s0[k] - i, 0.0), 1.0)
        f1 = min(max(s1[k] - j, 0.0), 1.0)
        w00 = (1.0 - f0) * (1.0 - f1)
        w10 = f0 * (1.0 - f1)
        w01 = (1.0 - f0) * f1
        m = mass[k]
        out[i, j] += w00 * m
        out[i + 1, j] += w10 * m
        out[i, j + 1] += w01 * m
        out[i + 1, j + 1] += (1.0 - (w00 + w10 + w01)) * m


def splat(grid, pts, mass, mode=MULTILINEAR):
    """Deposit point masses onto grid nodes; returns raw node masses (grid shape)."""
    pts = np.asarray(pts, dtype=float).reshape(-1, grid.dim)
    mass = np.ascontiguousarray(mass, dtype=float).ravel()
    if mode == NEAREST:
        flat = grid.flat_index(grid.nearest_index(pts))
        return np.bincount(flat, weights=mass, minlength=grid.size).reshape(grid.shape)
    if mode != MULTILINEAR:
        raise ValueError(f"unknown splat mode {mode!r}")
    s = (pts - np.array(grid.lower)) / np.array(grid.spacing)
    # points on a node up to rounding land on it exactly, so identity maps reproduce their input
    r = np.rint(s)
    s = np.where(np.abs(s - r) <= NODE_SNAP, r, s)
    out = np.zeros(grid.shape)
    if grid.dim == 1:
        _splat_1d(np.ascontiguousarray(s[:, 0]), mass, grid.shape[0], out)
    elif grid.dim == 2:
        _splat_2d(np.ascontiguousarray(s[:, 0]), np.ascontiguousarray(s[:, 1]), mass, *grid.shape, out)
    else:
        raise ValueError("multilinear splat supports dim <= 2")
    return out


def pushforward(mu: GridMeasure, T: TransportMap, splat_mode=MULTILINEAR,
                max_clamp_fraction=MAX_CLAMP_FRACTION) -> GridMeasure:
    """Image measure ``T # mu`` deposited on the grid.

    Raises :class:`DomainTooSmall` when more than ``max_clamp_fraction`` of
    the mass was carried by clamped targets.
    """
    if mu.grid != T.grid:
        raise DimensionMismatch("measure and map live on different grids")
    m = mu.flat
    if T.clamped is not None and max_clamp_fraction is not None:
        frac = float(m[T.clamped].sum())
        if frac > max_clamp_fraction:
            raise DomainTooSmall(
                f"{100 * frac:.2f}% of the mass was clamped to the boundary; enlarge the box")
    if T.mode == ARGMIN:
        out = np.bincount(T.target, weights=m, minlength=mu.grid.size).reshape(mu.grid.shape)
    else:
        out = splat(mu.grid, T.target, m, splat_mode)
    return _measure_unchecked(mu.grid, out)


def _measure_unchecked(grid, mass):
    # mass is conserved to rounding; tiny negative rounding from the remainder corner is cleared
    mass = np.where(mass < 0, 0.0, mass)
    return GridMeasure(grid, mass)


# --------------------------------------------------------------------------
# 1D quantile functions


@dataclass(frozen=True, eq=False)
class QuantileFn:
    """Step quantile function ``Q(t) = values[k]`` for ``t`` in ``(breakpoints[k], breakpoints[k+1]]``.

    ``breakpoints`` starts at 0 and ends at 1 and has one more entry than ``values``.
    """

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if b.ndim != 1 or len(b) != len(v) + 1:
            raise ValueError("need len(breakpoints) == len(values) + 1")
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_callable(cls, func, n=4096):
        """Piecewise-constant approximation sampling ``func`` at cell midpoints."""
        t = (np.arange(n) + 0.5) / n
        return cls(np.linspace(0.0, 1.0, n + 1), np.asarray(func(t), dtype=float))

    @property
    def masses(self):
        return np.diff(self.breakpoints)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.breakpoints, t, side="left") - 1
        return self.values[np.clip(k, 0, len(self.values) - 1)]

    def is_monotone(self, tol=0.0):
        """True when no value sits more than ``tol`` below an earlier one."""
        return self.max_decrease() <= tol

    def max_decrease(self):
        """Largest drop below the running maximum (0 for a nondecreasing function)."""
        v = self.values
        return float(np.max(np.maximum.accumulate(v) - v)) if len(v) else 0.0


def merge_breakpoints(*qs):
    t = np.unique(np.concatenate([q.breakpoints for q in qs]))
    return t


def affine_combination(qs, a):
    """Step function ``sum_i a_i Q_i`` on the common refinement of breakpoints."""
    t = merge_breakpoints(*qs)
    mid = 0.5 * (t[:-1] + t[1:])
    vals = sum(ai * q(mid) for ai, q in zip(a, qs))
    return QuantileFn(t, vals)


def quantile_of(mu: GridMeasure) -> QuantileFn:
    """Generalised inverse ``Q(t) = min{x : F(x) >= t}`` of a 1D grid measure."""
    if mu.grid.dim != 1:
        raise DimensionMismatch("quantile functions need a 1D measure")
    x = mu.grid.axes[0]
    m = mu.flat
    keep = m > 0
    cdf = np.cumsum(m[keep])
    cdf[-1] = 1.0
    return QuantileFn(np.concatenate([[0.0], cdf]), x[keep])


def measure_from_quantile(q: QuantileFn, grid: Grid, splat_mode=MULTILINEAR) -> GridMeasure:
    """Law of ``Q(U)`` for ``U`` uniform on ``[0, 1]``, deposited on ``grid``.

    Values outside the box are clamped with a :class:`DomainClampWarning`.
    """
    if grid.dim != 1:
        raise DimensionMismatch("quantile functions need a 1D grid")
    v = q.values[:, None]
    inside = grid.contains(v, slack=1e-12)
    if not np.all(inside):
        warnings.warn(f"{np.sum(~inside)} quantile values outside the box were clamped",
                      DomainClampWarning, stacklevel=2)
    out = splat(grid, grid.clamp(v), q.masses, splat_mode)
    return _measure_unchecked(grid, out / out.sum())
