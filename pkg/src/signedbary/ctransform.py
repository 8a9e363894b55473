"""
Discrete c-transforms on a grid.

``f^c(x) = min_y c(x, y) - f(y)`` where the minimum runs over grid nodes.
The brute-force path works for any cost; the quadratic cost additionally has
a linear-time path through the discrete Legendre transform, applied axis by
axis in 2D.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import CostModel, Potential


@dataclass(frozen=True, eq=False)
class TransformResult:
    """A c-transform together with the minimising node of every source node.

    ``argmin`` holds flat node indices with the grid's shape.
    """

    transformed: Potential
    argmin: np.ndarray

    @property
    def grid(self):
        return self.transformed.grid


@njit(cache=True)
def _brute_argmin_1d(table, fy, scale):
    # table[k + n - 1] = c at node offset k; lowest index wins ties
    n = fy.shape[0]
    arg = np.empty(n, np.int64)
    for i in range(n):
        best = np.inf
        k = 0
        for j in range(n):
            v = scale * table[i - j + n - 1] - fy[j]
            if v < best:
                best = v
                k = j
        arg[i] = k
    return arg


@njit(cache=True)
def _brute_argmin_2d(table, fy, scale):
    n0, n1 = fy.shape
    arg = np.empty(n0 * n1, np.int64)
    for i0 in range(n0):
        for i1 in range(n1):
            best = np.inf
            k = 0
            for j0 in range(n0):
                row = table[i0 - j0 + n0 - 1]
                for j1 in range(n1):
                    v = scale * row[i1 - j1 + n1 - 1] - fy[j0, j1]
                    if v < best:
                        best = v
                        k = j0 * n1 + j1
            arg[i0 * n1 + i1] = k
    return arg


def _offset_table(grid, cost):
    """Cost as a function of the node offset, shape ``(2n_0 - 1, ..., 2n_d - 1)``."""
    offs = [np.arange(-(n - 1), n) * h for n, h in zip(grid.resolution, grid.spacing)]
    d = np.stack(np.meshgrid(*offs, indexing="ij"), axis=-1)
    return cost(d, np.zeros(grid.dim))


def _cost_to(grid, cost, arg):
    """``c(x_j, y_arg[j])`` from integer node offsets, matching the scan table bit for bit."""
    arg = np.asarray(arg).ravel()
    if grid.dim == 1:
        ds = [(np.arange(grid.size) - arg) * grid.spacing[0]]
    else:
        src = np.indices(grid.shape).reshape(grid.dim, -1)
        dst = np.unravel_index(arg, grid.shape)
        ds = [(src[k] - dst[k]) * grid.spacing[k] for k in range(grid.dim)]
    if cost.is_quadratic:
        # same operations, in the same order, as the table's cost evaluation
        d2 = ds[0] * ds[0] if grid.dim == 1 else ds[0] * ds[0] + ds[1] * ds[1]
        return 0.5 * d2
    return cost(np.stack(ds, axis=-1), np.zeros(grid.dim))


def ctransform_brute(f: Potential, cost: CostModel, scale=1.0) -> TransformResult:
    """Exact discrete c-transform by scanning all node pairs.

    Ties are broken by the lowest node index. ``scale`` multiplies the cost,
    giving ``min_y scale*c(x,y) - f(y)``. The scan reads the cost from a
    table indexed by node offset; values are then recomputed from the cost at
    the selected node.
    """
    grid = f.grid
    if grid.dim > 2:
        raise ValueError("the brute transform supports dim <= 2")
    table = np.ascontiguousarray(_offset_table(grid, cost))
    fy = np.ascontiguousarray(f.value)
    kernel = _brute_argmin_1d if grid.dim == 1 else _brute_argmin_2d
    arg = kernel(table, fy, float(scale))
    vals = scale * _cost_to(grid, cost, arg) - f.flat[arg]
    return TransformResult(Potential(grid, vals.reshape(grid.shape)), arg.reshape(grid.shape))


@njit(cache=True)
def _legendre_argmax(psi, y, x):
    # For each row r and sorted query x[t]: argmax_j x[t]*y[j] - psi[r, j],
    # via the lower convex hull of (y, psi[r]) and a monotone sweep.
    R, n = psi.shape
    q = x.shape[0]
    out = np.empty((R, q), np.int64)
    hull = np.empty(n, np.int64)
    for r in range(R):
        k = 0
        for j in range(n):
            while k >= 2:
                i0 = hull[k - 2]
                i1 = hull[k - 1]
                lhs = (psi[r, i1] - psi[r, i0]) * (y[j] - y[i1])
                rhs = (psi[r, j] - psi[r, i1]) * (y[i1] - y[i0])
                if lhs >= rhs:
                    k -= 1
                else:
                    break
            hull[k] = j
            k += 1
        p = 0
        for t in range(q):
            while p < k - 1:
                a = hull[p]
                b = hull[p + 1]
                if psi[r, b] - psi[r, a] < x[t] * (y[b] - y[a]):
                    p += 1
                else:
                    break
            out[r, t] = hull[p]
    return out


def legendre_argmax(psi, y, x):
    """Row-wise maximiser of ``x*y_j - psi_j`` (``y`` and ``x`` ascending)."""
    psi = np.ascontiguousarray(np.atleast_2d(psi), dtype=float)
    return _legendre_argmax(psi, np.ascontiguousarray(y, dtype=float), np.ascontiguousarray(x, dtype=float))


def ctransform_fast_quadratic(f: Potential) -> TransformResult:
    """c-transform for ``c = |x-y|^2/2`` in linear time per axis.

    Uses ``f^c(x) = |x|^2/2 - psi*(x)`` with ``psi(y) = |y|^2/2 - f(y)``; the
    discrete conjugate ``psi*`` is separable across axes.
    """
    grid = f.grid
    cost = CostModel.quadratic()
    if grid.dim == 1:
        (y,) = grid.axes
        psi = 0.5 * y * y - f.value
        arg = legendre_argmax(psi[None, :], y, y)[0]
    else:
        y0, y1 = grid.axes
        psi = 0.5 * y0[:, None] ** 2 + 0.5 * y1[None, :] ** 2 - f.value
        # inner pass over the second axis, one row per first-axis node
        a1 = legendre_argmax(psi, y1, y1)  # (n0, q1)
        rows = np.arange(grid.shape[0])[:, None]
        g = y1[None, :] * y1[a1] - psi[rows, a1]  # (n0, q1)
        # outer pass over the first axis, one row per second-axis query
        a0 = legendre_argmax(-g.T, y0, y0).T  # (q0, q1)
        cols = np.arange(grid.shape[1])[None, :]
        arg = np.ravel_multi_index((a0, a1[a0, cols]), grid.shape)
    arg = arg.reshape(grid.shape)
    vals = _cost_to(grid, cost, arg) - f.flat[arg.ravel()]
    return TransformResult(Potential(grid, vals.reshape(grid.shape)), arg)


def c_transform(f: Potential, cost: CostModel, method="auto") -> TransformResult:
    """Dispatch to the fast path for the quadratic cost, brute force otherwise."""
    if method == "brute" or (method == "auto" and not cost.is_quadratic):
        return ctransform_brute(f, cost)
    if not cost.is_quadratic:
        raise ValueError("fast transform requires the quadratic cost")
    return ctransform_fast_quadratic(f)


def c_concavify(f: Potential, cost: CostModel, method="auto") -> Potential:
    """Return ``f^{cc}``, the smallest c-concave function above ``f`` on the grid."""
    return c_transform(c_transform(f, cost, method).transformed, cost, method).transformed


# --------------------------------------------------------------------------
# law suite

LAW_TOL = {
    "cc_above": 1e-9,
    "involution": 1e-9,
    "scaling": 1e-10,
    "concavity": 1e-9,
    "order_reversal": 1e-9,
    "young_inequality": 1e-9,
    "attainment": 1e-9,
    "modulus": 1e-9,
    "fast_vs_brute": 1e-9,
}


@dataclass
class LawReport:
    """Worst violation of each transform law over a corpus of random potentials.

    A violation is how far the checked inequality or identity fails; zero or
    negative means the law holds exactly at every node.
    """

    violations: dict
    count: int
    grid: object
    seconds: float = 0.0

    def passes(self, law):
        return self.violations[law] <= LAW_TOL[law]

    @property
    def ok(self):
        return all(self.passes(k) for k in self.violations)

    def lines(self):
        shape = "x".join(str(n) for n in self.grid.resolution)
        return [f"{'PASS' if self.passes(k) else 'FAIL'} {k} grid={shape} n={self.count} "
                f"max_violation={v:.3e} tol={LAW_TOL[k]:.0e}" for k, v in self.violations.items()]


def random_potential(grid, rng):
    """Rough random potential: white noise plus a random quadratic trend."""
    scale = 10.0 ** rng.uniform(-2, 0)
    noise = scale * rng.standard_normal(grid.shape)
    pts = grid.points.reshape(grid.shape + (grid.dim,))
    c = rng.uniform(0, 1, grid.dim) * (np.array(grid.upper) - np.array(grid.lower)) + grid.lower
    q = rng.uniform(-1, 1)
    return Potential(grid, noise + 0.5 * q * np.sum((pts - c) ** 2, axis=-1))


def transform_law_suite(grid, cost=None, count=100, seed=0, y_samples=64):
    """Check the c-transform laws on ``count`` random potentials.

    Checked per potential: ``f^cc >= f``; ``(f^cc)^c = f^c``; the scaling law
    ``min_y a c - f = a (f/a)^c``; concavity of ``f -> f^c`` at
    ``t in {0.25, 0.5, 0.75}``; order reversal; ``f^c(x) + f(y) <= c(x, y)``
    on ``y_samples`` random nodes; attainment at the recorded argmin; for the
    quadratic cost, the Lipschitz bound by the grid diameter and agreement of
    the fast and brute-force paths.
    """
    import time

    cost = CostModel.quadratic() if cost is None else cost
    rng = np.random.default_rng(seed)
    worst = {k: -np.inf for k in LAW_TOL}
    if not cost.is_quadratic:
        del worst["modulus"], worst["fast_vs_brute"]
    pts = grid.points
    diam = float(np.linalg.norm(np.array(grid.upper) - np.array(grid.lower)))
    t0 = time.perf_counter()

    def bump(key, v):
        worst[key] = max(worst[key], float(v))

    for _ in range(count):
        f = random_potential(grid, rng)
        g = random_potential(grid, rng)
        tf = c_transform(f, cost)
        fc = tf.transformed.value
        fcc = c_transform(tf.transformed, cost).transformed
        bump("cc_above", np.max(f.value - fcc.value))
        bump("involution", np.max(np.abs(c_transform(fcc, cost).transformed.value - fc)))

        a = rng.uniform(0.25, 4.0)
        direct = ctransform_brute(f, cost, scale=a).transformed.value
        bump("scaling", np.max(np.abs(direct - a * c_transform(f / a, cost).transformed.value)))

        gc = c_transform(g, cost).transformed.value
        for t in (0.25, 0.5, 0.75):
            mix = c_transform((1 - t) * f + t * g, cost).transformed.value
            bump("concavity", np.max((1 - t) * fc + t * gc - mix))

        lower = f - np.abs(g.value)
        bump("order_reversal", np.max(fc - c_transform(lower, cost).transformed.value))

        ys = rng.choice(grid.size, size=min(y_samples, grid.size), replace=False)
        cxy = cost.matrix(pts, pts[ys])
        bump("young_inequality", np.max(fc.reshape(-1, 1) + f.flat[ys][None, :] - cxy))

        arg = tf.argmin.ravel()
        at = cost(pts, pts[arg]) - f.flat[arg]
        bump("attainment", np.max(np.abs(at - fc.ravel())))

        if cost.is_quadratic:
            for k, h in enumerate(grid.spacing):
                bump("modulus", np.max(np.abs(np.diff(fc, axis=k))) / h - diam)
            brute = ctransform_brute(f, cost).transformed.value
            bump("fast_vs_brute", np.max(np.abs(ctransform_fast_quadratic(f).transformed.value - brute)))
    return LawReport(worst, count, grid, time.perf_counter() - t0)
