"""
Exact ground truth at desk scale.

1D transport uses the co-monotone coupling of quantile functions (optimal for
costs convex in ``x - y``); small discrete problems are solved exactly by
successive shortest paths; 2D pairs fall back to a preconditioned dual ascent.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import sparse
from scipy.special import ndtri

from .core import CostModel, GridMeasure, Potential, validate_weights
from .errors import DimensionMismatch, MaxIters, TooManyAtoms
from .transport import (
    GRADIENT,
    MULTILINEAR,
    QuantileFn,
    affine_combination,
    extract_map,
    measure_from_quantile,
    pushforward,
    quantile_of,
)

MAX_ATOMS = 64


@dataclass(frozen=True, eq=False)
class DiscretePlan:
    """Coupling between two atomic measures; ``flow`` is a sparse matrix."""

    source_points: np.ndarray
    source_mass: np.ndarray
    target_points: np.ndarray
    target_mass: np.ndarray
    flow: sparse.coo_matrix
    cost_value: float

    def marginal_errors(self):
        f = self.flow.tocsr()
        rows = np.asarray(f.sum(axis=1)).ravel()
        cols = np.asarray(f.sum(axis=0)).ravel()
        return float(np.abs(rows - self.source_mass).max()), float(np.abs(cols - self.target_mass).max())


def atoms_of(mu: GridMeasure):
    """Support points and masses of a grid measure."""
    k = mu.support()
    return mu.grid.points[k], mu.flat[k]


def _as_atoms(obj):
    if isinstance(obj, GridMeasure):
        return atoms_of(obj)
    pts, w = obj
    pts = np.asarray(pts, dtype=float)
    return pts.reshape(len(pts), -1), np.asarray(w, dtype=float)


# --------------------------------------------------------------------------
# 1D


def _monotone(xs, a, ys, b):
    """North-west corner rule on sorted atoms. Returns (i, j, mass) triples."""
    ox = np.argsort(xs, kind="stable")
    oy = np.argsort(ys, kind="stable")
    ca = np.cumsum(a[ox])
    cb = np.cumsum(b[oy])
    ca[-1] = cb[-1] = 1.0
    t = np.unique(np.concatenate([[0.0], ca, cb]))
    mid = 0.5 * (t[:-1] + t[1:])
    i = ox[np.minimum(np.searchsorted(ca, mid), len(ca) - 1)]
    j = oy[np.minimum(np.searchsorted(cb, mid), len(cb) - 1)]
    return i, j, np.diff(t)


def ot_1d_atoms(source, target, cost: CostModel):
    """Exact 1D transport cost and plan between atomic measures."""
    xs, a = _as_atoms(source)
    ys, b = _as_atoms(target)
    i, j, w = _monotone(xs[:, 0], a, ys[:, 0], b)
    keep = w > 0
    i, j, w = i[keep], j[keep], w[keep]
    value = float(np.sum(w * cost(xs[i], ys[j])))
    flow = sparse.coo_matrix((w, (i, j)), shape=(len(a), len(b)))
    flow.sum_duplicates()
    return value, DiscretePlan(xs, a, ys, b, flow, value)


def ot_1d_exact(mu: GridMeasure, nu: GridMeasure, cost: CostModel):
    """Transport cost ``K_c(mu, nu)`` of two 1D grid measures and the monotone plan."""
    if mu.grid.dim != 1 or nu.grid.dim != 1:
        raise DimensionMismatch("ot_1d_exact needs 1D measures")
    return ot_1d_atoms(mu, nu, cost)


def wasserstein_1d(mu, nu, p=2):
    """``W_p`` distance between two 1D measures (grid measures or atom pairs)."""
    if p == 2:
        cost = CostModel.quadratic()
        return float(np.sqrt(2.0 * ot_1d_atoms(mu, nu, cost)[0]))
    return float(ot_1d_atoms(mu, nu, CostModel.ppower(p))[0] ** (1.0 / p))


def gaussian_quantile(mean, sd, n=4096):
    """Midpoint-sampled quantile function of ``N(mean, sd^2)``."""
    return QuantileFn.from_callable(lambda t: mean + sd * ndtri(t), n)


def signed_barycenter_1d(problem, monotone_tol=None):
    """1D signed barycenter by affine combination of quantile functions.

    Returns ``(Q, measure, monotone_flag)``. The quantile combination is the
    exact barycenter only when it is nondecreasing; ``monotone_tol`` bounds the
    drop below the running maximum that grid quantisation of the marginals can
    cause and defaults to ``2 * sum|a_i| * h``. With the flag down the result is
    returned but not certified.
    """
    grid = problem.grid
    if grid.dim != 1:
        raise DimensionMismatch("signed_barycenter_1d needs a 1D problem")
    if not problem.cost.is_quadratic:
        raise ValueError("the quantile formula holds for the quadratic cost")
    qs = [quantile_of(mu) for mu in problem.marginals]
    q = affine_combination(qs, problem.a)
    if monotone_tol is None:
        monotone_tol = 2.0 * float(np.abs(problem.a).sum()) * grid.h
    flag = q.is_monotone(monotone_tol)
    return q, measure_from_quantile(q, grid), flag


def gaussian_signed_barycenter(weights, means, sds):
    """Closed-form 1D barycenter of Gaussians: ``(mean, sd, monotone)``.

    The combined quantile is ``sum a_i m_i + (sum a_i s_i) Phi^{-1}``; it is
    monotone iff the combined sd is nonnegative (zero gives a Dirac).
    """
    w = validate_weights(weights)
    m = np.asarray(means, dtype=float)[list(w.perm)]
    s = np.asarray(sds, dtype=float)[list(w.perm)]
    mean = float(w.a @ m)
    sd = float(w.a @ s)
    return mean, sd, sd >= 0


def primal_from_quantiles(qs, q_bar, a, cost):
    """``sum_i a_i int_0^1 c(Q_i(t), Qbar(t)) dt`` evaluated exactly on step functions."""
    t = np.unique(np.concatenate([q.breakpoints for q in list(qs) + [q_bar]]))
    mid = 0.5 * (t[:-1] + t[1:])
    dt = np.diff(t)
    yb = q_bar(mid)
    return float(sum(ai * np.sum(dt * cost(q(mid)[:, None], yb[:, None])) for ai, q in zip(a, qs)))


# --------------------------------------------------------------------------
# small exact


def ot_small_exact(source, target, cost: CostModel, max_atoms=MAX_ATOMS):
    """Exact discrete transport by successive shortest paths.

    ``source`` and ``target`` are grid measures or ``(points, masses)`` pairs
    with at most ``max_atoms`` atoms each.
    """
    xs, a = _as_atoms(source)
    ys, b = _as_atoms(target)
    if len(a) > max_atoms or len(b) > max_atoms:
        raise TooManyAtoms(f"{len(a)}x{len(b)} atoms exceeds the {max_atoms}-atom limit")
    C = cost.matrix(xs, ys)
    F = _ssp_transport(C, a / a.sum(), b / b.sum())
    value = float(np.sum(F * C))
    flow = sparse.coo_matrix(F)
    return value, DiscretePlan(xs, a, ys, b, flow, value)


def _ssp_transport(C, a, b, eps=1e-15):
    """Successive shortest paths on the bipartite transport network.

    Residual arcs are source->target (uncapacitated, cost ``C_ij``) and
    target->source where flow is positive (cost ``-C_ij``). Node potentials
    keep reduced costs nonnegative, so each search is a dense Dijkstra started
    from every source with remaining supply.
    """
    C = np.ascontiguousarray(C, dtype=float)
    F, status = _ssp_kernel(C, np.array(a, dtype=float), np.array(b, dtype=float), eps)
    if status == 1:
        raise RuntimeError("no augmenting path; marginals have different totals")
    if status == 2:
        raise RuntimeError("successive shortest paths did not terminate")
    F[F < eps] = 0.0
    return F


@njit(cache=True)
def _ssp_kernel(C, supply, demand, eps):
    n, m = C.shape
    F = np.zeros((n, m))
    pi_s = np.zeros(n)
    pi_t = np.empty(m)
    for j in range(m):
        pi_t[j] = C[:, j].min()
    dist_s = np.empty(n)
    dist_t = np.empty(m)
    pred_s = np.empty(n, np.int64)
    pred_t = np.empty(m, np.int64)
    done_s = np.empty(n, np.bool_)
    done_t = np.empty(m, np.bool_)
    for _ in range(16 * (n + m) ** 2):
        if supply.max() <= eps or demand.max() <= eps:
            return F, 0
        for i in range(n):
            dist_s[i] = 0.0 if supply[i] > eps else np.inf
            pred_s[i] = -1
            done_s[i] = False
        for j in range(m):
            dist_t[j] = np.inf
            pred_t[j] = -1
            done_t[j] = False
        while True:
            i, j = -1, -1
            bi, bj = np.inf, np.inf
            for k in range(n):
                if not done_s[k] and dist_s[k] < bi:
                    bi, i = dist_s[k], k
            for k in range(m):
                if not done_t[k] and dist_t[k] < bj:
                    bj, j = dist_t[k], k
            if i < 0 and j < 0:
                break
            if bi <= bj:
                done_s[i] = True
                for k in range(m):
                    nd = dist_s[i] + max(C[i, k] + pi_s[i] - pi_t[k], 0.0)
                    if not done_t[k] and nd < dist_t[k]:
                        dist_t[k] = nd
                        pred_t[k] = i
            else:
                done_t[j] = True
                for k in range(n):
                    nd = dist_t[j] + max(pi_t[j] - C[k, j] - pi_s[k], 0.0)
                    if not done_s[k] and F[k, j] > eps and nd < dist_s[k]:
                        dist_s[k] = nd
                        pred_s[k] = j
        t = -1
        D = np.inf
        for k in range(m):
            if demand[k] > eps and dist_t[k] < D:
                D, t = dist_t[k], k
        if t < 0:
            return F, 1
        for k in range(n):
            pi_s[k] += min(dist_s[k], D)
        for k in range(m):
            pi_t[k] += min(dist_t[k], D)
        # walk back to the root, finding the bottleneck on backward arcs
        j = t
        delta = demand[t]
        while True:
            i = pred_t[j]
            if pred_s[i] < 0:
                break
            j = pred_s[i]
            delta = min(delta, F[i, j])
        root = i
        delta = min(delta, supply[root])
        j = t
        while True:
            i = pred_t[j]
            F[i, j] += delta
            if pred_s[i] < 0:
                break
            j = pred_s[i]
            F[i, j] -= delta
        supply[root] -= delta
        demand[t] -= delta
    return F, 2


# --------------------------------------------------------------------------
# 2D dual estimate


@dataclass(frozen=True)
class DualEstimate:
    value: float
    residual: float
    iterations: int
    potential: Potential


def kantorovich_dual_2d(mu: GridMeasure, nu: GridMeasure, cost: CostModel, tol=2e-3,
                        max_iters=3000, step=None, precond_shift=1e-3, raise_on_max=True):
    """Single-pair Kantorovich dual value by preconditioned gradient ascent.

    Maximises ``J(f) = <f^c, mu> + <f, nu>`` with the update
    ``f <- (f + step * P(nu - T#mu))^{cc}`` where ``P`` is the Neumann
    ``(-Lap + shift)^{-1}`` and the residual is measured in mass units.
    Every iterate gives a lower bound on ``K_c``; the returned estimate
    carries the L1 residual ``|nu - T#mu|`` at the reported potential.
    """
    from .ctransform import c_transform
    from .solver import h1_precondition

    if mu.grid != nu.grid:
        raise DimensionMismatch("measures live on different grids")
    grid = mu.grid
    if step is None:
        step = 1.0 / max(1.0, float(np.max(mu.mass) / grid.cell_volume))
    f = Potential.zeros(grid)
    best = None
    for it in range(max_iters):
        tr = c_transform(f, cost)
        rho = pushforward(mu, extract_map(tr, cost, GRADIENT), MULTILINEAR, max_clamp_fraction=None)
        value = mu.integrate(tr.transformed) + nu.integrate(f)
        r = nu.mass - rho.mass
        res = float(np.abs(r).sum())
        if best is None or res < best.residual:
            best = DualEstimate(value, res, it, f)
        if res <= tol:
            return best
        u = h1_precondition(r / grid.cell_volume, precond_shift, grid)
        f = c_transform(c_transform(f + step * u, cost).transformed, cost).transformed
    if raise_on_max:
        raise MaxIters(f"dual ascent reached {max_iters} iterations (residual {best.residual:.3g})")
    return best


# --------------------------------------------------------------------------
# one positive weight


@dataclass(frozen=True, eq=False)
class OnePositiveResult:
    """Barycenter of a one-positive-weight problem.

    ``certified`` is true only on the quantile route with a monotone
    combination; the mirror-descent route is a heuristic.
    """

    barycenter: GridMeasure
    primal_value: float
    method: str
    certified: bool
    iterations: int = 0
    quantile: QuantileFn = None


def nu_potential_1d(mu: GridMeasure, nu: GridMeasure, cost: CostModel):
    """Kantorovich potential on the ``nu`` side, ``g' = d_y c(X(y), y)`` integrated on the grid.

    ``X`` is the monotone map from ``nu`` to ``mu``; nodes outside the support
    of ``nu`` take the map of the nearest mass to their left (or right at the
    lower end), which keeps ``g`` finite and c-concave-compatible.
    """
    grid = nu.grid
    y = grid.axes[0]
    qmu = quantile_of(mu)
    cdf = np.cumsum(nu.flat)
    lo = np.concatenate([[0.0], cdf[:-1]])
    # evaluate at the centre of each node's cdf step; empty nodes sit on a plateau
    t = np.clip(0.5 * (lo + cdf), 1e-15, 1.0)
    x = qmu(t)[:, None]
    dg = cost.grad_y(x, y[:, None])[:, 0]
    g = np.concatenate([[0.0], np.cumsum(0.5 * (dg[1:] + dg[:-1]) * np.diff(y))])
    return g - nu.integrate(g)


def solve_one_positive(problem, max_iters=500, step=None, tol=1e-10):
    """Signed barycenter when exactly one weight is positive (1D).

    The quantile combination is used when it is monotone (quadratic cost).
    Otherwise, and for non-quadratic costs, the barycenter is sought by
    exponentiated-gradient descent on node masses with first variation
    ``sum_i a_i g_i`` (see :func:`nu_potential_1d`), started from the base
    marginal and stopped when ``B`` stalls. That route is not certified.
    """
    from .errors import OnePositiveWeightRequired

    if len(problem.weights.i_plus) != 1:
        raise OnePositiveWeightRequired("solve_one_positive needs exactly one positive weight")
    grid = problem.grid
    if grid.dim != 1:
        raise DimensionMismatch("the one-positive-weight route is implemented in 1D")
    cost = problem.cost

    def primal(nu):
        return float(sum(a * ot_1d_exact(mu, nu, cost)[0] for a, mu in zip(problem.a, problem.marginals)))

    if cost.is_quadratic:
        q, nu, flag = signed_barycenter_1d(problem)
        if flag:
            return OnePositiveResult(nu, primal_from_quantiles(
                [quantile_of(mu) for mu in problem.marginals], q, problem.a, cost), "quantile", True, 0, q)
    nu = problem.marginals[problem.weights.i_plus[0]]
    value = primal(nu)
    eta = step if step is not None else 1.0 / max(cost(np.zeros(1), np.array(grid.upper) - np.array(grid.lower)), 1e-12)
    it = 0
    for it in range(1, max_iters + 1):
        grad = sum(a * nu_potential_1d(mu, nu, cost) for a, mu in zip(problem.a, problem.marginals))
        while True:
            w = nu.flat * np.exp(-eta * (grad - grad.min()))
            cand = GridMeasure(grid, (w / w.sum()).reshape(grid.shape))
            new = primal(cand)
            if new <= value or eta < 1e-12:
                break
            eta *= 0.5
        done = value - new <= tol * max(1.0, abs(value))
        if new <= value:
            nu, value = cand, new
        if done:
            break
        eta *= 1.5
    return OnePositiveResult(nu, value, "mirror_descent", False, it)
