"""
Post-hoc checks of a solved signed-barycenter problem.

Everything here is read-only with respect to the solver state: primal value
through the oracles, duality gaps, congruence of the potentials, the
quadratic-cost saddle criterion and its general-cost sampled counterpart,
plus derivative and convexity checks used by the test-suite.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Potential
from .ctransform import c_transform
from .errors import (
    DimensionMismatch,
    EngineUnavailable,
    NotQuadraticCost,
    OnePositiveWeightRequired,
    TooManyAtoms,
)
from .oracle import atoms_of, kantorovich_dual_2d, ot_1d_atoms, ot_1d_exact, ot_small_exact

ORACLE_1D = "oracle1d"
SMALL_EXACT = "smallexact"
DUAL_2D = "dual2d"
ENGINES = (ORACLE_1D, SMALL_EXACT, DUAL_2D)


def default_tolerance(grid, abs_tol=1e-3):
    """``max(abs_tol, 4 h L)`` with ``L`` the longest box side (cost units)."""
    side = max(u - lo for lo, u in zip(grid.lower, grid.upper))
    return max(abs_tol, 4.0 * grid.h * side)


def default_engine(grid):
    return ORACLE_1D if grid.dim == 1 else DUAL_2D


# --------------------------------------------------------------------------
# primal value


def transport_cost(mu, nu, cost, engine=None, dual_tol=2e-3):
    """``K_c(mu, nu)`` through one of the oracle engines."""
    engine = engine or default_engine(mu.grid)
    if engine == ORACLE_1D:
        if mu.grid.dim != 1:
            raise EngineUnavailable("oracle1d needs a 1D grid")
        return ot_1d_exact(mu, nu, cost)[0]
    if engine == SMALL_EXACT:
        try:
            return ot_small_exact(mu, nu, cost)[0]
        except TooManyAtoms as err:
            raise EngineUnavailable(str(err)) from err
    if engine == DUAL_2D:
        if mu.grid.dim != 2:
            raise EngineUnavailable("dual2d needs a 2D grid")
        return kantorovich_dual_2d(mu, nu, cost, tol=dual_tol, raise_on_max=False).value
    raise EngineUnavailable(f"unknown engine {engine!r}; choose from {', '.join(ENGINES)}")


def eval_primal(nu, problem, engine=None, dual_tol=2e-3):
    """``B(nu) = sum_i a_i K_c(mu_i, nu)``; may be negative."""
    return float(sum(a * transport_cost(mu, nu, problem.cost, engine, dual_tol)
                     for a, mu in zip(problem.a, problem.marginals)))


def term_duals(potentials, nu, problem):
    """``<f_i^c, mu_i> + <f_i, nu>`` for every marginal."""
    return np.array([mu.integrate(c_transform(f, problem.cost).transformed) + nu.integrate(f)
                     for f, mu in zip(potentials, problem.marginals)])


def duality_gap(result, problem, engine=None):
    """``|B(nu_bar) - D(f_bar)|`` for a :class:`SolveResult`."""
    from .solver import eval_dual

    b = eval_primal(result.barycenter, problem, engine)
    d = eval_dual(result.free_potentials(problem), problem)
    return abs(b - d)


# --------------------------------------------------------------------------
# congruence


def congruence_check(potentials, weights, nu, normalize=False):
    """``nu``-weighted L1 norm of ``sum_i a_i f_i``.

    With ``normalize=True`` the infimum of the sum over the support of ``nu``
    is subtracted first, which removes the additive constant left free when
    potentials are pinned at different base points.
    """
    a = np.asarray(weights.a if hasattr(weights, "a") else weights, dtype=float)
    if len(a) != len(potentials):
        raise ValueError("need one potential per weight")
    s = sum(ai * f.flat for ai, f in zip(a, potentials))
    w = nu.flat
    if normalize:
        s = s - s[w > 0].min()
    return float(np.sum(w * np.abs(s)))


# --------------------------------------------------------------------------
# saddle criteria


@dataclass
class SaddleReport:
    """Sufficiency checks for upgrading a stationary point to a saddle."""

    quadratic_applicable: bool
    min_second_difference: float = np.nan
    hessian_lower_slack: float = np.nan
    hessian_upper_slack: float = np.nan
    h_sampled_violations: int = 0
    h_samples: int = 0
    h_lower_bound: float = np.nan
    tolerance: float = np.nan
    global_min_second_difference: float = np.nan
    region_nodes: int = 0

    @property
    def quadratic_passes(self):
        return self.quadratic_applicable and self.min_second_difference >= -self.tolerance

    @property
    def verified(self):
        return self.quadratic_passes


def resolved_region(nu, mass_tol=1e-4):
    """Nodes of ``nu`` resolved at mass tolerance ``mass_tol`` (boolean, grid shape).

    Drops the lightest nodes while their cumulative mass stays within
    ``mass_tol``. Potentials are determined only where the barycenter carries
    mass, and the stationarity test (an L1 mass residual) cannot see
    regions lighter than its own tolerance.
    """
    m = nu.flat
    order = np.argsort(m, kind="stable")
    light = np.cumsum(m[order]) <= mass_tol
    keep = np.ones(m.size, dtype=bool)
    keep[order[light]] = False
    return keep.reshape(nu.grid.shape)


def _directions(dim):
    if dim == 1:
        return [(1,)]
    return [(1, 0), (0, 1), (1, 1), (1, -1)]


def _second_differences(values, grid, directions=None, step=1, region=None):
    """Centred second differences over interior nodes, divided by the step length squared.

    Returns one array per direction, NaN where the stencil leaves the grid
    or, when ``region`` is given, leaves the region.
    """
    v = np.asarray(values, dtype=float).reshape(grid.shape)
    inside = None if region is None else np.asarray(region, dtype=bool).reshape(grid.shape)
    h = np.array(grid.spacing)
    out = []
    for d in directions or _directions(grid.dim):
        d = np.array(d) * step
        dd = np.full(grid.shape, np.nan)
        core = tuple(slice(abs(k), n - abs(k)) for k, n in zip(d, grid.shape))
        plus = tuple(slice(abs(k) + k, n - abs(k) + k) for k, n in zip(d, grid.shape))
        minus = tuple(slice(abs(k) - k, n - abs(k) - k) for k, n in zip(d, grid.shape))
        dd[core] = (v[plus] - 2.0 * v[core] + v[minus]) / float(np.sum((d * h) ** 2))
        if inside is not None:
            ok = np.zeros(grid.shape, dtype=bool)
            ok[core] = inside[core] & inside[plus] & inside[minus]
            dd[~ok] = np.nan
        out.append(dd)
    return out


def _nanmin(arrays):
    vals = [np.nanmin(a) for a in arrays if np.any(np.isfinite(a))]
    return float(min(vals)) if vals else np.nan


def _hessian_bounds(values, grid, region=None):
    """Smallest and largest eigenvalue of the finite-difference Hessian at interior nodes."""
    if grid.dim == 1:
        (dxx,) = _second_differences(values, grid, region=region)
        return dxx, dxx
    dxx, dyy, dpp, dpm = _second_differences(values, grid, region=region)
    hx, hy = grid.spacing
    # the diagonal differences give u^T H u for u = (hx, +-hy)/|.|; solve for the mixed term
    n2 = hx * hx + hy * hy
    dxy = n2 * (dpp - dpm) / (4.0 * hx * hy)
    mean = 0.5 * (dxx + dyy)
    rad = np.sqrt(0.25 * (dxx - dyy) ** 2 + dxy ** 2)
    return mean - rad, mean + rad


def quadratic_saddle_criterion(potentials, weights, grid, base=0, tol=None, cost=None, region=None):
    """Quadratic-cost sufficiency test.

    ``potentials`` are the converged ``f_i`` for the positive-weight indices
    other than ``base`` (in index order). The test function

        F(y) = |y|^2/2 - sum_i a_i (|y|^2/2 - f_i(y))

    must be convex; equivalently the Hessians satisfy
    ``sum a_i >= sum a_i D^2 f_i >= sum_{I-} |a_i| - a_base``, with both sums
    over the same index set. Second differences run along the axes and, in
    2D, both diagonals. ``tol`` defaults to ``1e-6 / h^2``.

    ``region`` (boolean mask) restricts the test to stencils lying inside
    it, typically :func:`resolved_region` of the barycenter; the minimum over
    the whole grid is still reported as ``global_min_second_difference``.
    Passing a non-quadratic ``cost`` raises :class:`NotQuadraticCost`.
    """
    if cost is not None and not cost.is_quadratic:
        raise NotQuadraticCost("the closed-form saddle criterion holds for the quadratic cost only")
    a = np.asarray(weights.a if hasattr(weights, "a") else weights, dtype=float)
    idx = [i for i in np.flatnonzero(a > 0) if i != base]
    if len(idx) != len(potentials):
        raise ValueError(f"expected {len(idx)} potentials for I+ without the base index")
    tol = 1e-6 / grid.h ** 2 if tol is None else tol
    pts = grid.points
    half_sq = 0.5 * np.sum(pts * pts, axis=1)
    crit = half_sq.copy()
    hess = np.zeros(grid.size)
    for i, f in zip(idx, potentials):
        crit -= a[i] * (half_sq - f.flat)
        hess = hess + a[i] * f.flat
    dmin = _nanmin(_second_differences(crit, grid, region=region))
    dglobal = _nanmin(_second_differences(crit, grid))
    lo, hi = _hessian_bounds(hess, grid, region)
    upper = float(a[idx].sum()) if idx else 0.0
    lower = float(np.abs(a[a < 0]).sum() - a[base])
    nodes = grid.size if region is None else int(np.sum(region))
    return SaddleReport(True, dmin, float(np.nanmin(lo) - lower), float(upper - np.nanmax(hi)),
                        tolerance=tol, global_min_second_difference=dglobal, region_nodes=nodes)


def _h_function(problem, potentials, xb, xminus):
    """``h(y) = a_b c(x_b, y) - sum_{I-} |a_i| c(x_i, y) + sum_{I+ \\ b} a_i f_i(y)`` on all nodes."""
    grid = problem.grid
    pts = grid.points
    a = problem.a
    b = problem.base
    h = a[b] * problem.cost(xb, pts)
    for i, x in zip(problem.weights.i_minus, xminus):
        h = h - abs(a[i]) * problem.cost(x, pts)
    for i, f in zip(problem.free_plus, potentials):
        h = h + a[i] * f.flat
    return h


def _midpoint_violations(h, grid, tol, region=None):
    """Count node pairs with a node midpoint where ``h(mid) > (h(y)+h(y'))/2 + tol``."""
    v = h.reshape(grid.shape)
    inside = np.ones(grid.shape, dtype=bool) if region is None else np.asarray(region).reshape(grid.shape)
    count = 0
    ranges = [range((n - 1) // 2 + 1) for n in grid.shape]
    offsets = np.stack(np.meshgrid(*ranges, indexing="ij"), -1).reshape(-1, grid.dim)
    if grid.dim == 2:
        # (dx, dy) and (dx, -dy) cover every pair up to orientation
        offsets = np.concatenate([offsets, offsets[(offsets[:, 0] > 0) & (offsets[:, 1] > 0)] * [1, -1]])
    for d in offsets:
        if not np.any(d):
            continue
        core = tuple(slice(abs(k), n - abs(k)) for k, n in zip(d, grid.shape))
        plus = tuple(slice(abs(k) + k, n - abs(k) + k) for k, n in zip(d, grid.shape))
        minus = tuple(slice(abs(k) - k, n - abs(k) - k) for k, n in zip(d, grid.shape))
        ok = inside[core] & inside[plus] & inside[minus]
        count += int(np.sum((v[plus] + v[minus] - 2.0 * v[core] < -2.0 * tol) & ok))
    return count


def h_convexity_sample(potentials, problem, n_samples=16, seed=0, region=None):
    """Sampled midpoint-convexity check of the h-function.

    Draws ``n_samples`` tuples of nodes ``(x_b, x_i for i in I-)`` and, for
    each, counts node pairs whose midpoint is a node and violates midpoint
    convexity of ``y -> h(y; x)``. Report-only: the condition quantifies over
    all tuples, so a zero count is evidence, not proof.

    Returns ``(violations, lower_bound)`` where ``lower_bound`` is the
    smallest value of ``h`` seen (boundedness from below). ``region``
    restricts the pairs (both ends and midpoint) as in
    :func:`quadratic_saddle_criterion`.
    """
    rng = np.random.default_rng(seed)
    grid = problem.grid
    pts = grid.points
    k = len(problem.weights.i_minus)
    violations = 0
    lower = np.inf
    for _ in range(n_samples):
        nodes = rng.integers(0, grid.size, size=k + 1)
        h = _h_function(problem, potentials, pts[nodes[0]], pts[nodes[1:]])
        tol = 1e-9 * max(1.0, float(np.abs(h).max()))
        violations += _midpoint_violations(h, grid, tol, region)
        lower = min(lower, float(h.min()))
    return violations, lower


def lambda_convexity_estimate(f, region=None):
    """Largest ``lambda`` such that ``f - lambda |y|^2/2`` has nonnegative second differences.

    Minimum over interior nodes and directions (axes, plus diagonals in 2D) of
    the centred second difference divided by the squared step length.
    """
    values = f.value if isinstance(f, Potential) else f
    grid = f.grid
    if grid.dim > 2:
        raise DimensionMismatch("lambda-convexity is estimated for dim <= 2")
    return _nanmin(_second_differences(values, grid, region=region))


# --------------------------------------------------------------------------
# linearisation and plan checks


def eval_linearized(potentials, anchor, nu_bar, problem):
    """Linearised dual ``D_bar(f; f_bar)``.

    The base term ``a_b <f_b^c, mu_b>`` is frozen at the anchor and corrected by
    ``a_b * int (f_bar_b - f_b) d nu_bar``; both potential lists hold the free
    potentials in the order of ``problem.free_indices``.
    """
    from .solver import redundant_potential

    a = problem.a
    b = problem.base
    total = 0.0
    for i, f in zip(problem.free_indices, potentials):
        total += a[i] * problem.marginals[i].integrate(c_transform(f, problem.cost).transformed)
    fb = redundant_potential(potentials, problem.weights, b)
    fb_bar = redundant_potential(anchor, problem.weights, b)
    total += a[b] * problem.marginals[b].integrate(c_transform(fb_bar, problem.cost).transformed)
    total += a[b] * nu_bar.integrate(fb_bar.value - fb.value)
    return float(total)


def _at_nodes(f, pts):
    grid = f.grid
    return f.flat[grid.flat_index(grid.nearest_index(pts))]


def support_optimality(potentials, nu, problem):
    """Plan-weighted mean of ``|c(x, y) - f^c(x) - f(y)|`` for each marginal.

    Uses the monotone plan in 1D and the exact small solver otherwise; the
    value vanishes when ``(f^c, f)`` is optimal for ``(mu_i, nu)``.
    """
    out = []
    for f, mu in zip(potentials, problem.marginals):
        if mu.grid.dim == 1:
            _, plan = ot_1d_exact(mu, nu, problem.cost)
        else:
            _, plan = ot_small_exact(mu, nu, problem.cost)
        fc = c_transform(f, problem.cost).transformed
        flow = plan.flow.tocoo()
        xs = plan.source_points[flow.row]
        ys = plan.target_points[flow.col]
        gap = problem.cost(xs, ys) - _at_nodes(fc, xs) - _at_nodes(f, ys)
        out.append(float(np.sum(flow.data * np.abs(gap)) / flow.data.sum()))
    return np.array(out)


# --------------------------------------------------------------------------
# derivative and convexity along curves


def transform_first_variation(f, phi, mu, cost, eps=(1e-3, 1e-4)):
    """Finite-difference check of ``d/de <(f + e phi)^c, mu> = -<phi, T # mu>``.

    The predicted derivative uses the argmin map with nearest-node splatting,
    which is the exact discrete derivative wherever the argmin is locally
    constant. Returns ``(errors, ratio)``: the FD error at each ``eps`` and
    the ratio of the first two (about ``eps[0] / eps[1]`` for an O(eps) error).
    """
    from .transport import ARGMIN, NEAREST, extract_map, pushforward

    tr = c_transform(f, cost)
    rho = pushforward(mu, extract_map(tr, cost, ARGMIN), NEAREST)
    predicted = -rho.integrate(phi)
    base = mu.integrate(tr.transformed)
    errors = np.array([abs((mu.integrate(c_transform(f + e * phi, cost).transformed) - base) / e - predicted)
                       for e in eps])
    ratio = errors[0] / errors[1] if errors[1] > 0 else np.inf
    return errors, float(ratio)


def primal_directional_derivative(nu, w_field, problem, dt):
    """First variation of ``B`` along the flow of a vector field.

    ``formula_value`` is ``int w(y) sum_i a_i d_y c(X_i(y), y) d nu`` with the
    optimal couplings taken from the monotone plans; ``fd_value`` is
    ``(B(nu_dt) - B(nu)) / dt`` with every atom of ``nu`` moved by ``dt * w``.
    Moving atoms rather than re-gridding keeps the comparison free of
    splatting error. 1D only.
    """
    grid = problem.grid
    if grid.dim != 1:
        raise DimensionMismatch("primal_directional_derivative is 1D")
    ys, m = atoms_of(nu)
    w = np.asarray(w_field(ys) if callable(w_field) else np.asarray(w_field).ravel()[nu.support()],
                   dtype=float).reshape(-1, 1)
    formula = 0.0
    base_value = 0.0
    for a, mu in zip(problem.a, problem.marginals):
        value, plan = ot_1d_atoms(mu, (ys, m), problem.cost)
        flow = plan.flow.tocoo()
        grad = problem.cost.grad_y(plan.source_points[flow.row], ys[flow.col])
        formula += a * float(np.sum(flow.data * np.sum(grad * w[flow.col], axis=1)))
        base_value += a * value
    moved = (ys + dt * w, m)
    moved_value = sum(a * ot_1d_atoms(mu, moved, problem.cost)[0]
                      for a, mu in zip(problem.a, problem.marginals))
    return float(formula), float((moved_value - base_value) / dt)


@dataclass
class CurveReport:
    t: np.ndarray
    values: np.ndarray
    chords: np.ndarray
    tolerance: float
    endpoints: tuple = field(default=(np.nan, np.nan))

    @property
    def slack(self):
        return self.chords + self.tolerance - self.values

    @property
    def passes(self):
        return bool(np.all(self.slack >= 0))


def _primal_atoms(problem, atoms):
    return float(sum(a * ot_1d_atoms(mu, atoms, problem.cost)[0]
                     for a, mu in zip(problem.a, problem.marginals)))


def interpolation_curve(problem, nu0, nu1, t):
    """Atoms of ``nu_t`` along the glued curve from ``nu0`` to ``nu1``.

    Both monotone plans from the positive-weight marginal are glued along it
    (comonotone in 1D), and each triple ``(x, y0, y1)`` moves to ``theta``
    solving ``grad_x c(x, theta) = (1-t) grad_x c(x, y0) + t grad_x c(x, y1)``;
    for the quadratic cost that is ``(1-t) y0 + t y1``.
    """
    from .core import _twist_inverse
    from .transport import merge_breakpoints, quantile_of

    base = problem.marginals[problem.weights.i_plus[0]]
    qs = [quantile_of(base), quantile_of(nu0), quantile_of(nu1)]
    s = merge_breakpoints(*qs)
    mid = 0.5 * (s[:-1] + s[1:])
    x, y0, y1 = (q(mid)[:, None] for q in qs)
    cost = problem.cost
    if cost.is_quadratic:
        theta = (1.0 - t) * y0 + t * y1
    else:
        v = (1.0 - t) * cost.grad_x(x, y0) + t * cost.grad_x(x, y1)
        theta = _twist_inverse(cost, x, v)
    return theta, np.diff(s)


def curve_convexity_check(problem, nu0, nu1, t_samples=(0.25, 0.5, 0.75), tol=None):
    """Check ``B(nu_t) <= (1-t) B(nu0) + t B(nu1) + tol`` along the glued curve.

    Requires exactly one positive weight and a 1D grid; every ``B`` is
    evaluated exactly on atoms.
    """
    if len(problem.weights.i_plus) != 1:
        raise OnePositiveWeightRequired("curve convexity needs exactly one positive weight")
    if problem.grid.dim != 1:
        raise DimensionMismatch("curve_convexity_check is 1D")
    tol = default_tolerance(problem.grid) if tol is None else tol
    t = np.asarray(t_samples, dtype=float)
    b0 = _primal_atoms(problem, atoms_of(nu0))
    b1 = _primal_atoms(problem, atoms_of(nu1))
    values = np.array([_primal_atoms(problem, interpolation_curve(problem, nu0, nu1, tk)) for tk in t])
    return CurveReport(t, values, (1.0 - t) * b0 + t * b1, tol, (b0, b1))


# --------------------------------------------------------------------------
# full record


@dataclass
class DiagnosticsRecord:
    primal_value: float
    dual_value: float
    duality_gap: float
    per_term_gap: np.ndarray
    congruence_residual: float
    saddle_report: SaddleReport
    lambda_hat: float
    congruence_normalized: float = np.nan
    stationarity_residual: np.ndarray = None
    uniqueness_residual: float = np.nan
    support_gap: np.ndarray = None
    tolerance: float = np.nan
    engine: str = ""
    singular_collapse: bool = False

    @property
    def gaps_pass(self):
        return bool(self.duality_gap <= self.tolerance and np.all(np.abs(self.per_term_gap) <= self.tolerance))

    @property
    def hard_gates_pass(self):
        return self.gaps_pass and self.congruence_residual <= 1e-12

    def to_report(self):
        """Flat ``{key: scalar}`` mapping for the text report."""
        flat = {}
        for key, value in asdict(self).items():
            if key == "saddle_report":
                for k, v in value.items():
                    flat[f"saddle.{k}"] = v
                flat["saddle.quadratic_passes"] = self.saddle_report.quadratic_passes
            elif isinstance(value, np.ndarray):
                for j, v in enumerate(value):
                    flat[f"{key}.{j}"] = float(v)
            elif value is not None:
                flat[key] = value
        flat["gaps_pass"] = self.gaps_pass
        flat["hard_gates_pass"] = self.hard_gates_pass
        flat["congruence_normalization"] = "raw; normalized subtracts the infimum over supp(nu)"
        return flat


def diagnose(result, problem, engine=None, n_samples=16, seed=0, tol=None, mass_tol=1e-4):
    """Run every applicable check on a :class:`SolveResult`.

    Curvature-based checks (saddle criterion, h-sampling, lambda estimate)
    run on :func:`resolved_region` of the barycenter at ``mass_tol``.
    """
    from .solver import eval_dual, stationarity_residual

    grid = problem.grid
    engine = engine or default_engine(grid)
    tol = default_tolerance(grid) if tol is None else tol
    nu = result.barycenter
    pots = result.potentials
    free = result.free_potentials(problem)
    ks = np.array([transport_cost(mu, nu, problem.cost, engine) for mu in problem.marginals])
    primal = float(problem.a @ ks)
    dual = eval_dual(free, problem)
    per_term = ks - term_duals(pots, nu, problem)
    plus = [pots[i] for i in problem.free_plus]
    region = resolved_region(nu, mass_tol)
    if problem.cost.is_quadratic:
        report = quadratic_saddle_criterion(plus, problem.weights, grid, problem.base,
                                            cost=problem.cost, region=region)
    else:
        report = SaddleReport(False, region_nodes=int(region.sum()))
    if grid.size <= 4096 or grid.dim == 1:
        report.h_sampled_violations, report.h_lower_bound = h_convexity_sample(
            plus, problem, n_samples, seed, region)
        report.h_samples = n_samples
    res = stationarity_residual(free, problem)
    second = problem.free_plus
    uniq = float(res[problem.free_indices.index(second[0])]) if second else np.nan
    support = None
    if grid.dim == 1 or all(len(mu.support()) <= 64 for mu in problem.marginals):
        try:
            support = support_optimality(pots, nu, problem)
        except TooManyAtoms:
            support = None
    return DiagnosticsRecord(
        primal_value=primal,
        dual_value=dual,
        duality_gap=abs(primal - dual),
        per_term_gap=per_term,
        congruence_residual=congruence_check(pots, problem.weights, nu),
        saddle_report=report,
        lambda_hat=lambda_convexity_estimate(pots[problem.base], region),
        congruence_normalized=congruence_check(pots, problem.weights, nu, normalize=True),
        stationarity_residual=res,
        uniqueness_residual=uniq,
        support_gap=support,
        tolerance=tol,
        engine=engine,
        singular_collapse=bool(result.flags.get("singular_collapse", False)),
    )
