"""
Min-max dual solver for the signed barycenter problem.

The free potentials are ``f_i`` for every ``i`` except the base marginal
``b`` (the absolutely continuous positive-weight marginal); the base
potential is always derived, ``f_b = -sum_{i != b} (a_i / a_b) f_i``, so
``sum_i a_i f_i`` vanishes identically. The dual functional is

    D(f) = sum_i a_i <f_i^c, mu_i>

and its first variation with respect to a free ``f_i`` is
``a_i (rho_b - rho_i)`` with ``rho_i = T_{f_i^c} # mu_i``: the ``a_i <f_i^c, mu_i>``
term contributes ``-a_i rho_i`` and the base term contributes
``a_b * (-rho_b) * (-a_i / a_b)``. Ascent on positive-weight potentials
(``f_i += s a_i g``) and descent on negative-weight ones (``f_i -= s a_i g``)
are therefore the same update

    f_i <- f_i + sigma |a_i| P (rho_b - rho_i),

with ``P`` the inverse of the shifted Neumann Laplacian.
"""

import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import fft

from .core import GridMeasure, Potential
from .ctransform import c_transform
from .errors import Diverged, OnePositiveWeight
from .transport import GRADIENT, MULTILINEAR, extract_map, pushforward

logger = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITERS = "max_iters"
DIVERGED = "diverged"


@dataclass(frozen=True)
class SolverConfig:
    """Iteration parameters.

    ``step_size`` multiplies the preconditioned residual after division by
    :func:`residual_scale`, so 1 is a gain of at most one; ``precond_shift`` regularises the Neumann
    Laplacian's constant mode; ``tol_residual`` is the stopping threshold on the
    largest L1 mass mismatch between pushforwards.
    """

    step_size: float = 1.0
    precond_shift: float = 1e-3
    tol_residual: float = 1e-4
    max_iters: int = 2000
    concavify_every: int = 1
    seed: int = 0
    oscillation_window: int = 5
    map_mode: str = GRADIENT
    splat: str = MULTILINEAR

    def __post_init__(self):
        for name in ("step_size", "precond_shift", "tol_residual"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iters < 1 or self.concavify_every < 1:
            raise ValueError("max_iters and concavify_every must be positive")


@dataclass(frozen=True, eq=False)
class DualState:
    """Free potentials (ordered as ``problem.free_indices``) plus bookkeeping.

    ``last_residuals`` and ``dual_value`` describe the potentials of the state
    that produced this one (they are filled by :func:`solver_step`).
    """

    potentials: tuple
    iterate: int = 0
    last_residuals: np.ndarray = None
    dual_value: float = np.nan
    step_size: float = None

    @classmethod
    def zeros(cls, problem):
        return cls(tuple(Potential.zeros(problem.grid) for _ in problem.free_indices))


@dataclass(eq=False)
class SolveResult:
    """Outcome of :func:`solve`. ``potentials`` has one entry per marginal (sorted order)."""

    potentials: list
    barycenter: GridMeasure
    status: str
    history: np.ndarray
    state: DualState
    diagnostics: object = None
    flags: dict = field(default_factory=dict)

    @property
    def converged(self):
        return self.status == CONVERGED

    def free_potentials(self, problem):
        return [self.potentials[i] for i in problem.free_indices]


# --------------------------------------------------------------------------
# building blocks


def redundant_potential(potentials, weights, base=0):
    """Base potential ``f_b = -sum_{i != b} (a_i / a_b) f_i``.

    ``potentials`` lists the free potentials in index order, skipping ``base``.
    """
    a = np.asarray(weights.a if hasattr(weights, "a") else weights, dtype=float)
    free = [i for i in range(len(a)) if i != base]
    if len(potentials) != len(free):
        raise ValueError(f"expected {len(free)} potentials, got {len(potentials)}")
    grid = potentials[0].grid
    acc = np.zeros(grid.shape)
    for i, f in zip(free, potentials):
        acc -= (a[i] / a[base]) * f.value
    return Potential(grid, acc)


def full_potentials(potentials, problem):
    """All ``m`` potentials in sorted order, with the base one derived."""
    out = [None] * problem.m
    for i, f in zip(problem.free_indices, potentials):
        out[i] = f
    out[problem.base] = redundant_potential(potentials, problem.weights, problem.base)
    return out


def eval_dual(potentials, problem, transforms=None):
    """``D(f) = sum_i a_i <f_i^c, mu_i>`` with the base potential derived."""
    if transforms is None:
        transforms = [c_transform(f, problem.cost) for f in full_potentials(potentials, problem)]
    return float(sum(a * mu.integrate(tr.transformed)
                     for a, mu, tr in zip(problem.a, problem.marginals, transforms)))


@lru_cache(maxsize=16)
def _shifted_symbol(grid, eps_p):
    lam = np.full(grid.shape, float(eps_p))
    for k, (n, h) in enumerate(zip(grid.resolution, grid.spacing)):
        lk = 2.0 * (1.0 - np.cos(np.pi * np.arange(n) / (n - 1))) / (h * h)
        shape = [1] * grid.dim
        shape[k] = n
        lam = lam + lk.reshape(shape)
    lam.setflags(write=False)
    return lam


def h1_precondition(r, eps_p, grid):
    """Solve ``(-Lap_h + eps_p) u = r`` with homogeneous Neumann conditions.

    ``Lap_h`` is the second-order node-centred Laplacian with mirrored ghost
    nodes; its eigenvectors are the DCT-I basis with eigenvalues
    ``2(1 - cos(pi j / (n-1))) / h^2`` per axis, so the solve is exact.
    """
    r = np.asarray(r, dtype=float).reshape(grid.shape)
    rhat = fft.dctn(r, type=1)
    return fft.idctn(rhat / _shifted_symbol(grid, float(eps_p)), type=1)


def pushforwards(potentials, problem, mode=GRADIENT, splat=MULTILINEAR, transforms=None,
                 max_clamp_fraction=0.01):
    """``rho_i = T_{f_i^c} # mu_i`` for all ``m`` marginals (base derived)."""
    full = full_potentials(potentials, problem)
    if transforms is None:
        transforms = [c_transform(f, problem.cost) for f in full]
    rhos = [pushforward(mu, extract_map(tr, problem.cost, mode), splat, max_clamp_fraction)
            for mu, tr in zip(problem.marginals, transforms)]
    return rhos, transforms


def stationarity_residual(state, problem, mode=GRADIENT, splat=MULTILINEAR):
    """L1 mismatch ``|rho_b - rho_i|`` for each free index, in ``[0, 2]``."""
    pots = state.potentials if isinstance(state, DualState) else state
    rhos, _ = pushforwards(pots, problem, mode, splat)
    b = problem.base
    return np.array([np.abs(rhos[b].mass - rhos[i].mass).sum() for i in problem.free_indices])


def recover_barycenter(potentials, problem, splat=MULTILINEAR, mode=GRADIENT):
    """``nu = T_{f_b^c} # mu_b`` for the derived base potential."""
    if isinstance(potentials, DualState):
        potentials = potentials.potentials
    fb = redundant_potential(potentials, problem.weights, problem.base)
    tr = c_transform(fb, problem.cost)
    return pushforward(problem.marginals[problem.base], extract_map(tr, problem.cost, mode), splat)


def residual_scale(problem):
    """Divisor applied to mass residuals before preconditioning.

    Along ``P``-preconditioned directions the dual's curvature in ``f_i`` is
    bounded by the peak marginal mass times ``a_i^2 (1 + A / a_b)``, with
    ``A = sum_{j != b} |a_j|`` (row sums of the weight coupling through the
    derived base potential). Dividing by the largest such bound makes
    ``step_size = 1`` a gain of at most one for any weights and grid.
    """
    a = np.asarray(problem.a)
    free = list(problem.free_indices)
    coupling = 1.0 + np.abs(a[free]).sum() / a[problem.base]
    peak = max(float(mu.mass.max()) for mu in problem.marginals)
    return peak * float(np.max(a[free] ** 2)) * coupling


# --------------------------------------------------------------------------
# iteration


@dataclass
class _Sweep:
    rhos: list
    residuals: np.ndarray
    dual_value: float


def _evaluate(potentials, problem, config):
    rhos, trs = pushforwards(potentials, problem, config.map_mode, config.splat)
    b = problem.base
    res = np.array([np.abs(rhos[b].mass - rhos[i].mass).sum() for i in problem.free_indices])
    return _Sweep(rhos, res, eval_dual(potentials, problem, trs))


def _update(state, sweep, problem, config, step):
    grid = problem.grid
    b = problem.base
    concavify = (state.iterate + 1) % config.concavify_every == 0
    scale = residual_scale(problem)
    new = []
    for i, f in zip(problem.free_indices, state.potentials):
        r = (sweep.rhos[b].mass - sweep.rhos[i].mass) / scale
        g = f + step * abs(problem.a[i]) * h1_precondition(r, config.precond_shift, grid)
        if concavify:
            g = c_transform(c_transform(g, problem.cost).transformed, problem.cost).transformed
        new.append(g)
    return DualState(tuple(new), state.iterate + 1, sweep.residuals, sweep.dual_value, step)


def solver_step(state, problem, config=None):
    """One sweep: pushforwards, gradient ``a_i(rho_b - rho_i)``, preconditioned update, c-concavification."""
    config = config or SolverConfig()
    sweep = _evaluate(state.potentials, problem, config)
    _check_finite(sweep)
    step = config.step_size if state.step_size is None else state.step_size
    return _update(state, sweep, problem, config, step)


def _check_finite(sweep):
    if not np.isfinite(sweep.dual_value) or abs(sweep.dual_value) > 1e12:
        raise Diverged(f"dual value {sweep.dual_value:.3g} is out of range")


def _oscillating(values):
    d = np.diff(values)
    return len(d) >= 2 and np.all(d[1:] * d[:-1] < 0)


def solve(problem, config=None, diagnostics=True, engine=None, init=None, callback=None):
    """Run the min-max iteration from zero potentials until stationarity.

    Returns a :class:`SolveResult` whose status is ``'converged'`` when the
    largest stationarity residual drops below ``config.tol_residual``,
    ``'max_iters'`` otherwise, or ``'diverged'`` when the dual value leaves
    ``[-1e12, 1e12]`` or the residual grows tenfold over 50 sweeps.

    ``callback(state)``, when given, is called with every iterate, starting
    with the initial state.

    Raises
    ------
    OnePositiveWeight
        When fewer than two weights are positive; use
        :func:`signedbary.oracle.solve_one_positive` instead.
    """
    if len(problem.weights.i_plus) < 2:
        raise OnePositiveWeight("the dual solver needs at least two positive weights")
    config = config or SolverConfig()
    state = init if init is not None else DualState.zeros(problem)
    step = config.step_size
    history = []
    duals = []
    status = MAX_ITERS
    for it in range(config.max_iters + 1):
        if callback is not None:
            callback(state)
        sweep = _evaluate(state.potentials, problem, config)
        history.append((sweep.dual_value, float(sweep.residuals.max()), step))
        duals.append(sweep.dual_value)
        try:
            _check_finite(sweep)
            if it >= 50 and history[-1][1] > 10 * history[-51][1]:
                raise Diverged("stationarity residual grew tenfold over 50 sweeps")
        except Diverged as err:
            logger.warning("solver diverged: %s", err)
            status = DIVERGED
            break
        if sweep.residuals.max() <= config.tol_residual:
            status = CONVERGED
            state = replace(state, last_residuals=sweep.residuals, dual_value=sweep.dual_value)
            break
        if it == config.max_iters:
            state = replace(state, last_residuals=sweep.residuals, dual_value=sweep.dual_value)
            break
        w = config.oscillation_window
        if len(duals) >= w and _oscillating(duals[-w:]):
            step *= 0.5
            duals = duals[-1:]
            logger.debug("step halved to %g at sweep %d", step, it)
        state = _update(state, sweep, problem, config, step)
    pots = full_potentials(state.potentials, problem)
    nu = recover_barycenter(state.potentials, problem, config.splat, config.map_mode)
    result = SolveResult(pots, nu, status, np.array(history), state)
    top = np.sort(nu.flat)[::-1]
    result.flags["singular_collapse"] = bool(top[:3].sum() >= 0.5)
    if diagnostics:
        from .diagnostics import diagnose
        result.diagnostics = diagnose(result, problem, engine=engine)
    return result
