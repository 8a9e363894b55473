import numpy as np
import pytest
from conftest import two_gaussians
from hypothesis import given
from hypothesis import strategies as st

from signedbary import CostModel, Grid, GridMeasure, Potential, Problem, gaussian_on_grid, validate_weights
from signedbary.ctransform import c_transform
from signedbary.diagnostics import (
    congruence_check,
    curve_convexity_check,
    default_tolerance,
    diagnose,
    duality_gap,
    eval_linearized,
    eval_primal,
    h_convexity_sample,
    lambda_convexity_estimate,
    primal_directional_derivative,
    quadratic_saddle_criterion,
    resolved_region,
    support_optimality,
    transport_cost,
)
from signedbary.errors import EngineUnavailable, NotQuadraticCost, OnePositiveWeightRequired
from signedbary.oracle import ot_1d_exact, signed_barycenter_1d
from signedbary.solver import eval_dual, full_potentials, solve

QUAD = CostModel.quadratic()
LINE = Grid([0.0], [1.0], [256])
Y = LINE.points[:, 0]


def pot(values, grid=LINE):
    return Potential(grid, np.broadcast_to(values, grid.shape).copy())


def three_marginals(grid=LINE, sd=0.05):
    return Problem.build([0.6, 0.6, -0.2], [gaussian_on_grid(grid, [m], sd) for m in (0.4, 0.6, 0.5)])


# primal value ---------------------------------------------------------------


def test_primal_of_common_marginal():
    mu = gaussian_on_grid(LINE, [0.45], 0.07)
    p = Problem.build([0.7, 0.5, -0.2], [mu, mu, mu])
    assert eval_primal(mu, p) == 0.0


@pytest.mark.filterwarnings("ignore::signedbary.errors.DomainClampWarning")
def test_primal_of_extrapolation():
    p = Problem.build([2, -1], [gaussian_on_grid(LINE, [0.5], 0.05), gaussian_on_grid(LINE, [0.4], 0.05)])
    nu = gaussian_on_grid(LINE, [0.6], 0.05)
    # 2 * 0.1^2 / 2 - 0.2^2 / 2
    assert eval_primal(nu, p) == pytest.approx(-0.01, abs=1e-3)


def test_primal_at_classical_barycenter():
    p = two_gaussians(LINE)
    _, nu, _ = signed_barycenter_1d(p)
    assert eval_primal(nu, p) == pytest.approx(0.02, abs=1e-3)


def test_engines():
    mu, nu = gaussian_on_grid(LINE, [0.4], 0.05), gaussian_on_grid(LINE, [0.6], 0.05)
    with pytest.raises(EngineUnavailable):
        transport_cost(mu, nu, QUAD, "dual2d")
    with pytest.raises(EngineUnavailable):
        transport_cost(mu, nu, QUAD, "smallexact")  # 256 atoms
    with pytest.raises(EngineUnavailable):
        transport_cost(mu, nu, QUAD, "sinkhorn")


def test_default_tolerance():
    assert default_tolerance(LINE) == pytest.approx(4 / 255)
    assert default_tolerance(Grid([0.0], [1.0], [10**5])) == 1e-3


# duality gap ------------------------------------------------------------------


def test_gap_at_identical_fixed_point():
    mu = gaussian_on_grid(LINE, [0.45], 0.07)
    p = Problem.build([0.7, 0.5, -0.2], [mu, mu, mu])
    assert duality_gap(solve(p, diagnostics=False), p) == 0.0


def test_classical_gap(classical):
    p, result = classical
    gap = duality_gap(result, p)
    assert gap <= default_tolerance(p.grid)
    assert gap == pytest.approx(abs(eval_primal(result.barycenter, p) - result.history[-1, 0]), abs=1e-15)


# congruence -------------------------------------------------------------------


def test_congruence_of_solver_tuple(classical):
    p, result = classical
    assert congruence_check(result.potentials, p.weights, result.barycenter) <= 1e-12


def test_congruence_sees_an_uncompensated_shift():
    w = validate_weights([2, -1])
    nu = gaussian_on_grid(LINE, [0.5], 0.05)
    f2 = pot(0.3 * Y)
    f1 = pot(0.15 * Y)
    assert congruence_check([f1, f2], w, nu) <= 1e-15
    assert congruence_check([f1, f2 + 0.1], w, nu) == pytest.approx(0.1, abs=1e-12)


def test_congruence_of_explicit_dirac_potentials():
    g = Grid([0.0], [1.0], [11])
    y = g.points[:, 0]
    x1, x2, y0 = 0.3, 0.1, 0.5  # 2 * 0.3 - 0.1 = 0.5
    w = validate_weights([2, -1])
    nu = GridMeasure(g, np.eye(11)[5])
    # Kantorovich potentials of (delta_x, delta_y0) are linear with slope y0 - x; the constants are arbitrary
    pots = [pot((y0 - x) * y + k, g) for x, k in ((x1, 0.7), (x2, -0.3))]
    for f, x in zip(pots, (x1, x2)):
        fc = c_transform(f, QUAD).transformed
        i = round(x * 10)
        assert fc.flat[i] + f.flat[5] == pytest.approx(QUAD(np.array([x]), np.array([y0])), abs=1e-12)
    assert congruence_check(pots, w, nu) > 0.1
    assert congruence_check(pots, w, nu, normalize=True) <= 1e-9


# quadratic saddle criterion ---------------------------------------------------------


def test_saddle_zero_potentials():
    p = three_marginals()
    rep = quadratic_saddle_criterion([pot(0.0)], p.weights, LINE, p.base)
    # F(y) = (1 - 0.6) |y|^2 / 2
    assert rep.min_second_difference == pytest.approx(0.4, abs=1e-9)
    assert rep.quadratic_passes and rep.verified


def test_saddle_zero_potentials_2d():
    g = Grid([0.0, 0.0], [1.0, 1.0], [17, 17])
    p = Problem.build([0.6, 0.6, -0.2], [gaussian_on_grid(g, [m, m], 0.1) for m in (0.4, 0.6, 0.5)])
    rep = quadratic_saddle_criterion([pot(0.0, g)], p.weights, g, p.base)
    assert rep.min_second_difference == pytest.approx(0.4, abs=1e-9)
    assert rep.hessian_lower_slack == pytest.approx(0.4, abs=1e-9)
    assert rep.hessian_upper_slack == pytest.approx(0.6, abs=1e-9)


def test_saddle_quadratic_potential():
    p = three_marginals()
    rep = quadratic_saddle_criterion([pot(0.5 * Y**2)], p.weights, LINE, p.base)
    # F(y) = |y|^2/2 - 0.6 (|y|^2/2 - |y|^2/2) = |y|^2/2
    assert rep.min_second_difference == pytest.approx(1.0, abs=1e-8)
    assert rep.quadratic_passes


def test_saddle_steep_concave_bump_fails():
    p = three_marginals()
    bump = pot(0.01 * np.exp(-((Y - 0.5) ** 2) / (2 * 0.05**2)))  # f'' = -4 at the peak
    rep = quadratic_saddle_criterion([bump], p.weights, LINE, p.base)
    assert rep.hessian_lower_slack == pytest.approx(0.6 * -4.0 + 0.4, abs=0.02)
    assert rep.min_second_difference == pytest.approx(0.4 - 2.4, abs=0.02)
    assert not rep.quadratic_passes


def test_saddle_region_masks_the_tails():
    p = three_marginals()
    # strongly concave only next to the wall, where the barycenter carries no mass
    spike = pot(-5e3 * np.maximum(0.04 - Y, 0) ** 2)
    nu = gaussian_on_grid(LINE, [0.5], 0.05)
    region = resolved_region(nu)
    rep = quadratic_saddle_criterion([spike], p.weights, LINE, p.base, region=region)
    assert rep.quadratic_passes
    assert rep.global_min_second_difference < -1
    assert rep.region_nodes == region.sum() < LINE.size


def test_saddle_needs_quadratic_cost():
    p = three_marginals()
    with pytest.raises(NotQuadraticCost):
        quadratic_saddle_criterion([pot(0.0)], p.weights, LINE, p.base, cost=CostModel.ppower(3))


@given(mass_tol=st.floats(1e-8, 1e-2))
def test_resolved_region_drops_at_most_the_tolerance(mass_tol):
    nu = gaussian_on_grid(LINE, [0.4], 0.06)
    region = resolved_region(nu, mass_tol)
    assert nu.flat[~region.ravel()].sum() <= mass_tol
    assert region.ravel()[np.argmax(nu.flat)]


# h-function sampling ---------------------------------------------------------------


def test_h_sampling_zero_potentials():
    p = three_marginals(Grid([0.0], [1.0], [64]))
    violations, lower = h_convexity_sample([pot(0.0, p.grid)], p, n_samples=32, seed=3)
    assert violations == 0
    assert np.isfinite(lower)


def test_h_sampling_other_weights():
    g = Grid([0.0, 0.0], [1.0, 1.0], [12, 12])
    mus = [gaussian_on_grid(g, [m, 0.5], 0.1) for m in (0.4, 0.5, 0.6)]
    p = Problem.build([1.5, 0.5, -1.0], mus)
    # Hessian of h is (1.5 - 1.0) I
    assert h_convexity_sample([pot(0.0, g)], p, n_samples=8)[0] == 0


def test_h_sampling_p_power_reports():
    g = Grid([0.0], [1.0], [64])
    mus = [gaussian_on_grid(g, [m], 0.05) for m in (0.4, 0.6, 0.5)]
    p = Problem.build([0.6, 0.6, -0.2], mus, cost=CostModel.ppower(3))
    violations, lower = h_convexity_sample([pot(0.0, g)], p, n_samples=16, seed=1)
    assert violations >= 0 and np.isfinite(lower)


# lambda-convexity ------------------------------------------------------------------


def test_lambda_of_quadratic_and_linear():
    assert lambda_convexity_estimate(pot(0.5 * Y**2)) == pytest.approx(1.0, abs=1e-9)
    assert lambda_convexity_estimate(pot(3 * Y - 1)) == pytest.approx(0.0, abs=1e-9)
    g = Grid([0.0, 0.0], [1.0, 2.0], [9, 13])
    q = Potential(g, 0.5 * np.sum(g.points**2, axis=1).reshape(g.shape))
    assert lambda_convexity_estimate(q) == pytest.approx(1.0, abs=1e-9)


def test_lambda_of_concave_kink():
    assert lambda_convexity_estimate(pot(-np.abs(Y - 0.5))) < 0


# linearised dual ----------------------------------------------------------------------


@pytest.fixture
def linear_setup(rng):
    p = three_marginals(Grid([0.0], [1.0], [128]))
    g = p.grid
    anchor = [pot(0.02 * rng.normal(size=g.shape), g) for _ in p.free_indices]
    nu = gaussian_on_grid(g, [0.5], 0.06)
    return p, anchor, nu, rng


def test_linearisation_at_anchor(linear_setup):
    p, anchor, nu, _ = linear_setup
    assert eval_linearized(anchor, anchor, nu, p) == pytest.approx(eval_dual(anchor, p), abs=1e-12)


def test_linearisation_separates(linear_setup):
    p, anchor, nu, _ = linear_setup
    k = p.free_indices.index(p.free_plus[0])
    i = p.free_indices[k]
    delta = pot(0.01 * np.sin(5 * p.grid.points[:, 0]), p.grid)
    moved = list(anchor)
    moved[k] = anchor[k] + delta
    mu = p.marginals[i]

    def single(f):
        return mu.integrate(c_transform(f, QUAD).transformed) + nu.integrate(f)

    change = eval_linearized(moved, anchor, nu, p) - eval_linearized(anchor, anchor, nu, p)
    assert change == pytest.approx(p.a[i] * (single(moved[k]) - single(anchor[k])), abs=1e-12)


def test_linearisation_term_is_linear(linear_setup):
    p, anchor, nu, _ = linear_setup
    k = p.free_indices.index(p.weights.i_minus[0])

    def nu_term(scale):
        moved = list(anchor)
        moved[k] = anchor[k] + scale * pot(np.cos(3 * p.grid.points[:, 0]), p.grid)
        rest = sum(p.a[i] * p.marginals[i].integrate(c_transform(f, QUAD).transformed)
                   for i, f in zip(p.free_indices, moved))
        fb = full_potentials(anchor, p)[p.base]
        rest += p.a[p.base] * p.marginals[p.base].integrate(c_transform(fb, QUAD).transformed)
        return eval_linearized(moved, anchor, nu, p) - rest

    assert nu_term(0.02) == pytest.approx(2 * nu_term(0.01), abs=1e-12)


# support optimality ------------------------------------------------------------------


def test_support_optimality_at_convergence(classical):
    p, result = classical
    gaps = support_optimality(result.potentials, result.barycenter, p)
    assert np.all(gaps <= default_tolerance(p.grid))


# directional derivative ---------------------------------------------------------------


def single_marginal(mu):
    return Problem.build([1.0], [mu])


def bump(y, c=0.5, s=0.1):
    return np.exp(-((y - c) ** 2) / (2 * s * s))


def test_derivative_vanishes_at_the_marginal():
    g = Grid([0.0], [1.0], [512])
    mu = gaussian_on_grid(g, [0.5], 0.08)
    formula, fd = primal_directional_derivative(mu, bump, single_marginal(mu), 1e-3)
    assert formula == pytest.approx(0.0, abs=1e-12)
    assert abs(fd) <= 1e-3 + g.h


def test_derivative_is_first_order():
    g = Grid([0.0], [1.0], [512])
    mu, nu = gaussian_on_grid(g, [0.4], 0.06), gaussian_on_grid(g, [0.55], 0.06)
    p = Problem.build([2.0, -1.0], [mu, gaussian_on_grid(g, [0.5], 0.1)])
    errors = []
    for dt in (1e-2, 1e-3):
        formula, fd = primal_directional_derivative(nu, bump, p, dt)
        errors.append(abs(formula - fd))
    assert 5 <= errors[0] / errors[1] <= 20


def test_derivative_sign_toward_the_marginal():
    g = Grid([0.0], [1.0], [512])
    mu, nu = gaussian_on_grid(g, [0.4], 0.06), gaussian_on_grid(g, [0.6], 0.06)
    formula, fd = primal_directional_derivative(nu, lambda y: -bump(y, 0.6, 0.2), single_marginal(mu), 1e-4)
    assert formula < 0 and fd < 0


# curve convexity ------------------------------------------------------------------------


def test_curve_constant_when_endpoints_agree():
    p = Problem.build([2, -1], [gaussian_on_grid(LINE, [0.5], 0.05), gaussian_on_grid(LINE, [0.5], 0.08)])
    nu = gaussian_on_grid(LINE, [0.5], 0.03)
    rep = curve_convexity_check(p, nu, nu)
    np.testing.assert_allclose(rep.values, rep.endpoints[0], rtol=1e-12)
    np.testing.assert_allclose(rep.chords, rep.endpoints[0], rtol=1e-12)


def test_curve_of_diracs_is_explicit_quadratic():
    g = Grid([0.0], [1.0], [101])
    base = GridMeasure(g, np.where(np.isin(np.arange(101), [30, 31]), 0.5, 0.0))
    neg = GridMeasure(g, np.eye(101)[10])
    p = Problem.build([2, -1], [base, neg])
    nu0, nu1 = GridMeasure(g, np.eye(101)[40]), GridMeasure(g, np.eye(101)[70])
    t = np.array([0.25, 0.5, 0.75])
    rep = curve_convexity_check(p, nu0, nu1, t)
    y = 0.4 + 0.3 * t
    exact = 2 * 0.5 * (0.5 * (0.30 - y) ** 2 + 0.5 * (0.31 - y) ** 2) - 0.5 * (0.1 - y) ** 2
    np.testing.assert_allclose(rep.values, exact, atol=1e-12)
    assert rep.passes and np.all(rep.slack - rep.tolerance >= 0)


def test_curve_gaussians():
    p = Problem.build([2, -1], [gaussian_on_grid(LINE, [0.5], 0.05), gaussian_on_grid(LINE, [0.45], 0.08)])
    rep = curve_convexity_check(p, gaussian_on_grid(LINE, [0.5], 0.04), gaussian_on_grid(LINE, [0.6], 0.02))
    assert rep.passes


def test_curve_needs_one_positive_weight():
    with pytest.raises(OnePositiveWeightRequired):
        nu = gaussian_on_grid(LINE, [0.5], 0.1)
        curve_convexity_check(two_gaussians(LINE), nu, nu)


# full record -----------------------------------------------------------------------------


def test_diagnose_record(classical):
    p, result = classical
    rec = diagnose(result, p)
    assert rec.duality_gap == abs(rec.primal_value - rec.dual_value)
    assert rec.hard_gates_pass and rec.saddle_report.verified
    assert rec.uniqueness_residual <= 2e-4
    assert rec.lambda_hat == pytest.approx(0.0, abs=0.05)  # a translation has a linear potential
    report = rec.to_report()
    for key in ("primal_value", "duality_gap", "per_term_gap.0", "saddle.quadratic_passes", "hard_gates_pass"):
        assert key in report
    K = [ot_1d_exact(mu, result.barycenter, QUAD)[0] for mu in p.marginals]
    assert rec.primal_value == pytest.approx(p.a @ K, abs=1e-15)
