# %% [markdown]
# # Negative weights: extrapolation and collapse
#
# A negative weight pushes the barycenter away from that marginal. In 1D the
# quantile function of the answer is the affine combination of the marginal
# quantiles, as long as that combination stays monotone.

# %%
import matplotlib.pyplot as plt

from signedbary import Grid, Problem, SolverConfig, diagnose, gaussian_on_grid, solve
from signedbary.oracle import signed_barycenter_1d, solve_one_positive, wasserstein_1d

grid = Grid([0.0], [1.0], [201])
x = grid.axes[0]

# %% three marginals, weights (0.6, 0.6, -0.2)
mu = [gaussian_on_grid(grid, [m], 0.05) for m in (0.4, 0.6, 0.5)]
problem = Problem.build([0.6, 0.6, -0.2], mu)
result = solve(problem, SolverConfig(max_iters=25000), diagnostics=False)
_, exact, monotone = signed_barycenter_1d(problem)
record = diagnose(result, problem)
print(result.status, "monotone:", monotone)
print("W2(solver, quantile formula) =", wasserstein_1d(result.barycenter, exact))
print("gap =", record.duality_gap, " saddle passes:", record.saddle_report.quadratic_passes)

# %% a wide Gaussian with weight -1 collapses a narrow one to a point
grid = Grid([0.0], [1.0], [256])
collapse = Problem.build([2, -1], [gaussian_on_grid(grid, [0.5], 0.05), gaussian_on_grid(grid, [0.5], 0.10)])
dirac = solve_one_positive(collapse)
print(dirac.method, "B =", dirac.primal_value, " peak mass =", dirac.barycenter.mass.max())

# %%
fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 3.5))
for m in mu:
    ax0.plot(x, m.mass, color="0.6")
ax0.plot(x, result.barycenter.mass, "k", label="solver")
ax0.plot(x, exact.mass, "r--", label="quantile formula")
ax0.legend()
for m in collapse.marginals:
    ax1.plot(grid.axes[0], m.mass, color="0.6")
ax1.stem(grid.axes[0], dirac.barycenter.mass, markerfmt=" ", basefmt=" ")
ax1.set_title("a = (2, -1)")
plt.tight_layout()
plt.show()
