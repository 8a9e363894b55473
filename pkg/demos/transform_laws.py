# %% [markdown]
# # The c-transform and its laws
#
# Everything in the solver goes through f -> f^c. Here we look at one random
# potential, its c-concave envelope f^cc, and the law suite that the
# transform must satisfy on a grid.

# %%
import matplotlib.pyplot as plt
import numpy as np

from signedbary import CostModel, Grid, c_concavify, c_transform, ctransform_brute, transform_law_suite
from signedbary.ctransform import random_potential

grid = Grid([0.0], [1.0], [256])
quad = CostModel.quadratic()
f = random_potential(grid, np.random.default_rng(4))

# %% fast (lower envelope) and brute force agree, and f^cc sits above f
fc = c_transform(f, quad).transformed
print("fast vs brute:", np.abs(fc.value - ctransform_brute(f, quad).transformed.value).max())
fcc = c_concavify(f, quad)
print("min(f^cc - f) =", (fcc.value - f.value).min())

# %%
report = transform_law_suite(grid, count=100, seed=0)
print("\n".join(report.lines()))

# %%
x = grid.axes[0]
plt.plot(x, f.value, color="0.6", label="f")
plt.plot(x, fcc.value, "k", label="f^cc")
plt.legend()
plt.show()
