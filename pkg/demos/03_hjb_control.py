"""Solve the ergodic and discounted control problems for the limiting
diffusion of a two-class model and inspect the optimal split of the queue."""
import numpy as np

from mmqlab import CostSpec, DiffusionSpec, EnvGenerator, Grid, ModelParams, solve_discounted, solve_ergodic

Q = np.array([[-1.0, 1.0], [1.0, -1.0]])
p = ModelParams(EnvGenerator(Q, 1.0, 400), [[0.7, 0.3], [0.3, 0.7]], np.ones((2, 2)), [[0.5, 0.5], [2.0, 2.0]])
spec = DiffusionSpec.from_params(p)
cost = CostSpec(1.0, 2)

erg = solve_ergodic(spec, cost, Grid.box(5.0, 0.25, d=2))
print(f"optimal ergodic cost rho_* = {erg.rho_star:.4f} (monotone chain: {erg.monotone})")
ctrl = erg.as_control()
for x in ([1.0, 1.0], [2.0, 0.0], [0.0, 2.0]):
    print(f"  x = {x}: queue split u = {np.round(ctrl(np.array(x)), 3)}")

disc = solve_discounted(spec, cost, 1.0, Grid.box(5.0, 0.25, d=2))
print(f"discounted value at the origin (theta=1): {disc.value_at_origin:.4f}")
