"""Cost of the omega-mapped HJB control in the prelimit against the
optimal diffusion cost. A small budget; the acceptance suite runs a larger one."""
import numpy as np

from mmqlab import CostSpec, EnvGenerator, Grid, ModelParams
from mmqlab.cost_metrics import optimality_gap

Q = np.array([[-1.0, 1.0], [1.0, -1.0]])
p = ModelParams(EnvGenerator(Q, 1.0, 100), [1.5, 0.5], [1.0, 1.0], [0.5, 0.5])
out = optimality_gap(p, CostSpec(1.0, 2), Grid.box(8.0, 0.02), [50, 200], T=200.0, reps=60, seed=5, burn_in=20.0)
print(f"rho_* = {out['rho_star']:.4f}")
for r in out["rows"]:
    print(f"n={r['n']:4d}  cost {r['cost']:.4f} +- {r['cost_ci_half_width']:.4f}  gap {r['gap']:+.4f}")
