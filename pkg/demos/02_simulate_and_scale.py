"""Simulate the prelimit system under static priority and look at the
diffusion-scaled queue at a fixed time for growing n."""
import numpy as np

from mmqlab import EnvGenerator, ModelParams, StaticPriority, initial_state, simulate_ensemble

Q = np.array([[-1.0, 1.0], [1.0, -1.0]])
base = ModelParams(EnvGenerator(Q, 0.5, 50), [1.9, 0.1], [1.0, 1.0], [0.5, 0.5])

for n in (50, 200, 800):
    p = base.with_n(n)
    ens = simulate_ensemble(p, StaticPriority(), 5.0, initial_state(p, [0.0]), 1, 2000, snapshot_times=[5.0])
    xs = ens.scaled_snapshots[0][:, 0]
    print(f"n={n:4d}  mean Xhat(5) = {xs.mean():+.3f}  var = {xs.var(ddof=1):.3f}  events/rep = {ens.n_events.mean():.0f}")
