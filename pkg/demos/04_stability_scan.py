"""Check the drift inequality for the queue-length Lyapunov function, with
and without the Poisson correction for the environment."""
import numpy as np

from mmqlab import EnvGenerator, ModelParams, StaticPriority
from mmqlab.stability_lab import compare_corrected, drift_inequality_scan

Q = np.array([[-1.0, 1.0], [1.0, -1.0]])


def model(alpha):
    return ModelParams(EnvGenerator(Q, alpha, 400), [[0.7, 0.3], [0.3, 0.7]], np.ones((2, 2)), [[0.5, 0.5], [2.0, 2.0]])


rep = drift_inequality_scan(model(1.0), StaticPriority(), 2, variant="averaged", rng=np.random.default_rng(0))
print("averaged generator:", {k: rep.to_dict()[k] for k in ("C1", "C2", "satisfied_fraction", "n_states")})

out = compare_corrected(model(0.5), StaticPriority(), 2, rng=np.random.default_rng(1))
print(f"alpha=0.5: raw C2 = {out['raw']['C2']:.4f}, corrected C2 = {out['corrected']['C2']:.4f}")
