"""Environment analytics for a small modulated model.

Prints the stationary law, the deviation matrix, the modulation covariance
and the diffusion covariance in each of the three time-scale regimes.
"""
import numpy as np

from mmqlab import EnvGenerator, ModelParams

Q = np.array([[-1.0, 1.0], [1.0, -1.0]])

for alpha in (0.5, 1.0, 2.0):
    p = ModelParams(EnvGenerator(Q, alpha, 100), [1.5, 0.5], [1.0, 1.0], [0.5, 0.5])
    dq = p.derive()
    an = p.analytics
    if alpha == 0.5:
        print("pi      ", an.pi)
        print("Upsilon\n", an.Upsilon)
        print("Theta   ", dq.Theta.ravel())
    print(f"alpha={alpha}: beta={dq.beta:.3f}  Sigma={dq.Sigma.ravel()}")
