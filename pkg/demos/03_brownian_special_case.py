"""When the ensemble is a single Brownian motion, feedback and feedforward coincide.

The classical bridge u = -x / (t_f - t) reads the state. The feedforward law
u = -sum_j dW_j / (t_f - t_j) reads only the noise. Driven by the same path
the two trajectories agree up to discretization error.
"""

import numpy as np

from ensemble_bridge import (
    BridgeProblem,
    MarkovBridge,
    continuous_gains,
    make_family,
    make_noise,
    simulate_ensemble,
)

ens = make_family("brownian", n_nodes=1)
for k in (64, 512, 4096):
    prob = BridgeProblem([0.0], [0.0], steps_k=k)
    gaps = []
    for seed in range(200):
        noise = make_noise(seed, k, 1.0)
        fb = simulate_ensemble(ens, prob, MarkovBridge(ens), noise).averaged_state
        ff = simulate_ensemble(ens, prob, continuous_gains(ens, prob), noise).averaged_state
        gaps.append(np.abs(fb - ff).max())
    print(f"k={k:5d}  median sup |x_feedback - x_feedforward| = {np.median(gaps):.4f}"
          f"   (sqrt(dt) = {np.sqrt(1 / k):.4f})")
