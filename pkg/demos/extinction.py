"""Extinction times of a small ensemble against the tail bound ``|x| / (rho t)``.

Run with ``python demos/extinction.py`` (about a minute on one core).
"""

import numpy as np

from stvflow.harness import RunConfig, initial_condition
from stvflow.grid import build_grid, l2_norm
from stvflow.solver import SolverConfig
from stvflow.transport import TransportSystem
from stvflow.verify import estimate_rho, extinction_study

grid = build_grid(1.0, 32)
x0 = initial_condition(RunConfig(n=32, initial="checkerboard"), grid)
rho = estimate_rho(grid)
T = 4 * l2_norm(x0) / rho
cfg = SolverConfig(lam=0.05, dt=2e-3, T=round(T / 2e-3) * 2e-3, grid=grid, transport=TransportSystem.from_omegas([1.0]))
rep = extinction_study(x0, cfg, range(20), rho=rho)

print(f"rho_hat = {rho:.3f}, |x| = {rep.x_norm:.3f}, T = {rep.T:.3f}, censored = {rep.n_censored}")
print(f"extinction times: min {np.min(rep.tau):.3f}, median {np.median(rep.tau):.3f}, max {np.max(rep.tau):.3f}")
print(f"survival dominated by the bound: {rep.dominated}")
curve, ok = rep.norm_occupation()
print(f"max (mean |X| + rho int P) / |x| = {np.max(curve) / rep.x_norm:.3f}, within 5%: {ok}")
