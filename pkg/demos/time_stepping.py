"""Space-time slab stepping with the norm scaling and conservation layers.

An inflated step operator (1.5 x the FEM inverse) is unstable on its own.
Rescaling each step matrix so its energy-norm gain is at most S restores
monotone energy decay.

The conservation layer enforces the discrete mass balance at every step.
The balance uses the normal derivative of the discrete solution for the
Dirichlet flux, so it carries its own small error: it pays off for a biased
operator (here 0.98 x the FEM inverse, standing in for a learned one) and
costs a little for FEM, whose mass error is already tiny.
"""

from __future__ import annotations

import numpy as np

from ngo.data import make_dataset_D
from ngo.timestepper import FemStep, RolloutConfig, make_space_time_discretization, rollout

sample = make_dataset_D(1, 0)[0]


class Scaled(FemStep):
    def __init__(self, factor: float):
        super().__init__()
        self.factor = factor

    def matrix(self, op, d, theta_q):
        return self.factor * super().matrix(op, d, theta_q)


coarse = make_space_time_discretization(n=6, dt=1e-2, cells=3)
for label, cfg in (("unscaled", RolloutConfig(n_steps=40, homogeneous=True)),
                   ("S = 0.8", RolloutConfig(n_steps=40, homogeneous=True, norm_scaling=True))):
    E = rollout(Scaled(1.5), sample, coarse, cfg).column("energy")
    print(f"{label:9s} energy step 1 {E[0]:.3e}, step 40 {E[-1]:.3e}, monotone {bool(np.all(np.diff(E) <= 0))}")

disc = make_space_time_discretization()
for label, step in (("biased", Scaled(0.98)), ("FEM", FemStep())):
    plain = rollout(step, sample, disc, RolloutConfig(n_steps=20))
    fixed = rollout(step, sample, disc, RolloutConfig(n_steps=20, conservation=True))
    print(f"{label:6s} mean mass error {plain.column('mass_error').mean():.2e} -> "
          f"{fixed.column('mass_error').mean():.2e} with correction "
          f"(balance residual {fixed.column('mass_residual').max():.1e}, "
          f"relative error {plain.column('rel_error')[-1]:.2e} -> {fixed.column('rel_error')[-1]:.2e})")
