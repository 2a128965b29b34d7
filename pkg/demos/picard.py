"""Picard iteration for nonlinear diffusion, theta = theta0 + alpha u.

Each iteration solves a linear problem with the coefficient frozen at the
previous iterate. The FEM inner solver converges geometrically; a learned
inner solver would stall at its own approximation error.
"""

from __future__ import annotations

from ngo.assembly import Discretization, make_quadratures
from ngo.data import make_dataset_F
from ngo.discretization import make_bspline_basis, make_tensor_basis
from ngo.solvers import PicardConfig, fem_inner_solver, picard_solve, relative_l2

b = make_bspline_basis(10, 3)
disc = Discretization(make_tensor_basis([b, b]), make_quadratures())
for alpha in (0.0, 0.1, 0.3):
    s = make_dataset_F(1, 3, alpha=alpha)[0]
    fl = s.fields
    r = picard_solve(fl.theta0, disc, fem_inner_solver(disc, fl.f, fl.eta, fl.g),
                     PicardConfig(max_iterations=30, tolerance=1e-10, alpha=alpha))
    err = relative_l2(disc.phi @ r.solution, s.u(disc.pts), disc.w)
    print(f"alpha={alpha:.1f}: {r.iterations} iterations, updates "
          + " ".join(f"{u:.1e}" for u in r.updates[:6]) + f" ..., final error {err:.2e}")
