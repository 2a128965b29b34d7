"""Two-level preconditioning of finite-difference diffusion systems.

The coarse level maps the fine residual to basis coefficients (restriction),
applies a coefficient-space inverse (here the exact Galerkin inverse, which
a trained NGO approximates) and evaluates back on the grid (prolongation).
Combined multiplicatively with line block-Jacobi it cuts Krylov iterations
several-fold.
"""

from __future__ import annotations

import numpy as np

from ngo.assembly import Discretization, assemble_steady, make_quadratures
from ngo.data import make_dataset_C
from ngo.discretization import make_bspline_basis, make_tensor_basis
from ngo.krylov import SOLVERS, block_jacobi, fd_system_from_sample, make_ngo_preconditioner, solve

b = make_bspline_basis(10, 3)
disc = Discretization(make_tensor_basis([b, b]), make_quadratures())
sample = make_dataset_C(1, 7)[0]
system = fd_system_from_sample(sample, 1 / 49)
print(f"FD system: {system.n} unknowns")

bj = block_jacobi(system.C, system.ny)
F = assemble_steady(sample.fields.theta, disc).system(True)[0]
A = np.linalg.inv(F.toarray() if hasattr(F, "toarray") else F)
precons = {"none": None, "blk-jac": bj, "blk-jac+NGO": make_ngo_preconditioner(A, disc.basis, system, bj)}

print(f"{'solver':14s}" + "".join(f"{k:>14s}" for k in precons))
for name in SOLVERS:
    its = [solve(name, system.C, system.b, M).iterations for M in precons.values()]
    print(f"{name:14s}" + "".join(f"{i:14d}" for i in its))
