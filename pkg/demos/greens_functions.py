"""Green's functions from a Galerkin inverse.

With the system net replaced by the exact inverse, an NGO reproduces the
Galerkin solution, and the coefficient matrix doubles as a discrete Green's
function. This script shows both, first for -u'' = f on (0, 1), then for a
2D diffusion sample.
"""

from __future__ import annotations

import numpy as np

from ngo.assembly import Discretization, make_quadratures
from ngo.core import InverseOracle, extract_greens, make_ngo_model, ngo_forward, poisson_1d_greens, \
    precompute_inputs, relative_errors
from ngo.data import make_dataset_C
from ngo.discretization import make_bspline_basis, make_tensor_basis

# 1D: G(x, x') = min(x, x')(1 - max(x, x')) against the Galerkin inverse
for n in (8, 16, 32):
    r = poisson_1d_greens(n, 3)
    print(f"1D n={n:2d}: ||G_hat - G|| = {r.ngo_error:.2e}, "
          f"kernel projection oracle {r.ritz_error:.2e}, L2 projection {r.l2_projection_error:.2e}")

# 2D: an oracle NGO on 10x10 cubic B-splines
b = make_bspline_basis(10, 3)
disc = Discretization(make_tensor_basis([b, b]), make_quadratures())
inp = precompute_inputs(make_dataset_C(8, 0), disc, nitsche=True, fem=True)
model = make_ngo_model("model", disc.basis, inp, hidden=(4,), neumann=False, nitsche_in_inputs=True)
oracle = model.with_flags(net=InverseOracle(model))
u = ngo_forward(oracle, inp)
print("oracle vs FEM, max coefficient gap:", np.abs(u - inp.fem).max())
print("relative L2 errors vs exact solutions:", " ".join(f"{e:.1e}" for e in relative_errors(u, inp)))

# the kernel evaluated on a line through the domain, source at the centre
xs = np.column_stack([np.linspace(0, 1, 9), np.full(9, 0.5)])
G = extract_greens(oracle, xs, np.array([[0.5, 0.5]]), inp.subset([0]))
print("G(x, 0.5; 0.5, 0.5) along y=0.5:", np.round(G[:, 0], 4))
