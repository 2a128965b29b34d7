"""Finite-difference diffusion systems, Krylov solvers and NGO preconditioners.

The FD grid has spacing ``h`` on ``[0,1]²``. Dirichlet data (``θu = g``) on
``x = 0, 1`` is eliminated, so unknowns sit at ``x_i = i·h`` for
``i = 1..n_x`` and ``y_j = j·h`` for ``j = 0..n_y−1``; the flat index is
``i·n_y + j`` (grid columns are contiguous). Rows on the Neumann edges
``y = 0, 1`` use a half-cell flux balance, which puts ``2η/h`` in the
right-hand side.

All solvers use right preconditioning and a zero initial guess. Iteration
counts are the number of Krylov (Arnoldi or Bi-CGSTAB) steps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.io
import scipy.linalg as sla
from scipy import sparse

from .assembly import Discretization, ParameterFields, sample_field
from .errors import ConfigError, DomainError, NumericalError

__all__ = [
    "FdSystem",
    "fd_discretize",
    "fd_system_from_sample",
    "SolveResult",
    "gmres",
    "fgmres",
    "bicgstab",
    "block_jacobi",
    "NgoPreconditioner",
    "make_ngo_preconditioner",
    "ngo_coarse_matrix",
    "multiplicative",
    "identity_preconditioner",
    "write_matrix_market",
    "SOLVERS",
    "PRECONDITIONERS",
    "solve",
]

log = logging.getLogger(__name__)

Operator = Callable[[np.ndarray], np.ndarray]


@dataclass(eq=False)
class FdSystem:
    """Five-point FD system ``C u = b`` with its grid points and quadrature weights."""

    h: float
    nx: int
    ny: int
    C: sparse.csr_matrix
    b: np.ndarray
    points: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.nx * self.ny

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.C @ v


def _grid(h: float):
    m = round(1.0 / h)
    if m < 3 or abs(m * h - 1.0) > 1e-12:
        raise ConfigError("1/h must be an integer ≥ 3")
    return m, m - 1, m + 1


def fd_discretize(theta, f=0.0, eta=0.0, g=0.0, h: float = 1 / 49) -> FdSystem:
    """Assemble ``−∇·(θ∇u) = f`` with ``θ∇u·n = η`` on y = 0, 1 and ``θu = g`` on x = 0, 1.

    Field arguments are constants, callables or :class:`~ngo.fields.Field`
    objects. Face coefficients are arithmetic means of the nodal θ.
    """
    m, nx, ny = _grid(h)
    xs = np.arange(m + 1) * h
    ys = np.arange(ny) * h
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    full = np.column_stack([X.ravel(), Y.ravel()])
    th = sample_field(theta, full).reshape(m + 1, ny)
    if not np.all(np.isfinite(th)) or th.min() <= 0:
        raise DomainError("θ must be positive on the grid")

    tx = 0.5 * (th[:-1] + th[1:])  # faces (i+½, j), i = 0..m−1
    ty = 0.5 * (th[1:-1, :-1] + th[1:-1, 1:])  # faces (i, j+½) for interior i
    idx = np.arange(nx * ny).reshape(nx, ny)
    # Neumann rows are half cells: their y-fluxes weigh twice as much
    ry = np.ones(ny)
    ry[0] = ry[-1] = 2.0
    rows, cols, vals = [], [], []
    diag = np.zeros((nx, ny))

    def add(r, c, v):
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(v.ravel())

    # x-direction couplings
    west, east = tx[:-1], tx[1:]
    diag += west + east
    add(idx[1:], idx[:-1], -west[1:])
    add(idx[:-1], idx[1:], -east[:-1])
    # y-direction couplings
    south = ty * ry[:-1][None, :]
    north = ty * ry[1:][None, :]
    diag[:, :-1] += south
    diag[:, 1:] += north
    add(idx[:, :-1], idx[:, 1:], -south)
    add(idx[:, 1:], idx[:, :-1], -north)
    add(idx, idx, diag)
    C = sparse.csr_matrix((np.concatenate(vals) / h**2, (np.concatenate(rows), np.concatenate(cols))),
                          shape=(nx * ny, nx * ny))

    pts = full.reshape(m + 1, ny, 2)[1:-1].reshape(-1, 2)
    b = sample_field(f, pts).reshape(nx, ny)
    edge = np.zeros((nx, ny), dtype=bool)
    edge[:, [0, -1]] = True
    b[edge] += 2.0 / h * sample_field(eta, pts[edge.ravel()])
    # eliminated Dirichlet values u = g/θ
    left, right = full.reshape(m + 1, ny, 2)[0], full.reshape(m + 1, ny, 2)[-1]
    b[0] += tx[0] * sample_field(g, left) / th[0] / h**2
    b[-1] += tx[-1] * sample_field(g, right) / th[-1] / h**2
    w = np.full((nx, ny), h * h)
    w[edge] *= 0.5
    return FdSystem(h, nx, ny, C, b.ravel(), pts, w.ravel())


def fd_system_from_sample(sample, h: float = 1 / 49) -> FdSystem:
    fl = sample.fields
    return fd_discretize(fl.theta, fl.f, fl.eta, fl.g, h)


def write_matrix_market(system: FdSystem, path) -> None:
    scipy.io.mmwrite(str(path), system.C)


# -- solvers -----------------------------------------------------------------


@dataclass
class SolveResult:
    """Solution and telemetry. ``residuals[k]`` is the relative residual after k iterations."""

    x: np.ndarray
    iterations: int
    converged: bool
    residuals: list[float] = field(default_factory=list)
    true_residual: float = np.nan
    solver: str = ""


def identity_preconditioner(v: np.ndarray) -> np.ndarray:
    return v


def _as_operator(A) -> Operator:
    if callable(A):
        return A
    return lambda v: A @ v


def _givens(a: float, b: float):
    r = np.hypot(a, b)
    if r == 0.0:
        return 1.0, 0.0, 0.0
    return a / r, b / r, r


def _gmres(A, b, M, restart, tol, max_iter, flexible, name) -> SolveResult:
    A, M = _as_operator(A), (identity_preconditioner if M is None else M)
    b = np.asarray(b, dtype=float)
    n = b.size
    bnorm = np.linalg.norm(b)
    x = np.zeros(n)
    if bnorm == 0.0:
        return SolveResult(x, 0, True, [0.0], 0.0, name)
    m = max_iter if restart is None else int(restart)
    if m < 1:
        raise ConfigError("restart must be ≥ 1")
    history = [1.0]
    total = 0
    r = b.copy()
    beta = bnorm
    best = x.copy(), 1.0
    while total < max_iter:
        k_max = min(m, max_iter - total, n)
        V = np.zeros((n, k_max + 1))
        Z = np.zeros((n, k_max)) if flexible else None
        H = np.zeros((k_max + 1, k_max))
        cs, sn = np.zeros(k_max), np.zeros(k_max)
        g = np.zeros(k_max + 1)
        g[0] = beta
        V[:, 0] = r / beta
        k = 0
        while k < k_max:
            z = M(V[:, k])
            if flexible:
                Z[:, k] = z
            w = A(z)
            # classical Gram-Schmidt, twice
            h1 = V[:, : k + 1].T @ w
            w = w - V[:, : k + 1] @ h1
            h2 = V[:, : k + 1].T @ w
            w = w - V[:, : k + 1] @ h2
            H[: k + 1, k] = h1 + h2
            H[k + 1, k] = np.linalg.norm(w)
            if H[k + 1, k] > 0:
                V[:, k + 1] = w / H[k + 1, k]
            for i in range(k):
                t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
                H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
                H[i, k] = t
            cs[k], sn[k], H[k, k] = _givens(H[k, k], H[k + 1, k])
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            k += 1
            total += 1
            est = abs(g[k]) / bnorm
            history.append(est)
            if est <= tol:
                break
        y = sla.solve_triangular(H[:k, :k], g[:k])
        x = x + (Z[:, :k] @ y if flexible else M(V[:, :k] @ y))
        r = b - A(x)
        beta = np.linalg.norm(r)
        rel = beta / bnorm
        if rel < best[1]:
            best = x.copy(), rel
        if not np.isfinite(rel):
            raise NumericalError(f"{name}: non-finite residual after {total} iterations")
        if rel <= tol:
            return SolveResult(x, total, True, history, rel, name)
        if history[-1] <= tol:
            log.info("%s: estimate converged but true residual %.3e > tol, restarting", name, rel)
    log.warning("%s: no convergence in %d iterations (best residual %.3e)", name, total, best[1])
    return SolveResult(best[0], total, False, history, best[1], name)


def gmres(A, b, M: Operator | None = None, restart: int | None = None, tol: float = 1e-8,
          max_iter: int = 5000) -> SolveResult:
    """Right-preconditioned GMRES; ``restart=None`` is GMRES(∞).

    ``M`` must be a fixed linear map. On non-convergence the best iterate is
    returned with ``converged=False``.
    """
    tag = "inf" if restart is None else str(restart)
    return _gmres(A, b, M, restart, tol, max_iter, False, f"GMRES({tag})")


def fgmres(A, b, M: Operator | None = None, restart: int | None = None, tol: float = 1e-8,
           max_iter: int = 5000) -> SolveResult:
    """Flexible GMRES: stores the preconditioned directions, so ``M`` may vary."""
    tag = "inf" if restart is None else str(restart)
    return _gmres(A, b, M, restart, tol, max_iter, True, f"F-GMRES({tag})")


def bicgstab(A, b, M: Operator | None = None, tol: float = 1e-8, max_iter: int = 5000) -> SolveResult:
    """Right-preconditioned Bi-CGSTAB (one iteration = two products with ``A``)."""
    A, M = _as_operator(A), (identity_preconditioner if M is None else M)
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return SolveResult(x, 0, True, [0.0], 0.0, "Bi-CGSTAB")
    r = b.copy()
    r0 = r.copy()
    rho = alpha = omega = 1.0
    v = p = np.zeros_like(b)
    history = [1.0]
    best = x.copy(), 1.0
    for it in range(1, max_iter + 1):
        rho_new = r0 @ r
        if rho_new == 0.0:
            log.warning("Bi-CGSTAB breakdown (ρ = 0) at iteration %d", it)
            break
        beta = rho_new / rho * alpha / omega
        rho = rho_new
        p = r + beta * (p - omega * v)
        ph = M(p)
        v = A(ph)
        alpha = rho / (r0 @ v)
        s = r - alpha * v
        if np.linalg.norm(s) / bnorm <= tol:
            x = x + alpha * ph
            rel = np.linalg.norm(b - A(x)) / bnorm
            history.append(rel)
            if rel <= tol:
                return SolveResult(x, it, True, history, rel, "Bi-CGSTAB")
            r = r0 = b - A(x)
            rho = alpha = omega = 1.0
            v = p = np.zeros_like(b)
            continue
        sh = M(s)
        t = A(sh)
        tt = t @ t
        omega = (t @ s) / tt if tt > 0 else 0.0
        x = x + alpha * ph + omega * sh
        r = s - omega * t
        rel = np.linalg.norm(r) / bnorm
        if not np.isfinite(rel):
            raise NumericalError(f"Bi-CGSTAB: non-finite residual at iteration {it}")
        history.append(rel)
        if rel < best[1]:
            best = x.copy(), rel
        if rel <= tol:
            true = np.linalg.norm(b - A(x)) / bnorm
            if true <= tol:
                return SolveResult(x, it, True, history, true, "Bi-CGSTAB")
            # recurrence drifted from the true residual: restart from x
            r = r0 = b - A(x)
            rho = alpha = omega = 1.0
            v = p = np.zeros_like(b)
            continue
        if omega == 0.0:
            log.warning("Bi-CGSTAB breakdown (ω = 0) at iteration %d", it)
            break
    log.warning("Bi-CGSTAB: no convergence in %d iterations (best residual %.3e)", it, best[1])
    return SolveResult(best[0], it, False, history, best[1], "Bi-CGSTAB")


SOLVERS = ("GMRES(inf)", "GMRES(50)", "F-GMRES(inf)", "F-GMRES(50)", "Bi-CGSTAB")


def solve(name: str, A, b, M: Operator | None = None, tol: float = 1e-8, max_iter: int = 5000) -> SolveResult:
    """Dispatch by name: ``GMRES(inf|m)``, ``F-GMRES(inf|m)`` or ``Bi-CGSTAB``."""
    if name == "Bi-CGSTAB":
        return bicgstab(A, b, M, tol, max_iter)
    for prefix, fn in (("F-GMRES(", fgmres), ("GMRES(", gmres)):
        if name.startswith(prefix) and name.endswith(")"):
            arg = name[len(prefix):-1]
            try:
                restart = None if arg in ("inf", "∞") else int(arg)
            except ValueError:
                break
            return fn(A, b, M, restart, tol, max_iter)
    raise ConfigError(f"unknown solver {name!r}")


# -- preconditioners ---------------------------------------------------------


def block_jacobi(C, block_size: int) -> Operator:
    """Inverse of the block diagonal of ``C`` with contiguous blocks of ``block_size``.

    With the FD column-major layout, ``block_size = n_y`` gives line Jacobi.
    """
    C = C.tocsr() if sparse.issparse(C) else sparse.csr_matrix(C)
    n = C.shape[0]
    if block_size < 1 or n % block_size:
        raise ConfigError("block size must divide the system size")
    nb = n // block_size
    inv = np.empty((nb, block_size, block_size))
    for k in range(nb):
        s = slice(k * block_size, (k + 1) * block_size)
        try:
            inv[k] = np.linalg.inv(C[s, s].toarray())
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular diagonal block {k}") from exc

    def apply(v: np.ndarray) -> np.ndarray:
        return np.einsum("kij,kj->ki", inv, v.reshape(nb, block_size)).ravel()

    return apply


def multiplicative(coarse: Operator, smoother: Operator, C) -> Operator:
    """``x̃ = coarse(v)``, then ``x̃ + smoother(v − C x̃)``."""
    A = _as_operator(C)

    def apply(v: np.ndarray) -> np.ndarray:
        xt = coarse(v)
        return xt + smoother(v - A(xt))

    return apply


@dataclass(eq=False)
class NgoPreconditioner:
    """Coarse operator ``v ↦ P A R v`` with ``P_ij = φ_j(x_i)`` and ``R_ij = φ_i(x_j) w_j``."""

    P: np.ndarray
    A: np.ndarray
    R: np.ndarray

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self.P @ (self.A @ (self.R @ v))


def ngo_coarse_matrix(model, theta, disc: Discretization) -> np.ndarray:
    """``A[θ]`` from a frozen NGO, evaluated once for the coefficient field θ."""
    from .core import precompute_inputs, system_matrices
    from .data import ProblemSample

    sample = ProblemSample(ParameterFields(theta=theta), None, "preconditioner", 0)
    data = model.variant == "data"
    inp = precompute_inputs([sample], disc, nitsche=model.nitsche_in_inputs, system=not data,
                            moments=data, reference=False)
    return system_matrices(model, inp)[0]


def make_ngo_preconditioner(A: np.ndarray, basis, system: FdSystem, blkjac: Operator | None = None,
                            domain=((0.0, 1.0), (0.0, 1.0))):
    """NGO coarse preconditioner for ``system``, optionally followed by a block-Jacobi correction.

    ``A`` is the coefficient-space operator (e.g. from :func:`ngo_coarse_matrix`).
    """
    A = np.asarray(A, dtype=float)
    if A.shape != (basis.count, basis.count):
        raise ConfigError(f"A has shape {A.shape}, basis has {basis.count} functions")
    lo = np.array([d[0] for d in domain])
    hi = np.array([d[1] for d in domain])
    if np.any(system.points < lo - 1e-12) or np.any(system.points > hi + 1e-12):
        raise ConfigError("FD grid points lie outside the basis domain")
    factors = getattr(basis, "factors", ())
    for fac, a, b in zip(factors, lo, hi):
        if tuple(getattr(fac, "domain", (a, b))) != (a, b):
            raise ConfigError("basis domain does not match the FD grid domain")
    P = np.asarray(basis.eval(system.points))
    coarse = NgoPreconditioner(P, A, (P * system.weights[:, None]).T)
    if blkjac is None:
        return coarse
    return multiplicative(coarse, blkjac, system.C)


PRECONDITIONERS = ("none", "blk-jac", "blk-jac+NGO")
