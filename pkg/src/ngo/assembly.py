"""Weak-form assembly of system matrices, right-hand sides and mass matrices.

Conventions: rows are indexed by test functions ψ_n, columns by trial
functions φ_m, and ψ = φ. The domain is the unit square with Neumann
segments at y = 0, 1 and Dirichlet segments at x = 0, 1, where the Dirichlet
condition reads θu = g. Space-time bases are ordered (t, x, y) with the time
factor defined on the local slab [0, Δt]; fields are evaluated at absolute
time ``slab_index * Δt + t``.

Field arguments may be a :class:`~ngo.fields.Field`, any callable mapping a
``(P, d)`` point array to ``P`` values, or a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
from scipy import sparse

from .discretization import Basis1D, QuadratureRule, TensorBasis, make_quadrature
from .errors import ConfigError, DomainError, RankDeficiencyError
from .fields import Field

__all__ = [
    "Quadratures",
    "make_quadratures",
    "Discretization",
    "AssembledOperator",
    "ParameterFields",
    "sample_field",
    "assemble_steady",
    "assemble_advection_diffusion",
    "assemble_space_time",
    "KroneckerTensors",
    "kronecker_tensors",
    "assemble_kronecker",
    "kronecker_diffusion",
    "project_L2",
    "assemble_poisson_1d",
    "supg_tau",
]


def sample_field(fld, points) -> np.ndarray:
    """Evaluate a field argument (Field, callable, constant or None) at points."""
    pts = np.atleast_2d(points)
    if fld is None:
        return np.zeros(pts.shape[0])
    if isinstance(fld, Field):
        return fld.value(pts)
    if callable(fld):
        return np.broadcast_to(np.asarray(fld(pts), dtype=float), (pts.shape[0],)).copy()
    return np.full(pts.shape[0], float(fld))


def _sample_grad(fld, points, h: float = 1e-6) -> np.ndarray:
    pts = np.atleast_2d(points)
    if fld is None or np.isscalar(fld):
        return np.zeros(pts.shape)
    if isinstance(fld, Field):
        return fld.grad(pts)
    out = np.empty(pts.shape)
    for k in range(pts.shape[1]):
        e = np.zeros(pts.shape[1])
        e[k] = h
        out[:, k] = (sample_field(fld, pts + e) - sample_field(fld, pts - e)) / (2 * h)
    return out


def _sample_vector(c, points) -> np.ndarray:
    pts = np.atleast_2d(points)
    if callable(c):
        return np.broadcast_to(np.asarray(c(pts), dtype=float), (pts.shape[0], 2)).copy()
    return np.tile(np.asarray(c, dtype=float).reshape(2), (pts.shape[0], 1))


@dataclass(frozen=True, eq=False)
class ParameterFields:
    """PDE coefficients and data for one problem instance.

    ``theta0``/``alpha`` describe the nonlinear family θ = θ₀ + α u.
    """

    theta: object = 1.0
    f: object = 0.0
    eta: object = 0.0
    g: object = 0.0
    c: object = None
    u0: object = None
    theta0: object = None
    alpha: float = 0.0


@dataclass(frozen=True, eq=False)
class Quadratures:
    """Rules for the interior, the Dirichlet and Neumann segments, and slab faces."""

    domain: QuadratureRule
    dirichlet: QuadratureRule
    neumann: QuadratureRule
    initial: QuadratureRule | None = None
    final: QuadratureRule | None = None

    @property
    def space_time(self) -> bool:
        return self.initial is not None


def make_quadratures(cells: int = 14, points: int = 4, kind: str = "gauss",
                     dt: float | None = None, time_points: int = 3) -> Quadratures:
    """Gauss rules on a ``cells × cells`` grid; with ``dt`` a single slab in time."""
    if dt is None:
        bounds, c, p = [(0.0, 1.0), (0.0, 1.0)], (cells, cells), (points, points)
    else:
        if not dt > 0:
            raise ConfigError("dt must be positive")
        bounds, c, p = [(0.0, dt), (0.0, 1.0), (0.0, 1.0)], (1, cells, cells), (time_points, points, points)
    mk = lambda region: make_quadrature(kind, c, p, region, bounds)  # noqa: E731
    if dt is None:
        return Quadratures(mk("domain"), mk("dirichlet"), mk("neumann"))
    return Quadratures(mk("domain"), mk("dirichlet"), mk("neumann"), mk("initial"), mk("final"))


def _mesh_info(basis) -> tuple[float, int]:
    """(h, degree) of the spatial factors used for penalties and SUPG."""
    b = basis.parent if getattr(basis, "parent", None) is not None else basis
    if not isinstance(b, TensorBasis):
        raise ConfigError("basis must be a tensor basis or a POD basis with a parent")
    hs, ps = [], []
    for fac in b.factors[-2:]:
        if fac.kind == "bspline":
            hs.append((fac.domain[1] - fac.domain[0]) / (fac.count - fac.degree))
        else:
            hs.append((fac.domain[1] - fac.domain[0]) / max(fac.count - 1, 1))
        ps.append(fac.degree)
    return float(min(hs)), int(max(ps))


def _gram(A, w, B):
    """``Aᵀ diag(w) B`` for dense or sparse ``A``, ``B``."""
    if sparse.issparse(A):
        return (A.T @ sparse.diags(w) @ B).tocsr()
    return A.T @ (w[:, None] * B)


def _rows(A, s):
    """``diag(s) A``."""
    if sparse.issparse(A):
        return (sparse.diags(s) @ A).tocsr()
    return s[:, None] * A


class Discretization:
    """Basis evaluations on a set of quadrature rules, cached for repeated assembly.

    Parameters
    ----------
    basis : TensorBasis or PodBasis
        Spatial ``(x, y)`` or space-time ``(t, x, y)`` basis.
    quads : Quadratures
    stabilization : float, optional
        Nitsche constant C_s; defaults to ``4 (p+1)^2 / h``.
    sparse : bool
        Store basis evaluations as CSR matrices (tensor bases only). Assembled
        matrices are then sparse as well; useful for fine bases.
    """

    def __init__(self, basis, quads: Quadratures, stabilization: float | None = None,
                 sparse: bool = False):
        self.basis = basis
        self.quads = quads
        self.sparse = bool(sparse)
        self.space_time = basis.dim == 3
        if self.space_time != quads.space_time:
            raise ConfigError("basis dimension does not match the quadrature set")
        if self.sparse and not isinstance(basis, TensorBasis):
            raise ConfigError("sparse evaluation needs a tensor basis")
        self.N = basis.count
        self.h, self.degree = _mesh_info(basis)
        self.C_s = float(stabilization) if stabilization is not None else 4.0 * (self.degree + 1) ** 2 / self.h

        dom = quads.domain
        self.pts, self.w = dom.points, dom.weights
        self.phi = self.eval(self.pts)
        self.gx, self.gy = self.eval(self.pts, "x"), self.eval(self.pts, "y")
        self.dphi_dt = self.eval(self.pts, "t") if self.space_time else None

        D = quads.dirichlet
        self.pts_D, self.w_D, self.n_D = D.points, D.weights, D.normals
        self.phi_D = self.eval(D.points)
        self.dn_D = (_rows(self.eval(D.points, "x"), D.normals[:, 0])
                     + _rows(self.eval(D.points, "y"), D.normals[:, 1]))

        Nr = quads.neumann
        self.pts_N, self.w_N, self.n_N = Nr.points, Nr.weights, Nr.normals
        self.phi_N = self.eval(Nr.points)

        if self.space_time:
            self.dt = float(dom.spec["bounds"][0][1] - dom.spec["bounds"][0][0])
            if not self.dt > 0:
                raise ConfigError("dt must be positive")
            self.pts_face, self.w_face = quads.initial.points[:, 1:], quads.initial.weights
            self.phi_init = self.eval(quads.initial.points)
            self.phi_final = self.eval(quads.final.points)
            self.M_lr = _dense(_gram(self.phi_init, self.w_face, self.phi_final))
            self.M_rr = _dense(_gram(self.phi_final, self.w_face, self.phi_final))
            self.final_integral = np.asarray(self.phi_final.T @ self.w_face)

    def eval(self, points, which: str | None = None):
        """Basis values or one first partial derivative (``"t"``, ``"x"``, ``"y"``)."""
        d = self.basis.dim
        deriv = [0] * d
        if which is not None:
            deriv[{"t": 0, "x": d - 2, "y": d - 1}[which]] = 1
        if self.sparse:
            return self.basis.eval_sparse(points, deriv)
        return self.basis.eval(points, deriv)

    @cached_property
    def laplacian(self):
        d = self.basis.dim
        out = 0
        for k in (d - 2, d - 1):
            deriv = [0] * d
            deriv[k] = 2
            out = out + (self.basis.eval_sparse(self.pts, deriv) if self.sparse
                         else self.basis.eval(self.pts, deriv))
        return out

    @property
    def grad(self) -> np.ndarray:
        """Spatial gradients at the domain points, shape ``(Q, N, 2)`` (dense only)."""
        return np.stack([_dense(self.gx), _dense(self.gy)], axis=-1)

    def shift(self, pts: np.ndarray, t0: float) -> np.ndarray:
        if not self.space_time or t0 == 0.0:
            return pts
        out = pts.copy()
        out[:, 0] += t0
        return out

    def evaluate(self, coeffs, points) -> np.ndarray:
        return self.basis.eval(points) @ coeffs


def _dense(A) -> np.ndarray:
    return A.toarray() if sparse.issparse(A) else np.asarray(A)


@dataclass(eq=False)
class AssembledOperator:
    """System matrix, right-hand side and auxiliary terms for one problem instance.

    ``nitsche_F``/``nitsche_d`` are stored separately and only enter
    :meth:`system` when ``stabilized=True``. Space-time operators also carry
    the slab mass matrices, the forcing-only rhs ``d_x``, the energy
    production vector ``h_x`` and the mass-law terms ``mass_c``/``mass_C_x``
    (``C = u_prev · final_integral + mass_C_x``).
    """

    F: np.ndarray
    d: np.ndarray
    nitsche_F: np.ndarray
    nitsche_d: np.ndarray
    C_s: float
    M_lr: np.ndarray | None = None
    M_rr: np.ndarray | None = None
    d_x: np.ndarray | None = None
    nitsche_dx: np.ndarray | None = None
    h_x: np.ndarray | None = None
    mass_c: np.ndarray | None = None
    mass_C_x: float | None = None
    extras: dict = field(default_factory=dict)

    def system(self, stabilized: bool = False) -> tuple[np.ndarray, np.ndarray]:
        if stabilized:
            return self.F + self.nitsche_F, self.d + self.nitsche_d
        return self.F, self.d

    def rhs_x(self, stabilized: bool = False) -> np.ndarray:
        return self.d_x + self.nitsche_dx if stabilized else self.d_x


def _check_theta(*arrays):
    for a in arrays:
        if a.size and (not np.all(np.isfinite(a)) or np.min(a) <= 0):
            raise DomainError("theta must be positive and finite at every quadrature point")


def _stiffness(disc: Discretization, wtheta: np.ndarray):
    return _gram(disc.gx, wtheta, disc.gx) + _gram(disc.gy, wtheta, disc.gy)


def assemble_steady(theta, disc: Discretization, f=0.0, eta=0.0, g=0.0,
                    C_s: float | None = None) -> AssembledOperator:
    """Steady diffusion operator.

    ``F_nm = ∫ θ ∇φ_m·∇ψ_n − ∫_ΓD θ (φ_m ∂_n ψ_n + ψ_n ∂_n φ_m)`` and
    ``d_n = ∫ ψ_n f + ∫_ΓN ψ_n η − ∫_ΓD g ∂_n ψ_n``; the Nitsche terms are
    ``C_s ∫_ΓD ψ θ φ`` and ``C_s ∫_ΓD ψ g``.
    """
    if disc.space_time:
        raise ConfigError("use assemble_space_time for space-time bases")
    C_s = disc.C_s if C_s is None else float(C_s)
    th, thD = sample_field(theta, disc.pts), sample_field(theta, disc.pts_D)
    _check_theta(th, thD)
    wD = disc.w_D * thD
    F = _stiffness(disc, disc.w * th)
    F = F - _gram(disc.dn_D, wD, disc.phi_D) - _gram(disc.phi_D, wD, disc.dn_D)
    gD = sample_field(g, disc.pts_D)
    d = (disc.phi.T @ (disc.w * sample_field(f, disc.pts))
         + disc.phi_N.T @ (disc.w_N * sample_field(eta, disc.pts_N))
         - disc.dn_D.T @ (disc.w_D * gD))
    nF = C_s * _gram(disc.phi_D, wD, disc.phi_D)
    nd = C_s * disc.phi_D.T @ (disc.w_D * gD)
    return AssembledOperator(F, d, nF, nd, C_s)


def supg_tau(speed: np.ndarray, theta: np.ndarray, h: float) -> np.ndarray:
    """Streamline parameter ``h/(2|c|) (coth Pe − 1/Pe)`` with ``Pe = |c| h / (2θ)``."""
    speed = np.asarray(speed, dtype=float)
    pe = speed * h / (2.0 * theta)
    xi = np.where(pe < 1e-3, pe / 3.0 - pe**3 / 45.0,
                  1.0 / np.tanh(np.maximum(pe, 1e-3)) - 1.0 / np.maximum(pe, 1e-3))
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(speed > 0, h / (2.0 * speed) * xi, 0.0)
    return tau


def assemble_advection_diffusion(theta, c, disc: Discretization, f=0.0, eta=0.0, g=0.0,
                                 supg: bool = False, gamma: float = -1.0,
                                 penalty: float | None = None) -> AssembledOperator:
    """Advection-diffusion operator in the Bazilevs-Hughes weak form.

    With ``supg=False`` the streamline-diffusion and Dirichlet penalty terms
    are left out (the operator handed to NGOs). The penalty ``C/h`` defaults
    to the Nitsche constant of ``disc``. ``gamma`` selects the symmetric
    (+1) or skew (−1) Dirichlet consistency term.
    """
    if disc.space_time:
        raise ConfigError("advection-diffusion is steady")
    pen = disc.C_s if penalty is None else float(penalty)
    th, thD = sample_field(theta, disc.pts), sample_field(theta, disc.pts_D)
    _check_theta(th, thD)
    cq = _sample_vector(c, disc.pts)
    cD = np.einsum("qd,qd->q", _sample_vector(c, disc.pts_D), disc.n_D)
    cN = np.einsum("qd,qd->q", _sample_vector(c, disc.pts_N), disc.n_N)
    fq, gD = sample_field(f, disc.pts), sample_field(g, disc.pts_D)
    inflow = cD < 0

    F = _stiffness(disc, disc.w * th)
    cgrad = _rows(disc.gx, cq[:, 0]) + _rows(disc.gy, cq[:, 1])  # c·∇φ
    F = F - _gram(cgrad, disc.w, disc.phi)
    wD = disc.w_D
    F = F - _gram(disc.phi_D, wD * thD, disc.dn_D) + _gram(disc.phi_D, wD * cD, disc.phi_D)
    F = F - gamma * _gram(disc.dn_D, wD * thD, disc.phi_D)
    F = F - _gram(disc.phi_D, wD * cD * inflow, disc.phi_D)
    F = F + _gram(disc.phi_N, disc.w_N * np.maximum(cN, 0.0), disc.phi_N)

    d = (disc.phi.T @ (disc.w * fq)
         + disc.phi_N.T @ (disc.w_N * sample_field(eta, disc.pts_N))
         - gamma * disc.dn_D.T @ (wD * gD)
         - disc.phi_D.T @ (wD * inflow * cD * gD / thD))

    extras = {}
    if supg:
        gth = _sample_grad(theta, disc.pts)[:, -2:]
        Lu = (_rows(disc.laplacian, -th) - _rows(disc.gx, gth[:, 0]) - _rows(disc.gy, gth[:, 1])
              + cgrad)
        tau = supg_tau(np.linalg.norm(cq, axis=1), th, disc.h)
        wt = disc.w * tau
        F = F + _gram(cgrad, wt, Lu)
        d += cgrad.T @ (wt * fq)
        F = F + pen * _gram(disc.phi_D, wD * thD, disc.phi_D)
        d += pen * disc.phi_D.T @ (wD * gD)
        extras["tau"] = tau
    zero = sparse.csr_matrix(F.shape) if sparse.issparse(F) else np.zeros_like(F)
    return AssembledOperator(F, d, zero, np.zeros_like(d), pen, extras=extras)


def assemble_space_time(theta, disc: Discretization, slab_index: int = 0, f=0.0, eta=0.0,
                        g=0.0, u_prev=None, u0=None, C_s: float | None = None) -> AssembledOperator:
    """Space-time slab operator for ∂_t u − ∇·(θ∇u) = f.

    ``F = ∫∫ (−φ_m ∂_t ψ_n + θ ∇φ_m·∇ψ_n) − ∫∫_ΓD θ (φ_m ∂_n ψ_n + ψ_n ∂_n φ_m)
    + ∫ ψ_n(Δt) φ_m(Δt)``. The initial trace enters ``d`` through
    ``M_lr @ u_prev`` (coefficients of the previous slab) or, on the first
    slab, through ``∫ ψ_n(0) u0`` when a field ``u0`` is given.
    """
    if not disc.space_time:
        raise ConfigError("assemble_space_time needs a (t, x, y) basis")
    if not disc.dt > 0:
        raise ConfigError("dt must be positive")
    C_s = disc.C_s if C_s is None else float(C_s)
    t0 = slab_index * disc.dt
    P, PD, PN = disc.shift(disc.pts, t0), disc.shift(disc.pts_D, t0), disc.shift(disc.pts_N, t0)
    th, thD = sample_field(theta, P), sample_field(theta, PD)
    _check_theta(th, thD)
    wD = disc.w_D * thD

    F = _stiffness(disc, disc.w * th) - _gram(disc.dphi_dt, disc.w, disc.phi)
    F = F - _gram(disc.dn_D, wD, disc.phi_D) - _gram(disc.phi_D, wD, disc.dn_D)
    F = F + (sparse.csr_matrix(disc.M_rr) if sparse.issparse(F) else disc.M_rr)

    fq, eN, gD = sample_field(f, P), sample_field(eta, PN), sample_field(g, PD)
    src = disc.phi.T @ (disc.w * fq) + disc.phi_N.T @ (disc.w_N * eN)
    gw = disc.w_D * gD
    d_x = src - disc.dn_D.T @ gw
    d = d_x.copy()
    if u_prev is not None:
        d += disc.M_lr @ np.asarray(u_prev, dtype=float)
    elif u0 is not None:
        face = np.column_stack([np.full(disc.w_face.size, t0), disc.pts_face])
        d += disc.phi_init.T @ (disc.w_face * sample_field(u0, face))

    nF = C_s * _gram(disc.phi_D, wD, disc.phi_D)
    ndx = C_s * disc.phi_D.T @ gw
    h_x = src + C_s * disc.phi_D.T @ gw - disc.dn_D.T @ gw
    mass_c = disc.final_integral - disc.dn_D.T @ wD
    mass_C_x = float(disc.w @ fq + disc.w_N @ eN)
    return AssembledOperator(F, d, nF, ndx.copy(), C_s, disc.M_lr, disc.M_rr, d_x, ndx,
                             h_x, mass_c, mass_C_x)


def project_L2(u, basis, quad: QuadratureRule, rcond: float = 1e-13):
    """Discrete L² projection onto ``basis``.

    ``u`` is a field argument or an array of samples on ``quad.points``.
    Returns ``(coefficients, relative_error)``.
    """
    Phi = basis.eval(quad.points)
    if Phi.shape[1] > quad.size:
        raise RankDeficiencyError("quadrature has fewer points than basis functions")
    if isinstance(u, np.ndarray) and u.ndim == 1 and u.size == quad.size:
        uq = u.astype(float)
    else:
        uq = sample_field(u, quad.points)
    M = Phi.T @ (quad.weights[:, None] * Phi)
    ev = np.linalg.eigvalsh(M)
    if ev[0] <= rcond * ev[-1]:
        raise RankDeficiencyError(f"mass matrix is singular (eigenvalue ratio {ev[0] / ev[-1]:.2e})")
    coef = sla.cho_solve(sla.cho_factor(M), Phi.T @ (quad.weights * uq))
    r = uq - Phi @ coef
    nu = quad.weights @ uq**2
    err = float(np.sqrt(quad.weights @ r**2 / nu)) if nu > 0 else 0.0
    return coef, err


def assemble_poisson_1d(basis: Basis1D, rule: QuadratureRule, f=None):
    """Stiffness ``∫ φ_n' φ_m'`` for −u'' = f with u(0)=u(1)=0.

    The two end functions of the clamped basis are removed so the remaining
    functions vanish at the boundary. Returns ``(K, keep)`` or
    ``(K, d, keep)`` when ``f`` is given, where ``keep`` lists the retained
    function indices.
    """
    x = rule.points[:, 0]
    keep = np.arange(1, basis.count - 1)
    D = basis.eval(x, 1)[:, keep]
    K = D.T @ (rule.weights[:, None] * D)
    if f is None:
        return K, keep
    V = basis.eval(x)[:, keep]
    return K, V.T @ (rule.weights * sample_field(f, rule.points)), keep


# Kronecker-factorized assembly ------------------------------------------------

def _exact_rule_1d(fac: Basis1D, npts: int):
    if fac.kind == "bspline":
        brk = np.unique(fac.knots)
    else:
        brk = np.asarray(fac.domain)
    ref, refw = np.polynomial.legendre.leggauss(npts)
    h = np.diff(brk)
    x = (brk[:-1, None] + h[:, None] * 0.5 * (ref[None, :] + 1)).ravel()
    w = (h[:, None] * 0.5 * refw[None, :]).ravel()
    return x, w


def _triple(a, b, c, w):
    """T[j, n, m] = Σ_q w a_j b_n c_m."""
    return np.einsum("q,qj,qn,qm->jnm", w, a, b, c, optimize=True)


@dataclass(frozen=True, eq=False)
class KroneckerTensors:
    """Precomputed 1D integrals for a ``(t, x, y)`` or ``(x, y)`` tensor basis.

    Triple tensors are indexed ``[j, n, m]`` for (coefficient basis ψ_j,
    test ψ_n, trial φ_m). ``xb`` collects the Dirichlet faces x = 0, 1.
    """

    shape: tuple[int, ...]
    x0: np.ndarray
    x1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    xb: np.ndarray
    mx: np.ndarray
    my: np.ndarray
    t0: np.ndarray | None = None
    dtm: np.ndarray | None = None
    tfinal: np.ndarray | None = None

    @property
    def space_time(self) -> bool:
        return self.t0 is not None


def kronecker_tensors(basis: TensorBasis) -> KroneckerTensors:
    """Compute the 1D factor integrals of ``basis`` exactly by Gauss quadrature."""
    if not isinstance(basis, TensorBasis) or basis.dim not in (2, 3):
        raise ConfigError("Kronecker assembly needs a 2- or 3-factor tensor basis")
    facs = basis.factors
    fx, fy = facs[-2], facs[-1]
    out = {}
    for name, fac in (("x", fx), ("y", fy)):
        x, w = _exact_rule_1d(fac, 3 * fac.degree // 2 + 2)
        v, dv = fac.eval(x), fac.eval(x, 1)
        out[name + "0"] = _triple(v, v, v, w)
        out[name + "1"] = _triple(v, dv, dv, w)
        out["m" + name] = v.T @ (w[:, None] * v)
    xb = 0.0
    for side, nx in ((fx.domain[0], -1.0), (fx.domain[1], 1.0)):
        v, dv = fx.eval([side])[0], fx.eval([side], 1)[0]
        xb = xb + nx * v[:, None, None] * (dv[None, :, None] * v[None, None, :]
                                            + v[None, :, None] * dv[None, None, :])
    out["xb"] = xb
    if basis.dim == 3:
        ft = facs[0]
        t, w = _exact_rule_1d(ft, 3 * ft.degree // 2 + 2)
        v, dv = ft.eval(t), ft.eval(t, 1)
        out["t0"] = _triple(v, v, v, w)
        out["dtm"] = -(dv.T @ (w[:, None] * v))  # −∫ ∂_t ψ_n φ_m
        e = ft.eval([ft.domain[1]])[0]
        out["tfinal"] = np.outer(e, e)
    return KroneckerTensors(basis.shape, **out)


def _kron_term(theta_hat: np.ndarray | None, mats) -> np.ndarray:
    """``Σ_j θ̂_j (⊗_k T_k)[j, n, m]`` for triple tensors, or ``⊗_k T_k`` for matrices."""
    d = len(mats)
    jj, nn, mm = "abc"[:d], "ijk"[:d], "pqr"[:d]
    if theta_hat is None:
        subs, ops = [nn[k] + mm[k] for k in range(d)], list(mats)
    else:
        subs = [jj] + [jj[k] + nn[k] + mm[k] for k in range(d)]
        ops = [theta_hat] + list(mats)
    R = np.einsum(",".join(subs) + "->" + nn + mm, *ops, optimize=True)
    n = int(np.prod(R.shape[:d]))
    return R.reshape(n, n)


def kronecker_diffusion(theta_hat, tensors: KroneckerTensors) -> np.ndarray:
    """Diffusion block ``Σ_j θ̂_j ∫ ψ_j ∇φ_m·∇ψ_n`` from factor tensors."""
    th = np.asarray(theta_hat, dtype=float).reshape(tensors.shape)
    if tensors.space_time:
        return (_kron_term(th, [tensors.t0, tensors.x1, tensors.y0])
                + _kron_term(th, [tensors.t0, tensors.x0, tensors.y1]))
    return _kron_term(th, [tensors.x1, tensors.y0]) + _kron_term(th, [tensors.x0, tensors.y1])


def assemble_kronecker(theta_hat, tensors: KroneckerTensors) -> np.ndarray:
    """Full unstabilized system matrix from θ coefficients on the tensor basis.

    Matches :func:`assemble_space_time` (or :func:`assemble_steady`) exactly
    when θ lies in the span of the basis.
    """
    th = np.asarray(theta_hat, dtype=float)
    N = int(np.prod(tensors.shape))
    if th.size != N:
        raise ConfigError(f"theta coefficients have size {th.size}, expected {N}")
    th = th.reshape(tensors.shape)
    F = kronecker_diffusion(th, tensors)
    if tensors.space_time:
        F -= _kron_term(th, [tensors.t0, tensors.xb, tensors.y0])
        F += _kron_term(None, [tensors.dtm, tensors.mx, tensors.my])
        F += _kron_term(None, [tensors.tfinal, tensors.mx, tensors.my])
    else:
        F -= _kron_term(th, [tensors.xb, tensors.y0])
    return F
