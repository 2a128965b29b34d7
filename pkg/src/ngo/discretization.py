"""Function bases and quadrature rules on the unit square and space-time slabs.

Bases are products of 1D factors. The flat index of a tensor-product basis
function follows C order over the factors (last factor fastest), so for a
space-time basis ``(t, x, y)`` the time index is the slowest one.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.polynomial import chebyshev as npcheb
from numpy.polynomial import legendre as nplegendre
from scipy import sparse
from scipy.interpolate import BSpline

__all__ = [
    "Basis1D",
    "TensorBasis",
    "PodBasis",
    "RestrictedBasis",
    "QuadratureRule",
    "make_bspline_basis",
    "make_chebyshev_basis",
    "make_tensor_basis",
    "make_pod_basis",
    "make_quadrature",
    "basis_from_dict",
    "BOUNDARY_SEGMENTS",
]


@dataclass(frozen=True, eq=False)
class Basis1D:
    """A one-dimensional function basis on ``domain``.

    ``kind`` is ``"bspline"`` (clamped uniform knots) or ``"chebyshev"``
    (first-kind polynomials mapped to ``domain``).
    """

    kind: str
    count: int
    degree: int
    domain: tuple[float, float] = (0.0, 1.0)
    knots: np.ndarray | None = None
    _spline: BSpline | None = field(default=None, repr=False)
    _cheb_coefs: tuple[np.ndarray, ...] | None = field(default=None, repr=False)

    def eval(self, x, deriv: int = 0) -> np.ndarray:
        """Values (or ``deriv``-th derivatives) at ``x``, shape ``(len(x), count)``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.kind == "bspline":
            if deriv > self.degree:
                return np.zeros((x.size, self.count))
            return np.asarray(self._spline(x, nu=deriv))
        if self.kind == "chebyshev":
            a, b = self.domain
            s = 2.0 * (x - a) / (b - a) - 1.0
            coefs = self._cheb_coefs[deriv] if deriv < len(self._cheb_coefs) else None
            if coefs is None:
                return np.zeros((x.size, self.count))
            return npcheb.chebval(s, coefs).T * (2.0 / (b - a)) ** deriv
        raise ValueError(f"unknown basis kind {self.kind!r}")

    def eval_support(self, x, deriv: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Column indices and values of the functions that can be nonzero at ``x``.

        Returns two ``(len(x), k)`` arrays with ``k = degree + 1`` for
        B-splines and ``k = count`` for global bases.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        vals = self.eval(x, deriv)
        if self.kind != "bspline":
            return np.tile(np.arange(self.count), (x.size, 1)), vals
        p = self.degree
        span = np.clip(np.searchsorted(self.knots, x, side="right") - 1, p, self.count - 1)
        cols = span[:, None] - p + np.arange(p + 1)[None, :]
        return cols, np.take_along_axis(vals, cols, axis=1)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "count": self.count, "degree": self.degree,
                "domain": list(self.domain)}


def make_bspline_basis(n: int, degree: int, domain=(0.0, 1.0)) -> Basis1D:
    """Clamped B-spline basis with ``n`` functions and uniform interior knots.

    >>> make_bspline_basis(4, 3).eval([0.5]).round(4).tolist()
    [[0.125, 0.375, 0.375, 0.125]]
    """
    if degree < 0:
        raise ValueError("degree must be non-negative")
    if n < degree + 1:
        raise ValueError(f"need n >= degree+1, got n={n}, degree={degree}")
    a, b = map(float, domain)
    interior = np.linspace(a, b, n - degree + 1)
    knots = np.concatenate([np.full(degree, a), interior, np.full(degree, b)])
    spline = BSpline(knots, np.eye(n), degree, extrapolate=True)
    return Basis1D("bspline", n, degree, (a, b), knots, spline)


def make_chebyshev_basis(n: int, domain=(0.0, 1.0)) -> Basis1D:
    """Modal Chebyshev basis T_0..T_{n-1} mapped to ``domain``."""
    if n < 1:
        raise ValueError("n must be positive")
    coefs = [np.eye(n)]
    while len(coefs) <= n:
        coefs.append(npcheb.chebder(coefs[-1], axis=0) if coefs[-1].shape[0] > 1
                      else np.zeros((1, n)))
    return Basis1D("chebyshev", n, n - 1, tuple(map(float, domain)), None, None, tuple(coefs))


def _khatri_rao(mats: Sequence[np.ndarray]) -> np.ndarray:
    out = mats[0]
    for m in mats[1:]:
        out = (out[:, :, None] * m[:, None, :]).reshape(out.shape[0], -1)
    return out


@dataclass(frozen=True, eq=False)
class TensorBasis:
    """Tensor product of 1D bases; flat index is C order (last factor fastest)."""

    factors: tuple[Basis1D, ...]

    def __post_init__(self):
        if not 1 <= len(self.factors) <= 3:
            raise ValueError("a tensor basis needs 1 to 3 factors")

    @property
    def dim(self) -> int:
        return len(self.factors)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(f.count for f in self.factors)

    @property
    def count(self) -> int:
        return int(np.prod(self.shape))

    def multi_index(self, m: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(m, self.shape))

    def flat_index(self, idx: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(idx), self.shape))

    def eval(self, points, deriv: Sequence[int] | None = None) -> np.ndarray:
        """Evaluate all functions (or a mixed partial derivative) at ``points``.

        ``points`` has shape ``(P, dim)``; ``deriv`` gives the derivative order
        per factor. Returns ``(P, count)``.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.dim:
            raise ValueError(f"points must have {self.dim} columns")
        deriv = (0,) * self.dim if deriv is None else tuple(deriv)
        return _khatri_rao([f.eval(pts[:, i], deriv[i]) for i, f in enumerate(self.factors)])

    def eval_sparse(self, points, deriv: Sequence[int] | None = None) -> sparse.csr_matrix:
        """As :meth:`eval`, returned as a CSR matrix built from local supports."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        deriv = (0,) * self.dim if deriv is None else tuple(deriv)
        cols = np.zeros((pts.shape[0], 1), dtype=np.int64)
        vals = np.ones((pts.shape[0], 1))
        for i, f in enumerate(self.factors):
            c, v = f.eval_support(pts[:, i], deriv[i])
            cols = (cols[:, :, None] * f.count + c[:, None, :]).reshape(pts.shape[0], -1)
            vals = (vals[:, :, None] * v[:, None, :]).reshape(pts.shape[0], -1)
        rows = np.repeat(np.arange(pts.shape[0]), cols.shape[1])
        return sparse.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(pts.shape[0], self.count))

    def grad(self, points) -> np.ndarray:
        """Gradients, shape ``(P, count, dim)`` (all coordinates, incl. time)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        vals = [f.eval(pts[:, i]) for i, f in enumerate(self.factors)]
        ders = [f.eval(pts[:, i], 1) for i, f in enumerate(self.factors)]
        comps = []
        for k in range(self.dim):
            comps.append(_khatri_rao([ders[i] if i == k else vals[i] for i in range(self.dim)]))
        return np.stack(comps, axis=-1)

    def laplacian(self, points, dims: Sequence[int] | None = None) -> np.ndarray:
        dims = range(self.dim) if dims is None else dims
        out = 0.0
        for k in dims:
            d = [0] * self.dim
            d[k] = 2
            out = out + self.eval(points, d)
        return out

    def to_dict(self) -> dict:
        return {"type": "tensor", "factors": [f.to_dict() for f in self.factors]}


def make_tensor_basis(factors: Sequence[Basis1D]) -> TensorBasis:
    if len(factors) == 0:
        raise ValueError("empty factor list")
    return TensorBasis(tuple(factors))


def basis_from_dict(desc: dict) -> TensorBasis:
    """Rebuild a tensor basis from its JSON descriptor."""
    factors = []
    for f in desc["factors"]:
        dom = tuple(f.get("domain", (0.0, 1.0)))
        if f["kind"] == "bspline":
            factors.append(make_bspline_basis(int(f["count"]), int(f["degree"]), dom))
        elif f["kind"] == "chebyshev":
            factors.append(make_chebyshev_basis(int(f["count"]), dom))
        else:
            raise ValueError(f"unknown basis kind {f['kind']!r}")
    return make_tensor_basis(factors)


@dataclass(frozen=True, eq=False)
class PodBasis:
    """Leading POD modes, orthonormal in the discrete L2 inner product of a rule.

    With a parent basis the modes are stored as parent coefficients
    (``coefficients``, shape ``(parent.count, count)``) and can be evaluated
    anywhere. Without one only the values on the snapshot rule are known.
    """

    values: np.ndarray
    singular_values: np.ndarray
    parent: TensorBasis | None = None
    coefficients: np.ndarray | None = None
    deficient: bool = False

    @property
    def count(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.parent.dim if self.parent is not None else None

    def eval(self, points, deriv=None) -> np.ndarray:
        if self.parent is None:
            raise NotImplementedError("POD modes without a parent basis are only known on their rule")
        return self.parent.eval(points, deriv) @ self.coefficients

    def grad(self, points) -> np.ndarray:
        if self.parent is None:
            raise NotImplementedError("POD modes without a parent basis are only known on their rule")
        return np.einsum("pnd,nk->pkd", self.parent.grad(points), self.coefficients)

    def laplacian(self, points, dims=None) -> np.ndarray:
        return self.parent.laplacian(points, dims) @ self.coefficients


@dataclass(frozen=True, eq=False)
class RestrictedBasis:
    """The functions ``keep`` of a parent basis, e.g. a clamped 1D basis without its end functions.

    Points of shape ``(P, 1)`` are accepted for 1D parents.
    """

    parent: object
    keep: np.ndarray

    @property
    def count(self) -> int:
        return len(self.keep)

    def eval(self, points, *args, **kw) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if isinstance(self.parent, Basis1D) and pts.ndim == 2:
            pts = pts[:, 0]
        return self.parent.eval(pts, *args, **kw)[:, self.keep]


def make_pod_basis(snapshots, rule: "QuadratureRule", count: int,
                   parent: TensorBasis | None = None, rtol: float = 1e-12) -> PodBasis:
    """POD modes of ``snapshots`` (shape ``(n_snapshots, Q)``) sampled on ``rule``.

    If fewer than ``count`` singular values exceed ``rtol`` times the largest
    one, the available modes are returned with ``deficient=True``.
    """
    S = np.atleast_2d(np.asarray(snapshots, dtype=float))
    if count > S.shape[0]:
        raise ValueError("count exceeds the number of snapshots")
    w = rule.weights
    if parent is None:
        sw = np.sqrt(w)
        U, sig, _ = np.linalg.svd(sw[:, None] * S.T, full_matrices=False)
        modes_of = lambda k: U[:, :k] / sw[:, None]  # noqa: E731
    else:
        Phi = parent.eval(rule.points)
        M = Phi.T @ (w[:, None] * Phi)
        L = np.linalg.cholesky(M)
        C = np.linalg.solve(M, Phi.T @ (w[:, None] * S.T))
        U, sig, _ = np.linalg.svd(L.T @ C, full_matrices=False)
        coef_of = lambda k: np.linalg.solve(L.T, U[:, :k])  # noqa: E731
    rank = int(np.sum(sig > rtol * sig[0])) if sig.size and sig[0] > 0 else 0
    k = min(count, rank)
    deficient = k < count
    if deficient:
        warnings.warn(f"snapshot rank {rank} below requested POD size {count}", stacklevel=2)
    if parent is None:
        return PodBasis(modes_of(k), sig, None, None, deficient)
    coefs = coef_of(k)
    return PodBasis(Phi @ coefs, sig, parent, coefs, deficient)


# name -> (spatial axis offset from the end, fixed side, outward normal)
BOUNDARY_SEGMENTS = {
    "left": (-2, 0, (-1.0, 0.0)),
    "right": (-2, 1, (1.0, 0.0)),
    "bottom": (-1, 0, (0.0, -1.0)),
    "top": (-1, 1, (0.0, 1.0)),
}
_GROUPS = {"dirichlet": ("left", "right"), "neumann": ("bottom", "top")}


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Points, positive weights and (on spatial boundaries) outward unit normals."""

    points: np.ndarray
    weights: np.ndarray
    normals: np.ndarray | None = None
    region: str = "domain"
    spec: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.weights.size

    def integrate(self, values) -> np.ndarray:
        return np.tensordot(self.weights, np.asarray(values), axes=(0, 0))


def _rule_1d(kind: str, cells: int, npts: int, lo: float, hi: float):
    if cells < 1 or npts < 1:
        raise ValueError("cell and point counts must be positive")
    edges = np.linspace(lo, hi, cells + 1)
    if kind == "gauss":
        ref, refw = nplegendre.leggauss(npts)
        ref = 0.5 * (ref + 1.0)
        refw = 0.5 * refw
    elif kind == "uniform":
        ref = (np.arange(npts) + 0.5) / npts
        refw = np.full(npts, 1.0 / npts)
    else:
        raise ValueError(f"unknown quadrature kind {kind!r}")
    h = np.diff(edges)
    pts = (edges[:-1, None] + h[:, None] * ref[None, :]).ravel()
    wts = (h[:, None] * refw[None, :]).ravel()
    return pts, wts


def _tensor_rule(rules):
    grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    wgrids = np.meshgrid(*[r[1] for r in rules], indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    wts = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return pts, wts


def make_quadrature(kind: str, cells_per_dim, points_per_cell, region: str = "domain",
                    bounds=None) -> QuadratureRule:
    """Composite tensor rule over a box or one of its faces.

    ``bounds`` defaults to the unit square (or unit interval/cube, following
    the length of ``cells_per_dim``). The last two coordinates are spatial;
    for a space-time box ``[(0, dt), (0, 1), (0, 1)]`` the first is time.

    Regions: ``domain``, the spatial segments ``left``/``right``/``bottom``/
    ``top``, the groups ``dirichlet`` (left+right) and ``neumann``
    (bottom+top), and for space-time boxes ``initial``/``final``.
    """
    cells = np.atleast_1d(cells_per_dim).astype(int)
    if bounds is None:
        bounds = [(0.0, 1.0)] * (cells.size if cells.size > 1 else 2)
    dim = len(bounds)
    cells = np.broadcast_to(cells, (dim,)) if cells.size == 1 else cells
    npts = np.broadcast_to(np.atleast_1d(points_per_cell).astype(int), (dim,))
    if np.any(cells < 1) or np.any(npts < 1):
        raise ValueError("cell and point counts must be positive")
    spec = {"kind": kind, "cells_per_dim": cells.tolist(), "points_per_cell": npts.tolist(),
            "region": region, "bounds": [list(map(float, b)) for b in bounds]}
    rules = [_rule_1d(kind, int(cells[i]), int(npts[i]), *bounds[i]) for i in range(dim)]

    if region == "domain":
        pts, wts = _tensor_rule(rules)
        return QuadratureRule(pts, wts, None, region, spec)
    if region in _GROUPS:
        parts = [make_quadrature(kind, cells, npts, seg, bounds) for seg in _GROUPS[region]]
        return QuadratureRule(np.concatenate([p.points for p in parts]),
                              np.concatenate([p.weights for p in parts]),
                              np.concatenate([p.normals for p in parts]), region, spec)
    if region in BOUNDARY_SEGMENTS:
        if dim < 2:
            raise ValueError("boundary segments need at least two spatial dimensions")
        axis, side, normal = BOUNDARY_SEGMENTS[region]
        axis = dim + axis
        value = bounds[axis][side]
        sub = [r for i, r in enumerate(rules) if i != axis]
        pts, wts = _tensor_rule(sub)
        pts = np.insert(pts, axis, value, axis=1)
        normals = np.tile(np.asarray(normal), (wts.size, 1))
        return QuadratureRule(pts, wts, normals, region, spec)
    if region in ("initial", "final"):
        if dim != 3:
            raise ValueError(f"region {region!r} needs a space-time box")
        value = bounds[0][0 if region == "initial" else 1]
        pts, wts = _tensor_rule(rules[1:])
        pts = np.insert(pts, 0, value, axis=1)
        return QuadratureRule(pts, wts, None, region, spec)
    raise ValueError(f"unknown region {region!r}")
