"""Scalar fields with analytic gradients and spatial Laplacians.

Fields are evaluated on point arrays of shape ``(P, d)``. For space-time
fields ``d = 3`` and the first coordinate is time; the spatial coordinates
are always the last two. ``laplacian`` sums second derivatives over the
spatial coordinates only.

Gaussian random fields are synthesized with random Fourier features so that
derivatives are exact, which is what makes manufactured data residual-free.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize

__all__ = [
    "Field",
    "Constant",
    "Rff",
    "Affine",
    "Sum",
    "Product",
    "Map",
    "Explicit",
    "GrfSpec",
    "make_grf",
    "grf_sample",
    "sup_norm",
    "field_extremes",
    "shift_cache",
]

_SHIFT_CACHE: dict | None = None


@contextmanager
def shift_cache():
    """Reuse random-feature trig values for point sets that differ by a constant shift.

    Inside the block, evaluating an :class:`Rff` on ``P + δ`` after ``P`` costs
    matrix-vector products instead of new trig evaluations. Meant for
    time-slab rollouts, where every slab re-evaluates the same rule shifted
    in time. The cache is dropped on exit.
    """
    global _SHIFT_CACHE
    outer = _SHIFT_CACHE
    _SHIFT_CACHE = {} if outer is None else outer
    try:
        yield
    finally:
        if outer is None:
            _SHIFT_CACHE = None


def _pts(points) -> np.ndarray:
    return np.atleast_2d(np.asarray(points, dtype=float))


class Field:
    """Base class. Subclasses implement ``value``, ``grad`` and ``hess_diag``."""

    def value(self, points) -> np.ndarray:
        raise NotImplementedError

    def grad(self, points) -> np.ndarray:
        raise NotImplementedError

    def hess_diag(self, points) -> np.ndarray:
        """Unmixed second derivatives, shape ``(P, d)``."""
        raise NotImplementedError

    def derivs(self, points):
        """``(value, grad, hess_diag)`` in one call; subclasses may share work."""
        return self.value(points), self.grad(points), self.hess_diag(points)

    def laplacian(self, points) -> np.ndarray:
        return self.hess_diag(points)[:, -2:].sum(axis=1)

    def __call__(self, points) -> np.ndarray:
        return self.value(points)

    def __add__(self, other: "Field") -> "Field":
        return Sum(self, other)

    def __mul__(self, other: "Field") -> "Field":
        return Product(self, other)


@dataclass(frozen=True, eq=False)
class Constant(Field):
    c: float
    dim: int = 2

    def value(self, points):
        return np.full(_pts(points).shape[0], float(self.c))

    def grad(self, points):
        return np.zeros(_pts(points).shape)

    def hess_diag(self, points):
        return np.zeros(_pts(points).shape)


@dataclass(frozen=True, eq=False)
class Rff(Field):
    """``sqrt(2/M) Σ_k cos(ω_k·x + b_k)``."""

    omega: np.ndarray
    phase: np.ndarray

    @property
    def amp(self) -> float:
        return float(np.sqrt(2.0 / self.phase.size))

    def _arg(self, points):
        return _pts(points) @ self.omega.T + self.phase

    def _cached(self, points):
        """``(C, S, cos δ, sin δ)`` with ``cos(arg) = C cos δ − S sin δ`` when cached, else None."""
        if _SHIFT_CACHE is None:
            return None
        pts = _pts(points)
        # spatial columns must match exactly; leading columns may carry a constant shift
        key = (id(self), pts.shape, pts[:, -2:].tobytes())
        hit = _SHIFT_CACHE.get(key)
        if hit is None:
            arg = pts @ self.omega.T + self.phase
            hit = (pts[:, :-2].copy(), np.cos(arg), np.sin(arg), self)
            _SHIFT_CACHE[key] = hit
        lead, C, S, _ = hit
        d = pts[:, :-2] - lead
        if d.size and np.abs(d - d[0]).max() > 1e-12:
            return None
        delta = self.omega[:, :-2] @ d[0] if d.size else np.zeros(self.phase.size)
        return C, S, np.cos(delta), np.sin(delta)

    def value(self, points):
        c = self._cached(points)
        if c is not None:
            C, S, cd, sd = c
            return self.amp * (C @ cd - S @ sd)
        return self.amp * np.cos(self._arg(points)).sum(axis=1)

    def grad(self, points):
        c = self._cached(points)
        if c is not None:
            C, S, cd, sd = c
            return -self.amp * (S @ (cd[:, None] * self.omega) + C @ (sd[:, None] * self.omega))
        return -self.amp * np.sin(self._arg(points)) @ self.omega

    def hess_diag(self, points):
        c = self._cached(points)
        if c is not None:
            C, S, cd, sd = c
            w2 = self.omega**2
            return -self.amp * (C @ (cd[:, None] * w2) - S @ (sd[:, None] * w2))
        return -self.amp * np.cos(self._arg(points)) @ (self.omega**2)

    def derivs(self, points):
        if _SHIFT_CACHE is not None:
            return self.value(points), self.grad(points), self.hess_diag(points)
        arg = self._arg(points)
        c, s = np.cos(arg), np.sin(arg)
        a = self.amp
        return a * c.sum(axis=1), -a * s @ self.omega, -a * c @ (self.omega**2)


@dataclass(frozen=True, eq=False)
class Affine(Field):
    """``offset + scale * field``."""

    field: Field
    offset: float = 0.0
    scale: float = 1.0

    def value(self, points):
        return self.offset + self.scale * self.field.value(points)

    def grad(self, points):
        return self.scale * self.field.grad(points)

    def hess_diag(self, points):
        return self.scale * self.field.hess_diag(points)

    def derivs(self, points):
        v, g, h = self.field.derivs(points)
        return self.offset + self.scale * v, self.scale * g, self.scale * h


@dataclass(frozen=True, eq=False)
class Sum(Field):
    a: Field
    b: Field

    def value(self, points):
        return self.a.value(points) + self.b.value(points)

    def grad(self, points):
        return self.a.grad(points) + self.b.grad(points)

    def hess_diag(self, points):
        return self.a.hess_diag(points) + self.b.hess_diag(points)

    def derivs(self, points):
        av, ag, ah = self.a.derivs(points)
        bv, bg, bh = self.b.derivs(points)
        return av + bv, ag + bg, ah + bh


@dataclass(frozen=True, eq=False)
class Product(Field):
    a: Field
    b: Field

    def value(self, points):
        return self.a.value(points) * self.b.value(points)

    def grad(self, points):
        return (self.a.grad(points) * self.b.value(points)[:, None]
                + self.a.value(points)[:, None] * self.b.grad(points))

    def hess_diag(self, points):
        return self.derivs(points)[2]

    def derivs(self, points):
        av, ag, ah = self.a.derivs(points)
        bv, bg, bh = self.b.derivs(points)
        return (av * bv, ag * bv[:, None] + av[:, None] * bg,
                ah * bv[:, None] + 2.0 * ag * bg + av[:, None] * bh)


@dataclass(frozen=True, eq=False)
class Map(Field):
    """Pointwise ``fn(field)`` with first and second derivatives ``d1``, ``d2``."""

    field: Field
    fn: Callable[[np.ndarray], np.ndarray]
    d1: Callable[[np.ndarray], np.ndarray]
    d2: Callable[[np.ndarray], np.ndarray]

    def value(self, points):
        return self.fn(self.field.value(points))

    def grad(self, points):
        return self.d1(self.field.value(points))[:, None] * self.field.grad(points)

    def hess_diag(self, points):
        return self.derivs(points)[2]

    def derivs(self, points):
        v, g, h = self.field.derivs(points)
        d1 = self.d1(v)[:, None]
        return self.fn(v), d1 * g, self.d2(v)[:, None] * g**2 + d1 * h


@dataclass(frozen=True, eq=False)
class Explicit(Field):
    """Field from user callables for value, gradient and unmixed second derivatives."""

    fvalue: Callable
    fgrad: Callable
    fhess: Callable

    def value(self, points):
        return self.fvalue(_pts(points))

    def grad(self, points):
        return self.fgrad(_pts(points))

    def hess_diag(self, points):
        return self.fhess(_pts(points))


@dataclass(frozen=True)
class GrfSpec:
    """Squared-exponential GRF ``offset + scale * g`` with ``g`` of unit variance.

    ``time_scale`` set means a space-time field on ``(t, x, y)`` with separable
    scales ``(time_scale, length_scale, length_scale)``.
    """

    length_scale: float
    seed: int
    offset: float = 0.0
    scale: float = 1.0
    time_scale: float | None = None
    n_features: int = 2048

    def __post_init__(self):
        if not self.length_scale > 0:
            raise ValueError("length_scale must be positive")
        if self.time_scale is not None and not self.time_scale > 0:
            raise ValueError("time_scale must be positive")
        if self.n_features < 1:
            raise ValueError("n_features must be positive")

    @property
    def dim(self) -> int:
        return 2 if self.time_scale is None else 3

    def to_dict(self) -> dict:
        return {"length_scale": self.length_scale, "time_scale": self.time_scale,
                "offset": self.offset, "scale": self.scale, "seed": int(self.seed),
                "n_features": self.n_features}


def _rff(rng: np.random.Generator, scales: np.ndarray, n_features: int) -> Rff:
    omega = rng.standard_normal((n_features, scales.size)) / scales
    phase = rng.uniform(0.0, 2.0 * np.pi, n_features)
    return Rff(omega, phase)


def make_grf(spec: GrfSpec, rng: np.random.Generator | None = None) -> Field:
    """Field ``offset + scale * g`` where ``g`` has covariance exp(-r²/(2λ²))."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    scales = np.full(2, spec.length_scale)
    if spec.time_scale is not None:
        scales = np.concatenate([[spec.time_scale], scales])
    return Affine(_rff(rng, scales, spec.n_features), spec.offset, spec.scale)


def grf_sample(spec: GrfSpec, grid) -> np.ndarray:
    """Values of the GRF described by ``spec`` on ``grid`` (shape ``(P, d)``)."""
    return make_grf(spec).value(grid)


def field_extremes(field: Field, bounds, grid_points: int | None = None,
                   length_scale: float | None = None) -> tuple[float, float]:
    """``(min, max)`` of ``field`` over a box: grid search, then bounded L-BFGS-B polish.

    The grid has ``grid_points`` per axis, by default enough to put about four
    points per ``length_scale``.
    """
    bounds = [tuple(map(float, b)) for b in bounds]
    if grid_points is None:
        ls = 0.25 if length_scale is None else length_scale
        grid_points = int(np.clip(np.ceil(4.0 / ls) + 1, 9, 81))
    axes = [np.linspace(lo, hi, grid_points) for lo, hi in bounds]
    grid = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    vals = field.value(grid)
    out = []
    for sign in (1.0, -1.0):  # minimize sign * field
        best = float(np.min(sign * vals))
        for idx in np.argsort(sign * vals)[:2]:
            def obj(x):
                return sign * field.value(x[None])[0], sign * field.grad(x[None])[0]

            res = minimize(obj, grid[idx], jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"maxiter": 60})
            best = min(best, float(sign * field.value(res.x[None])[0]))
        out.append(sign * best)
    return out[0], out[1]


def sup_norm(field: Field, bounds, grid_points: int | None = None,
             length_scale: float | None = None) -> float:
    """``max |field|`` over a box (see :func:`field_extremes`)."""
    lo, hi = field_extremes(field, bounds, grid_points, length_scale)
    return max(abs(lo), abs(hi))
