"""Manufactured and solver-generated problem datasets.

Every dataset is a pure function of ``(n, seed)``: sample ``i`` draws all of
its random numbers from ``numpy.random.default_rng(seed + i)``.

Manufactured datasets (B, C, D, F) pick θ and u as random fields and obtain
f, η, g by applying the PDE and boundary operators analytically. Random
fields in C, D and F are normalized to unit sup-norm over the domain so the
stated offset/scaling ranges bound the fields exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .assembly import (
    Discretization,
    ParameterFields,
    assemble_advection_diffusion,
    assemble_steady,
    make_quadratures,
)
from .discretization import make_bspline_basis, make_quadrature, make_tensor_basis
from .errors import NumericalError
from .fields import Affine, Explicit, Field, GrfSpec, Map, Product, _rff, field_extremes, make_grf
from .solvers import fem_solve

__all__ = [
    "ProblemSample",
    "BasisField",
    "manufactured_data",
    "make_dataset_A_surrogate",
    "make_dataset_B",
    "make_dataset_C",
    "make_dataset_D",
    "make_dataset_E",
    "make_dataset_F",
    "make_dataset",
    "DATASETS",
    "GrfSpec",
    "grf_sample",
    "DEFAULT_FEATURES",
]

log = logging.getLogger(__name__)

DEFAULT_FEATURES = 512
UNIT_SQUARE = [(0.0, 1.0), (0.0, 1.0)]


def grf_sample(spec: GrfSpec, grid) -> np.ndarray:
    """Values of the GRF ``spec`` on ``grid``; see :class:`~ngo.fields.GrfSpec`."""
    return make_grf(spec).value(grid)


@dataclass(eq=False)
class ProblemSample:
    """One problem instance: coefficient/data fields plus a reference solution.

    ``u`` is a field (exact for manufactured samples, a basis expansion for
    solver-generated ones); ``params`` records the random draws.
    """

    fields: ParameterFields
    u: Field
    provenance: str
    seed: int
    params: dict = field(default_factory=dict)

    def u_on(self, points) -> np.ndarray:
        return self.u.value(points)


@dataclass(frozen=True, eq=False)
class BasisField(Field):
    """``u(x) = Σ_m c_m φ_m(x)``."""

    basis: object
    coefficients: np.ndarray

    def value(self, points):
        return self.basis.eval(np.atleast_2d(points)) @ self.coefficients

    def grad(self, points):
        return np.einsum("pnd,n->pd", self.basis.grad(np.atleast_2d(points)), self.coefficients)

    def hess_diag(self, points):
        pts = np.atleast_2d(points)
        out = []
        for k in range(self.basis.dim):
            d = [0] * self.basis.dim
            d[k] = 2
            out.append(self.basis.eval(pts, d) @ self.coefficients)
        return np.stack(out, axis=1)


def _normalized_grf(rng, length_scale, time_scale=None, n_features=DEFAULT_FEATURES,
                    t_end: float = 1.0) -> Field:
    """Unit sup-norm GRF over the unit square (or ``[0, t_end] ×`` square)."""
    scales = np.full(2, float(length_scale))
    bounds = list(UNIT_SQUARE)
    if time_scale is not None:
        scales = np.concatenate([[time_scale], scales])
        bounds = [(0.0, t_end)] + bounds
    g = _rff(rng, scales, n_features)
    s = max(abs(v) for v in field_extremes(g, bounds, length_scale=float(scales.min())))
    return Affine(g, 0.0, 1.0 / s)


def _raw_grf(rng, length_scale, n_features=DEFAULT_FEATURES) -> Field:
    return _rff(rng, np.full(2, float(length_scale)), n_features)


def manufactured_data(theta: Field, u: Field, time_dependent: bool = False):
    """``(f, η, g)`` callables for ``[∂_t] u − ∇·(θ∇u) = f``, ``θ∇u·n = η``, ``θu = g``.

    η assumes the Neumann segments y = 0 (n = −e_y) and y = 1 (n = +e_y).
    """

    def f(p):
        tv, tg, _ = theta.derivs(p)
        uv, ug, uh = u.derivs(p)
        r = -tv * uh[:, -2:].sum(axis=1) - (tg[:, -2:] * ug[:, -2:]).sum(axis=1)
        if time_dependent:
            r = r + ug[:, 0]
        return r

    def eta(p):
        ny = np.where(p[:, -1] > 0.5, 1.0, -1.0)
        return theta.value(p) * u.grad(p)[:, -1] * ny

    def g(p):
        return theta.value(p) * u.value(p)

    return f, eta, g


def _draw_steady(rng, theta_scale_hi: float, n_features: int):
    ct, lt = rng.uniform(0.0, theta_scale_hi), rng.uniform(0.5, 1.0)
    bu, cu, lu = rng.uniform(-1.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.5, 1.0)
    th = Affine(_normalized_grf(rng, lt, n_features=n_features), 1.0, ct)
    u = Affine(_normalized_grf(rng, lu, n_features=n_features), bu, cu)
    return th, u, {"theta_scale": ct, "theta_length": lt, "u_offset": bu, "u_scale": cu, "u_length": lu}


def make_dataset_C(n: int, seed: int, n_features: int = DEFAULT_FEATURES,
                   u_length_range: tuple[float, float] | None = None) -> list[ProblemSample]:
    """Steady diffusion, θ = 1 + U(0,0.2)·GRF, u = U(−1,1) + U(0,1)·GRF.

    ``u_length_range`` overrides the in-distribution λ_u ~ U(0.5, 1) to
    produce length-scale shifted test sets.
    """
    out = []
    for i in range(n):
        rng = np.random.default_rng(seed + i)
        th, u, params = _draw_steady(rng, 0.2, n_features)
        if u_length_range is not None:
            lu = rng.uniform(*u_length_range)
            u = Affine(_normalized_grf(rng, lu, n_features=n_features), params["u_offset"], params["u_scale"])
            params["u_length"] = lu
        f, eta, g = manufactured_data(th, u)
        out.append(ProblemSample(ParameterFields(theta=th, f=f, eta=eta, g=g), u, "manufactured",
                                 seed + i, params))
    return out


def make_dataset_F(n: int, seed: int, n_features: int = DEFAULT_FEATURES,
                   alpha: float = 0.1) -> list[ProblemSample]:
    """Nonlinear diffusion θ = θ₀ + α u with θ₀ = 1 + U(0,0.1)·GRF."""
    out = []
    for i in range(n):
        rng = np.random.default_rng(seed + i)
        th0, u, params = _draw_steady(rng, 0.1, n_features)
        params["alpha"] = alpha
        theta = th0 + Affine(u, 0.0, alpha)
        f, eta, g = manufactured_data(theta, u)
        out.append(ProblemSample(ParameterFields(theta=theta, f=f, eta=eta, g=g, theta0=th0, alpha=alpha),
                                 u, "manufactured", seed + i, params))
    return out


def make_dataset_D(n: int, seed: int, n_features: int = DEFAULT_FEATURES, t_end: float = 1.0,
                   scale_ranges: dict | None = None) -> list[ProblemSample]:
    """Time-dependent diffusion with space-time GRFs (time scale τ ~ U(0.5, 1)).

    ``scale_ranges`` may override ``"length"`` and ``"time"`` ranges for both
    θ and u (used for the λ = τ = 1 and out-of-distribution test sets).
    """
    rl = (0.5, 1.0) if scale_ranges is None else scale_ranges.get("length", (0.5, 1.0))
    rt = (0.5, 1.0) if scale_ranges is None else scale_ranges.get("time", (0.5, 1.0))
    out = []
    for i in range(n):
        rng = np.random.default_rng(seed + i)
        ct, lt, tt = rng.uniform(0.0, 0.2), rng.uniform(*rl), rng.uniform(*rt)
        bu, cu, lu, tu = rng.uniform(-1, 1), rng.uniform(0, 1), rng.uniform(*rl), rng.uniform(*rt)
        th = Affine(_normalized_grf(rng, lt, tt, n_features, t_end), 1.0, ct)
        u = Affine(_normalized_grf(rng, lu, tu, n_features, t_end), bu, cu)
        f, eta, g = manufactured_data(th, u, time_dependent=True)
        params = {"theta_scale": ct, "theta_length": lt, "theta_time": tt,
                  "u_offset": bu, "u_scale": cu, "u_length": lu, "u_time": tu}
        out.append(ProblemSample(ParameterFields(theta=th, f=f, eta=eta, g=g, u0=u), u, "manufactured",
                                 seed + i, params))
    return out


def _x_bubble() -> Field:
    return Explicit(lambda p: p[:, 0] * (1 - p[:, 0]),
                    lambda p: np.column_stack([1 - 2 * p[:, 0], np.zeros(len(p))]),
                    lambda p: np.column_stack([np.full(len(p), -2.0), np.zeros(len(p))]))


def _batch_affine(fields, lo, hi, length_scale):
    """Map a batch of fields with one affine map so the batch range is [lo, hi]."""
    ext = np.array([field_extremes(f, UNIT_SQUARE, length_scale=length_scale) for f in fields])
    mn, mx = ext[:, 0].min(), ext[:, 1].max()
    a = (hi - lo) / (mx - mn)
    return [Affine(f, lo - a * mn, a) for f in fields], (float(a), float(lo - a * mn))


def make_dataset_B(n: int, seed: int, n_features: int = DEFAULT_FEATURES,
                   target_f_norm: float = 0.5) -> list[ProblemSample]:
    """Fine-scale manufactured set: u = x(1−x)û, λ = 0.2, scaled so ‖f‖ = 1/2."""
    rngs = [np.random.default_rng(seed + i) for i in range(n)]
    th_hat = [_raw_grf(r, 0.2, n_features) for r in rngs]
    thetas, (a, b) = _batch_affine(th_hat, 0.02, 0.99, 0.2)
    q = make_quadrature("gauss", 40, 4)
    out = []
    for i, rng in enumerate(rngs):
        base = Product(_x_bubble(), _raw_grf(rng, 0.2, n_features))
        f0, _, _ = manufactured_data(thetas[i], base)
        nf = float(np.sqrt(q.weights @ f0(q.points) ** 2))
        u = Affine(base, 0.0, target_f_norm / nf)
        f, eta, _ = manufactured_data(thetas[i], u)
        out.append(ProblemSample(ParameterFields(theta=thetas[i], f=f, eta=eta, g=0.0), u,
                                 "manufactured", seed + i,
                                 {"theta_map": [a, b], "u_scale": target_f_norm / nf}))
    return out


def _solve_fem(disc, fields, supg=False):
    if fields.c is None:
        op = assemble_steady(fields.theta, disc, fields.f, fields.eta, fields.g)
        return fem_solve(op, stabilized=True)
    op = assemble_advection_diffusion(fields.theta, fields.c, disc, fields.f, fields.eta, fields.g,
                                      supg=supg)
    return fem_solve(op)


def fine_discretization(cells: int = 20, points: int = 4) -> Discretization:
    """Cubic B-splines on ``cells × cells`` knot spans, evaluated sparsely."""
    b = make_bspline_basis(cells + 3, 3)
    return Discretization(make_tensor_basis([b, b]), make_quadratures(cells, points), sparse=True)


def _with_retries(make_fields, solve, seed, i, n, max_tries=5):
    for attempt in range(max_tries):
        s = seed + i + attempt * n
        fields, params = make_fields(s)
        try:
            return solve(fields), fields, params, s
        except NumericalError as exc:
            log.warning("sample %d (seed %d) rejected: %s; regenerating", i, s, exc)
    raise NumericalError(f"sample {i}: solver failed {max_tries} times")


def make_dataset_A_surrogate(n: int, seed: int, n_features: int = DEFAULT_FEATURES,
                             cells: int = 20) -> list[ProblemSample]:
    """θ (λ=0.4), f (λ=0.2) in [0.02, 0.99]; η (λ=0.3) in [−1, 1]; g = 0; FEM-solved."""
    rngs = [np.random.default_rng(seed + i) for i in range(n)]
    raw = [(_raw_grf(r, 0.4, n_features), _raw_grf(r, 0.2, n_features), _raw_grf(r, 0.3, n_features))
           for r in rngs]
    thetas, tmap = _batch_affine([r[0] for r in raw], 0.02, 0.99, 0.4)
    fs, fmap = _batch_affine([r[1] for r in raw], 0.02, 0.99, 0.2)
    etas, emap = _batch_affine([r[2] for r in raw], -1.0, 1.0, 0.3)
    disc = fine_discretization(cells)
    out = []
    for i in range(n):
        fields = ParameterFields(theta=thetas[i], f=fs[i], eta=etas[i], g=0.0)
        try:
            coef = _solve_fem(disc, fields)
        except NumericalError as exc:  # pragma: no cover - cubic Nitsche systems are regular
            raise NumericalError(f"dataset A sample {i} failed: {exc}") from exc
        out.append(ProblemSample(fields, BasisField(disc.basis, coef), "fem-solved", seed + i,
                                 {"theta_map": tmap, "f_map": fmap, "eta_map": emap, "cells": cells}))
    return out


def _softplus_theta(g: Field) -> Field:
    e = np.exp(0.01)
    sig = lambda x: 1.0 / (1.0 + e * np.exp(-x))  # noqa: E731
    return Map(g, lambda x: 0.1 * np.logaddexp(0.01, x), lambda x: 0.1 * sig(x),
               lambda x: 0.1 * sig(x) * (1 - sig(x)))


def _segment_field(a: Field, b: Field, axis: int) -> callable:
    """``a`` on the lower segment (coordinate < 1/2 along ``axis``), ``b`` on the upper."""
    return lambda p: np.where(p[:, axis] < 0.5, a.value(p), b.value(p))


def make_dataset_E(n: int, seed: int, n_features: int = DEFAULT_FEATURES,
                   cells: int = 50) -> list[ProblemSample]:
    """Advection-diffusion: c ~ N(0, 25 I), softplus θ, GRF data; SUPG-solved."""
    disc = fine_discretization(cells)

    def make_fields(s):
        rng = np.random.default_rng(s)
        c = rng.normal(0.0, 5.0, 2)
        theta = _softplus_theta(_raw_grf(rng, 0.4, n_features))
        f = _raw_grf(rng, 0.4, n_features)
        gl, gr = (Affine(_raw_grf(rng, 0.4, n_features), 0.0, 0.005) for _ in range(2))
        eb, et = (Affine(_raw_grf(rng, 0.4, n_features), 0.0, 0.5) for _ in range(2))
        fields = ParameterFields(theta=theta, f=f, eta=_segment_field(eb, et, 1),
                                 g=_segment_field(gl, gr, 0), c=tuple(c))
        return fields, {"c": c.tolist()}

    out = []
    for i in range(n):
        coef, fields, params, s = _with_retries(make_fields, lambda fl: _solve_fem(disc, fl, supg=True),
                                                seed, i, n)
        params["cells"] = cells
        out.append(ProblemSample(fields, BasisField(disc.basis, coef), "fem-solved", s, params))
    return out


DATASETS = {
    "A": make_dataset_A_surrogate,
    "B": make_dataset_B,
    "C": make_dataset_C,
    "D": make_dataset_D,
    "E": make_dataset_E,
    "F": make_dataset_F,
}


def make_dataset(name: str, n: int, seed: int, **kwargs) -> list[ProblemSample]:
    if name not in DATASETS:
        raise KeyError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}")
    if n < 1:
        raise ValueError("n must be at least 1")
    return DATASETS[name](n, seed, **kwargs)
