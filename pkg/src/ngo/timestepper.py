"""Autoregressive time stepping with space-time slab operators.

One slab covers ``[i·Δt, (i+1)·Δt]``; its basis is the reference slab basis
shifted in time. The step is ``û⁽ⁱ⁾ = Â⁽ⁱ⁾(M_lr û⁽ⁱ⁻¹⁾ + d_x⁽ⁱ⁾)``,
optionally followed by the norm scaling layer and then the conservation
correction ``û' = a û + b c``.

``M_rr`` is only semidefinite: with a linear time factor only the
final-time functions are nonzero at the end of the slab. Norms in
``M_rr`` are therefore computed on that final-trace block.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np
import scipy.linalg as sla

from .assembly import AssembledOperator, Discretization, assemble_space_time, make_quadratures, sample_field
from .core import NgoInputs, NgoModel, system_matrices
from .discretization import make_bspline_basis, make_tensor_basis
from .errors import ConfigError, NumericalError
from .fields import shift_cache

__all__ = [
    "make_space_time_discretization",
    "TraceBlocks",
    "trace_blocks",
    "PowerIterationState",
    "step_norm",
    "dense_step_norm",
    "ScalingResult",
    "norm_scaling",
    "CorrectionResult",
    "conservation_correct",
    "initial_coefficients",
    "slab_inputs",
    "precompute_space_time_inputs",
    "FemStep",
    "NgoStep",
    "RolloutConfig",
    "StepRecord",
    "RolloutResult",
    "rollout",
    "norm_scale_fn",
    "mean_theta_inputs",
    "refresh_warm_start",
    "train_space_time_ngo",
]

log = logging.getLogger(__name__)


def make_space_time_discretization(n: int = 10, degree: int = 3, dt: float = 1e-3, cells: int = 7,
                                   points: int = 4, time_points: int = 2,
                                   stabilization: float | None = None) -> Discretization:
    """Linear-in-time (2 functions) times ``n × n`` B-splines in space on one slab.

    The default rule puts 4 Gauss points on each knot span of the cubic
    basis and 2 in time, which keeps 1000-step rollouts cheap.
    """
    lin = make_bspline_basis(2, 1, (0.0, dt))
    b = make_bspline_basis(n, degree)
    return Discretization(make_tensor_basis([lin, b, b]),
                          make_quadratures(cells, points, dt=dt, time_points=time_points), stabilization)


@dataclass(eq=False)
class TraceBlocks:
    """Index sets of the initial- and final-trace functions and the trace mass matrix ``M``.

    ``chol`` is the lower Cholesky factor of ``M = M_rr[final, final]`` and
    ``B = M_lr[initial, final]``.
    """

    initial: np.ndarray
    final: np.ndarray
    M: np.ndarray
    chol: np.ndarray
    B: np.ndarray


def trace_blocks(disc: Discretization, tol: float = 1e-14) -> TraceBlocks:
    """Split the slab basis into trace blocks; checks that ``M_rr`` is definite on its range."""
    if not disc.space_time:
        raise ConfigError("trace blocks need a space-time discretization")
    Mrr, Mlr = disc.M_rr, disc.M_lr
    scale = np.abs(Mrr).max()
    final = np.nonzero(np.abs(Mrr).max(axis=0) > tol * scale)[0]
    initial = np.nonzero(np.abs(Mlr).max(axis=1) > tol * scale)[0]
    M = Mrr[np.ix_(final, final)]
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("M_rr is not positive definite on the final-trace block") from exc
    return TraceBlocks(initial, final, M, L, Mlr[np.ix_(initial, final)])


@dataclass
class PowerIterationState:
    """Warm start for the power iteration: ``λ₀`` stays fixed, ``v₀`` may be refreshed."""

    v0: np.ndarray | None = None
    lam0: float = 1.0


def _reduced(A: np.ndarray, blocks: TraceBlocks) -> np.ndarray:
    """``Lᵀ T L⁻ᵀ`` with ``T = Â[final, initial] B``: its 2-norm is ``‖Â M_lr‖_{M_rr}``."""
    T = A[np.ix_(blocks.final, blocks.initial)] @ blocks.B
    L = blocks.chol
    return sla.solve_triangular(L, (L.T @ T).T, lower=True).T


def step_norm(A: np.ndarray, blocks: TraceBlocks, state: PowerIterationState | None = None,
              tol: float = 1e-3, max_iter: int = 500, update_state: bool = False):
    """Estimate ``‖Â M_lr‖_{M_rr}`` by power iteration on the normal operator.

    Returns ``(sigma, iterations, used_fallback)``. After ``max_iter``
    iterations without a relative change below ``tol`` the dense
    generalized eigenvalue problem is solved instead (logged).
    """
    R = _reduced(A, blocks)
    G = R.T @ R
    n = G.shape[0]
    v = None if state is None or state.v0 is None else state.v0.copy()
    if v is None or v.size != n or not np.any(v):
        v = np.ones(n)
    v /= np.linalg.norm(v)
    lam = state.lam0 if state is not None else 1.0
    for it in range(1, max_iter + 1):
        w = G @ v
        new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0, it, False
        v = w / nw
        if abs(new - lam) <= tol * abs(new):
            if update_state and state is not None:
                state.v0 = v
            return float(np.sqrt(max(new, 0.0))), it, False
        lam = new
    log.info("power iteration did not converge in %d steps; using the dense eigensolver", max_iter)
    T = A[np.ix_(blocks.final, blocks.initial)] @ blocks.B
    ev = sla.eigh(T.T @ blocks.M @ T, blocks.M, eigvals_only=True)
    return float(np.sqrt(max(ev[-1], 0.0))), max_iter, True


def dense_step_norm(A: np.ndarray, blocks: TraceBlocks) -> float:
    """Exact ``‖Â M_lr‖_{M_rr}`` from a singular value decomposition."""
    return float(np.linalg.norm(_reduced(A, blocks), 2))


@dataclass
class ScalingResult:
    A: np.ndarray
    sigma: float
    scaled: bool
    iterations: int
    fallback: bool


def norm_scaling(A: np.ndarray, blocks: TraceBlocks, S: float = 0.8,
                 state: PowerIterationState | None = None, tol: float = 1e-3,
                 max_iter: int = 500) -> ScalingResult:
    """``Â' = Â·S/σ`` when ``σ = ‖Â M_lr‖_{M_rr} > S``, else ``Â`` unchanged."""
    if not 0 < S <= 1:
        raise ConfigError("S must lie in (0, 1]")
    sigma, it, fb = step_norm(A, blocks, state, tol, max_iter)
    if sigma > S:
        return ScalingResult(A * (S / sigma), sigma, True, it, fb)
    return ScalingResult(A, sigma, False, it, fb)


def norm_scale_fn(blocks: TraceBlocks, S: float = 0.8, state: PowerIterationState | None = None):
    """Per-sample factors ``min(1, S/σ)`` for use as a training ``scale_fn``."""
    def fn(A):
        out = np.ones(len(A))
        for k, Ak in enumerate(A):
            sigma = step_norm(Ak, blocks, state)[0]
            if sigma > S:
                out[k] = S / sigma
        return out

    return fn


@dataclass
class CorrectionResult:
    u: np.ndarray
    a: float
    b: float
    energy_residual: float
    flagged: bool


def _energy_gap(u, M_rr, E_prev, h_x):
    """``½‖u‖²_{M_rr} − ½E_prev − uᵀh_x``; the energy law asks for a value ≤ 0."""
    return 0.5 * float(u @ M_rr @ u) - 0.5 * E_prev - float(u @ h_x)


def conservation_correct(u: np.ndarray, c: np.ndarray, C: float, M_rr: np.ndarray, E_prev: float,
                         h_x: np.ndarray, tol: float = 0.0) -> CorrectionResult:
    """Enforce ``û'ᵀc = C`` and, if needed, the energy inequality via ``û' = a û + b c``.

    First ``a = 1`` and ``b`` fixes the mass. If the energy gap is still
    positive, ``b(a)`` keeps the mass exact and the largest root ``a ∈ (0, 1]``
    of the energy quadratic is taken. Without such a root the mass-only
    correction is kept and the step is flagged.
    """
    u = np.asarray(u, dtype=float)
    c = np.asarray(c, dtype=float)
    cc = float(c @ c)
    if cc == 0:
        raise NumericalError("mass vector c is zero")
    uc = float(u @ c)
    b1 = (C - uc) / cc
    u1 = u + b1 * c
    gap = _energy_gap(u1, M_rr, E_prev, h_x)
    if gap <= tol:
        return CorrectionResult(u1, 1.0, b1, gap, False)
    # û'(a) = a p + r keeps the mass exact for every a
    p = u - (uc / cc) * c
    r = (C / cc) * c
    Mp, Mr = M_rr @ p, M_rr @ r
    qa = 0.5 * float(p @ Mp)
    qb = float(p @ Mr) - float(p @ h_x)
    qc = 0.5 * float(r @ Mr) - 0.5 * E_prev - float(r @ h_x)
    roots = np.roots([qa, qb, qc]) if qa != 0 else (np.array([-qc / qb]) if qb != 0 else np.array([]))
    roots = roots[np.isreal(roots)].real
    ok = roots[(roots > 0) & (roots <= 1)]
    if ok.size == 0:
        return CorrectionResult(u1, 1.0, b1, gap, True)
    a = float(ok.max())
    b = (C - a * uc) / cc
    u2 = a * u + b * c
    return CorrectionResult(u2, a, b, _energy_gap(u2, M_rr, E_prev, h_x), False)


def _face_points(disc: Discretization, t: float) -> np.ndarray:
    return np.column_stack([np.full(disc.w_face.size, t), disc.pts_face])


def initial_coefficients(u0, disc: Discretization, blocks: TraceBlocks, t0: float = 0.0) -> np.ndarray:
    """Slab vector whose final trace is the L² projection of ``u0(t0, ·)``; zeros elsewhere."""
    vals = sample_field(u0, _face_points(disc, t0))
    P = disc.phi_final[:, blocks.final]
    P = P.toarray() if hasattr(P, "toarray") else P
    out = np.zeros(disc.N)
    out[blocks.final] = sla.cho_solve((blocks.chol, True), P.T @ (disc.w_face * vals))
    return out


def _moments(disc: Discretization, theta_q: np.ndarray, time_channel: bool) -> np.ndarray:
    phi = disc.phi.toarray() if hasattr(disc.phi, "toarray") else disc.phi
    Fn = phi.T @ (disc.w * theta_q)
    if time_channel:
        Fn = np.concatenate([Fn, disc.final_integral])
    return Fn


def slab_inputs(op: AssembledOperator, disc: Discretization, theta_q: np.ndarray, d: np.ndarray,
                stabilized: bool, time_channel: bool = False) -> NgoInputs:
    """Single-slab NGO inputs: system matrix, moments (``∫ψθ`` and optionally ``∫ψ(Δt)``)."""
    F = op.system(stabilized)[0]
    F = F.toarray() if hasattr(F, "toarray") else np.asarray(F)
    phi = disc.phi.toarray() if hasattr(disc.phi, "toarray") else disc.phi
    return NgoInputs(np.asarray(d)[None], phi, disc.w, F[None], _moments(disc, theta_q, time_channel)[None])


def precompute_space_time_inputs(samples: Sequence, disc: Discretization, blocks: TraceBlocks,
                                 nitsche: bool = True, slab_index: int = 0,
                                 time_channel: bool = False) -> NgoInputs:
    """Single-slab training inputs; the previous state is the projection of ``u`` at the slab start."""
    phi = disc.phi.toarray() if hasattr(disc.phi, "toarray") else disc.phi
    t0 = slab_index * disc.dt
    P = disc.shift(disc.pts, t0)
    ds, Fs, Fns, us = [], [], [], []
    for s in samples:
        fl = s.fields
        prev = initial_coefficients(s.u, disc, blocks, t0)
        op = assemble_space_time(fl.theta, disc, slab_index, fl.f, fl.eta, fl.g, u_prev=prev)
        F, d = op.system(nitsche)
        Fs.append(F.toarray() if hasattr(F, "toarray") else F)
        ds.append(d)
        Fns.append(_moments(disc, sample_field(fl.theta, P), time_channel))
        us.append(s.u(P))
    return NgoInputs(np.array(ds), phi, disc.w, np.array(Fs), np.array(Fns), np.array(us))


class StepOperator(Protocol):
    stabilized: bool

    def matrix(self, op: AssembledOperator, disc: Discretization, theta_q: np.ndarray) -> np.ndarray: ...


@dataclass
class FemStep:
    """``Â = F⁻¹`` per slab (Nitsche-stabilized by default)."""

    stabilized: bool = True

    def matrix(self, op, disc, theta_q):
        F = op.system(self.stabilized)[0]
        F = F.toarray() if hasattr(F, "toarray") else np.asarray(F)
        return np.linalg.inv(F)


@dataclass
class NgoStep:
    """``Â`` from a frozen NGO; the right-hand side uses the model's Nitsche flag."""

    model: NgoModel

    @property
    def stabilized(self) -> bool:
        return self.model.nitsche_in_inputs

    def matrix(self, op, disc, theta_q):
        inp = slab_inputs(op, disc, theta_q, op.d, self.stabilized, self.model.time_channel)
        return system_matrices(self.model, inp)[0]


@dataclass(frozen=True)
class RolloutConfig:
    n_steps: int = 1000
    norm_scaling: bool = False
    S: float = 0.8
    conservation: bool = False
    homogeneous: bool = False
    power_tol: float = 1e-3
    power_max_iter: int = 500

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError("n_steps must be positive")
        if not 0 < self.S <= 1:
            raise ConfigError("S must lie in (0, 1]")


@dataclass
class StepRecord:
    step: int
    rel_error: float
    mass_error: float
    mass_residual: float
    energy: float
    scaled: bool
    sigma: float
    a: float
    b: float
    energy_flag: bool


CSV_FIELDS = ["step", "rel_error", "mass_error", "mass_residual", "energy", "scaled", "sigma", "a", "b",
              "energy_flag"]


@dataclass
class RolloutResult:
    """Coefficients after each step (``n_steps × N``), the initial vector and per-step telemetry."""

    coefficients: np.ndarray
    initial: np.ndarray
    records: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            wr.writeheader()
            for r in self.records:
                wr.writerow(asdict(r))


def rollout(stepper: StepOperator, sample, disc: Discretization, config: RolloutConfig = RolloutConfig(),
            blocks: TraceBlocks | None = None, state: PowerIterationState | None = None,
            reference: bool = True, on_step=None) -> RolloutResult:
    """March ``config.n_steps`` slabs from ``u0``, recording error, mass and energy per step.

    With ``homogeneous`` the forcing and boundary data are set to zero (the
    initial state is kept) and no reference error is computed. ``on_step(i, A)``
    is called with each emitted (post-scaling) step matrix.
    """
    with shift_cache():
        return _rollout(stepper, sample, disc, config, blocks, state, reference, on_step)


def _rollout(stepper, sample, disc, config, blocks, state, reference, on_step=None):
    blocks = trace_blocks(disc) if blocks is None else blocks
    fl = sample.fields
    f, eta, g = (0.0, 0.0, 0.0) if config.homogeneous else (fl.f, fl.eta, fl.g)
    ref = reference and not config.homogeneous
    u0 = fl.u0 if fl.u0 is not None else sample.u
    u_prev = initial_coefficients(u0, disc, blocks, 0.0)
    Mrr, fint = disc.M_rr, disc.final_integral
    phi = disc.phi.toarray() if hasattr(disc.phi, "toarray") else disc.phi
    out = np.empty((config.n_steps, disc.N))
    res = RolloutResult(out, u_prev.copy())
    for i in range(config.n_steps):
        t0 = i * disc.dt
        P = disc.shift(disc.pts, t0)
        theta_q = sample_field(fl.theta, P)
        op = assemble_space_time(fl.theta, disc, i, f, eta, g)
        A = stepper.matrix(op, disc, theta_q)
        sigma, scaled = float("nan"), False
        if config.norm_scaling:
            sr = norm_scaling(A, blocks, config.S, state, config.power_tol, config.power_max_iter)
            A, sigma, scaled = sr.A, sr.sigma, sr.scaled
        if on_step is not None:
            on_step(i, A)
        u = A @ (disc.M_lr @ u_prev + op.rhs_x(stepper.stabilized))
        C = float(fint @ u_prev) + op.mass_C_x
        a = b = float("nan")
        flag = False
        if config.conservation:
            cr = conservation_correct(u, op.mass_c, C, Mrr, float(u_prev @ Mrr @ u_prev), op.h_x)
            u, a, b, flag = cr.u, cr.a, cr.b, cr.flagged
        if not np.all(np.isfinite(u)):
            raise NumericalError(f"non-finite coefficients at step {i}")
        rel = m_err = float("nan")
        if ref:
            uq = sample.u(P)
            rel = float(np.sqrt(disc.w @ (phi @ u - uq) ** 2 / (disc.w @ uq**2)))
            m_true = disc.w_face @ sample.u(_face_points(disc, t0 + disc.dt))
            m_err = abs(float(fint @ u) - float(m_true))
        res.records.append(StepRecord(i, rel, m_err, abs(float(u @ op.mass_c) - C),
                                      0.5 * float(u @ Mrr @ u), scaled, sigma, a, b, flag))
        out[i] = u
        u_prev = u
    return res


def mean_theta_inputs(disc: Discretization, theta_mean: float = 1.0, stabilized: bool = True,
                      time_channel: bool = False) -> NgoInputs:
    """Single-slab inputs at the constant coefficient ``⟨θ⟩`` (used for the warm start)."""
    op = assemble_space_time(float(theta_mean), disc, 0)
    return slab_inputs(op, disc, np.full(disc.w.size, float(theta_mean)), op.rhs_x(stabilized), stabilized,
                       time_channel)


def refresh_warm_start(model: NgoModel, disc: Discretization, blocks: TraceBlocks,
                       state: PowerIterationState, theta_mean: float = 1.0) -> None:
    """``v₀ ← PowerIteration(Â[⟨θ⟩] M_lr; λ₀, v₀)``."""
    inp = mean_theta_inputs(disc, theta_mean, model.nitsche_in_inputs, model.time_channel)
    step_norm(system_matrices(model, inp)[0], blocks, state, update_state=True)


def train_space_time_ngo(model: NgoModel, train_inputs: NgoInputs, val_inputs: NgoInputs | None,
                         config, disc: Discretization, blocks: TraceBlocks, S: float | None = 0.8,
                         state: PowerIterationState | None = None, theta_mean: float = 1.0):
    """Single-slab training, with the norm scaling layer in the loop when ``S`` is given.

    The scale factor is held constant in the backward pass; the warm start
    ``v₀`` is refreshed from ``Â[⟨θ⟩]`` after every epoch.
    """
    from .core import train_data_free_ngo, train_data_ngo, train_model_ngo

    trainer = {"model": train_model_ngo, "data": train_data_ngo, "data-free": train_data_free_ngo}[model.variant]
    if S is None:
        return trainer(model, train_inputs, val_inputs, config)
    state = PowerIterationState() if state is None else state
    refresh_warm_start(model, disc, blocks, state, theta_mean)

    def on_epoch(epoch, net):
        refresh_warm_start(model.with_flags(net=net), disc, blocks, state, theta_mean)

    return trainer(model, train_inputs, val_inputs, config, scale_fn=norm_scale_fn(blocks, S, state),
                   on_epoch=on_epoch)
