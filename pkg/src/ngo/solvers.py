"""Classical baselines: Galerkin FEM on the NGO bases, POD-Galerkin, Picard iteration."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
from scipy import sparse
from scipy.sparse import linalg as spla

from .assembly import AssembledOperator, Discretization, assemble_steady, sample_field
from .errors import ConfigError, NumericalError

__all__ = [
    "fem_solve",
    "dense_solve",
    "pod_galerkin_solve",
    "PicardConfig",
    "PicardResult",
    "picard_solve",
    "fem_inner_solver",
    "relative_l2",
]

log = logging.getLogger(__name__)


def dense_solve(A, b) -> np.ndarray:
    """LU solve raising :class:`NumericalError` (with a condition estimate) if singular."""
    if sparse.issparse(A):
        try:
            x = spla.splu(A.tocsc()).solve(np.asarray(b, dtype=float))
        except RuntimeError as exc:
            raise NumericalError(f"sparse factorization failed: {exc}") from exc
    else:
        A = np.asarray(A, dtype=float)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(A, check_finite=True)
        if np.any(np.abs(np.diag(lu)) <= np.finfo(float).eps * np.abs(lu).max() * A.shape[0]):
            raise NumericalError(f"singular system matrix (condition estimate {np.linalg.cond(A):.3e})")
        x = sla.lu_solve((lu, piv), b)
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite solution")
    return x


def fem_solve(assembled: AssembledOperator, stabilized: bool = False) -> np.ndarray:
    """Solve ``(F [+ F_s]) u = d [+ d_s]``."""
    F, d = assembled.system(stabilized)
    return dense_solve(F, d)


def relative_l2(u_hat, u, weights) -> float:
    """``‖û − u‖ / ‖u‖`` in the discrete L² inner product of ``weights``."""
    num = weights @ (np.asarray(u_hat) - np.asarray(u)) ** 2
    den = weights @ np.asarray(u) ** 2
    if den <= 0:
        raise NumericalError("reference solution has zero norm")
    return float(np.sqrt(num / den))


def pod_galerkin_solve(theta, pod_disc: Discretization, f=0.0, eta=0.0, g=0.0,
                       stabilized: bool = False) -> np.ndarray:
    """Galerkin solve in a POD basis (``pod_disc.basis`` must evaluate anywhere)."""
    return fem_solve(assemble_steady(theta, pod_disc, f, eta, g), stabilized)


@dataclass(frozen=True)
class PicardConfig:
    """Picard settings; ``tolerance`` bounds the relative L² update."""

    max_iterations: int = 30
    tolerance: float = 1e-10
    alpha: float = 0.1

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ConfigError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be positive")

    @classmethod
    def for_ngo(cls, alpha: float = 0.1, max_iterations: int = 30) -> "PicardConfig":
        return cls(max_iterations, 1e-6, alpha)


@dataclass
class PicardResult:
    iterates: list = field(default_factory=list)
    updates: list = field(default_factory=list)
    min_theta: list = field(default_factory=list)
    converged: bool = False

    @property
    def solution(self) -> np.ndarray:
        return self.iterates[-1]

    @property
    def iterations(self) -> int:
        return len(self.iterates)

    @property
    def theta_violation(self) -> bool:
        return bool(self.min_theta) and min(self.min_theta) <= 0


def fem_inner_solver(disc: Discretization, f=0.0, eta=0.0, g=0.0,
                     stabilized: bool = True) -> Callable:
    """Inner linear solver ``θ ↦ coefficients`` built on dense Galerkin FEM."""

    def solve(theta):
        return fem_solve(assemble_steady(theta, disc, f, eta, g), stabilized)

    return solve


def picard_solve(theta0, disc: Discretization, inner: Callable, config: PicardConfig,
                 reference: np.ndarray | None = None) -> PicardResult:
    """Fixed-point iteration ``u^(k) = S[θ₀ + α u^(k−1)]`` from ``u^(0) = 0``.

    ``inner`` maps a θ callable to solution coefficients on ``disc.basis``.
    The stopping metric is ``‖u^(k) − u^(k−1)‖ / ‖u^(k)‖`` on the domain rule.
    With ``α = 0`` the problem is linear and a single solve is returned.
    """
    basis, w = disc.basis, disc.w
    phi = disc.phi.toarray() if sparse.issparse(disc.phi) else disc.phi
    res = PicardResult()
    u = np.zeros(disc.N)
    alpha = float(config.alpha)
    for k in range(1, config.max_iterations + 1):
        u_prev = u

        def theta(p, u_prev=u_prev):
            base = sample_field(theta0, p)
            if alpha == 0.0 or not np.any(u_prev):
                return base
            return base + alpha * (basis.eval(p) @ u_prev)

        th_q = theta(disc.pts)
        res.min_theta.append(float(th_q.min()))
        if th_q.min() <= 0:
            log.warning("Picard iteration %d: theta not positive (min %.3e)", k, th_q.min())
        u = np.asarray(inner(theta), dtype=float)
        if not np.all(np.isfinite(u)):
            raise NumericalError(f"Picard iterate {k} is not finite")
        res.iterates.append(u)
        uq, dq = phi @ u, phi @ (u - u_prev)
        den = float(np.sqrt(w @ uq**2))
        upd = float(np.sqrt(w @ dq**2)) / den if den > 0 else 0.0
        res.updates.append(upd)
        if alpha == 0.0 or upd < config.tolerance:
            res.converged = True
            break
    return res
