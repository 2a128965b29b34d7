"""Zero-bias ReLU multilayer perceptron, losses, Adam and gradient checking.

Backpropagation is written out by hand. Losses return their value together
with the gradient with respect to their first argument so callers can chain
them through the NGO output maps.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericalError

__all__ = [
    "Mlp",
    "TrainConfig",
    "TrainResult",
    "Adam",
    "train",
    "loss_relative_L2",
    "loss_matrix_pseudoinverse",
    "grad_check",
    "GradCheckResult",
]

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Mlp:
    """``x ↦ W_L ReLU(... ReLU(W_1 x))`` with no biases.

    ``weights[k]`` has shape ``(width_k, width_{k+1})`` and acts on row
    vectors, so batches are ``(B, width_0)`` arrays. The map is positively
    homogeneous: ``net(c x) = c net(x)`` for ``c > 0``.
    """

    weights: list[np.ndarray]

    @classmethod
    def create(cls, widths: Sequence[int], rng: np.random.Generator | int = 0,
               out_scale: float = 1.0) -> "Mlp":
        """He-uniform initialization; the last layer is multiplied by ``out_scale``."""
        if len(widths) < 2 or min(widths) < 1:
            raise ConfigError("an Mlp needs at least two positive widths")
        rng = np.random.default_rng(rng)
        ws = []
        for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            lim = np.sqrt(6.0 / a)
            w = rng.uniform(-lim, lim, (a, b))
            if k == len(widths) - 2:
                w *= out_scale
            ws.append(w)
        return cls(ws)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights)

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.widths[0]:
            raise ConfigError(f"input width {x.shape[-1]} does not match {self.widths[0]}")
        return x

    def forward(self, x) -> np.ndarray:
        h = self._check(x)
        for w in self.weights[:-1]:
            h = np.maximum(h @ w, 0.0)
        return h @ self.weights[-1]

    __call__ = forward

    def forward_cache(self, x):
        """Output and the list of layer inputs needed by :meth:`backward`."""
        h = self._check(x)
        acts = [h]
        for w in self.weights[:-1]:
            h = np.maximum(h @ w, 0.0)
            acts.append(h)
        return h @ self.weights[-1], acts

    def backward(self, acts, g_out, need_input: bool = False):
        """Weight gradients for upstream gradient ``g_out`` (same shape as the output)."""
        grads = [None] * len(self.weights)
        g = np.asarray(g_out, dtype=float)
        for k in range(len(self.weights) - 1, -1, -1):
            a = acts[k]
            grads[k] = np.outer(a, g) if a.ndim == 1 else a.T @ g
            if k > 0 or need_input:
                g = g @ self.weights[k].T
                if k > 0:
                    g = g * (acts[k] > 0)
        return (grads, g) if need_input else grads

    def get_flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights])

    def set_flat(self, theta: np.ndarray) -> None:
        i = 0
        for k, w in enumerate(self.weights):
            self.weights[k] = np.asarray(theta[i:i + w.size], dtype=float).reshape(w.shape).copy()
            i += w.size

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights])


def loss_relative_L2(u_hat, u, weights, with_grad: bool = False):
    """Batch mean of ``‖û_i − u_i‖ / ‖u_i‖`` in the discrete L² product of ``weights``.

    ``u_hat`` and ``u`` have shape ``(B, Q)`` (or ``(Q,)``). Samples with
    ``‖u‖ = 0`` are skipped with a warning. With ``with_grad`` the gradient
    with respect to ``u_hat`` is returned as well.
    """
    uh = np.atleast_2d(np.asarray(u_hat, dtype=float))
    ur = np.atleast_2d(np.asarray(u, dtype=float))
    w = np.asarray(weights, dtype=float)
    e = uh - ur
    num = np.sqrt((e**2) @ w)
    den = np.sqrt((ur**2) @ w)
    ok = den > 0
    if not np.all(ok):
        warnings.warn(f"{int((~ok).sum())} sample(s) with zero reference norm skipped", stacklevel=2)
    if not np.any(ok):
        raise NumericalError("all reference solutions have zero norm")
    n = int(ok.sum())
    loss = float(np.sum(num[ok] / den[ok]) / n)
    if not with_grad:
        return loss
    g = np.zeros_like(uh)
    nz = ok & (num > 0)
    g[nz] = e[nz] * w / (num[nz] * den[nz])[:, None] / n
    return loss, g.reshape(np.shape(u_hat))


def loss_matrix_pseudoinverse(A_hat, F, with_grad: bool = False):
    """``‖F Â F − F‖_F`` (batched over a leading axis: mean over the batch)."""
    A = np.asarray(A_hat, dtype=float)
    Fm = np.asarray(F, dtype=float)
    batched = A.ndim == 3
    A3, F3 = (A, Fm) if batched else (A[None], Fm[None])
    R = F3 @ A3 @ F3 - F3
    norms = np.sqrt(np.einsum("bij,bij->b", R, R))
    loss = float(norms.mean())
    if not with_grad:
        return loss
    Ft = np.swapaxes(F3, 1, 2)
    safe = np.where(norms > 0, norms, 1.0)
    g = Ft @ R @ Ft / (safe[:, None, None] * len(norms))
    g[norms == 0] = 0.0
    return loss, (g if batched else g[0])


@dataclass(frozen=True)
class TrainConfig:
    """Adam mini-batch training settings."""

    learning_rate: float = 1e-3
    batch_size: int = 100
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.batch_size > 0 and self.epochs >= 0 and self.eps > 0):
            raise ConfigError("training settings must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")


class Adam:
    """Adam optimizer over a list of arrays (updated in place)."""

    def __init__(self, params: list[np.ndarray], config: TrainConfig):
        self.cfg = config
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        b1t, b2t = 1 - c.beta1**self.t, 1 - c.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p -= c.learning_rate * (m / b1t) / (np.sqrt(v / b2t) + c.eps)


@dataclass
class TrainResult:
    net: Mlp
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_val(self) -> float:
        return self.val_loss[self.best_epoch] if self.best_epoch >= 0 else float("nan")


def train(net: Mlp, batch_loss: Callable, n_train: int, config: TrainConfig,
          val_loss: Callable | None = None, on_epoch: Callable | None = None) -> TrainResult:
    """Mini-batch Adam training with best-validation selection.

    ``batch_loss(net, idx)`` returns ``(loss, grads)`` for training indices
    ``idx``; ``val_loss(net)`` returns a float. The returned net holds the
    weights with the lowest validation loss (or the final weights without a
    validation closure). ``net`` itself is trained in place.
    """
    rng = np.random.default_rng(config.seed)
    opt = Adam(net.weights, config)
    res = TrainResult(net.copy())
    best = np.inf
    if val_loss is not None and config.epochs == 0:
        res.val_loss.append(float(val_loss(net)))
    for epoch in range(config.epochs):
        perm = rng.permutation(n_train)
        tot, nb = 0.0, 0
        for b, start in enumerate(range(0, n_train, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            loss, grads = batch_loss(net, idx)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                pnorm = float(np.sqrt(sum(np.sum(w**2) for w in net.weights)))
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b} "
                                     f"(parameter norm {pnorm:.3e})")
            opt.step(net.weights, grads)
            tot += loss * len(idx)
            nb += len(idx)
        res.train_loss.append(tot / nb)
        v = float(val_loss(net)) if val_loss is not None else res.train_loss[-1]
        res.val_loss.append(v)
        if v < best:
            best, res.best_epoch = v, epoch
            res.net = net.copy()
        if on_epoch is not None:
            on_epoch(epoch, net)
        log.debug("epoch %d train %.4e val %.4e", epoch, res.train_loss[-1], v)
    if config.epochs > 0 and not np.isfinite(best):
        raise NumericalError("validation loss never finite")
    return res


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: np.ndarray
    excluded: np.ndarray
    errors: np.ndarray


def grad_check(loss: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
               point, h: float = 1e-5, n_coords: int = 50, seed: int = 0,
               kink_tol: float = 1e-3, atol: float = 1e-10) -> GradCheckResult:
    """Compare ``grad(point)`` with central differences of ``loss`` on random coordinates.

    A coordinate is excluded as non-differentiable when its forward and
    backward one-sided differences disagree by more than ``kink_tol``
    (relative), which is what happens when the step crosses a ReLU kink.
    """
    x = np.asarray(point, dtype=float).copy()
    g = np.asarray(grad(x), dtype=float).ravel()
    rng = np.random.default_rng(seed)
    coords = rng.choice(x.size, size=min(n_coords, x.size), replace=False)
    f0 = loss(x)
    checked, excluded, errs = [], [], []
    scale = max(np.abs(g).max(), atol)
    for i in coords:
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        fp, fm = loss(xp), loss(xm)
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1e-3 * scale):
            excluded.append(i)
            continue
        c = (fp - fm) / (2 * h)
        errs.append(abs(c - g[i]) / max(abs(c), abs(g[i]), 1e-6 * scale, atol))
        checked.append(i)
    errs = np.array(errs)
    return GradCheckResult(float(errs.max()) if errs.size else 0.0, np.array(checked, dtype=int),
                           np.array(excluded, dtype=int), errs)
