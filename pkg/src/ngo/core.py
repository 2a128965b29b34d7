"""Neural Green's operators: û = Â(F[θ]) d with a learned system net.

Variants
--------
``model``
    Net input is the assembled system matrix ``F[θ]``; trained on solution data.
``data-free``
    Same input; trained on ``‖F Â F − F‖_F`` so no solutions are needed.
``data``
    Net input is the moment vector ``F_n = ∫ψ_n θ`` (optionally with a time
    trace channel); trained on solution data.

Optional inductive biases are a Neumann-series preconditioner about
``F₀ = F[⟨θ⟩]`` (model/data-free only) and a scale-equivariance wrapper
``Â'(F) = Â(F/s)/s`` with a positively homogeneous scale ``s``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import sparse

from .assembly import Discretization, assemble_steady, sample_field
from .errors import ConfigError, NumericalError
from .nn import Mlp, TrainConfig, TrainResult, loss_matrix_pseudoinverse, loss_relative_L2, train

__all__ = [
    "VARIANTS",
    "NeumannConfig",
    "NgoModel",
    "NgoInputs",
    "precompute_inputs",
    "make_ngo_model",
    "neumann_apply",
    "spectral_radius",
    "neumann_truncation_ratio",
    "ngo_forward",
    "system_matrices",
    "scale_factors",
    "extract_greens",
    "GreensFunctionView",
    "train_model_ngo",
    "train_data_ngo",
    "train_data_free_ngo",
    "relative_errors",
    "ngo_inner_solver",
    "batch_loss_closure",
    "InverseOracle",
    "Greens1DReport",
    "poisson_1d_greens",
]

log = logging.getLogger(__name__)

VARIANTS = ("model", "data-free", "data")


@dataclass(eq=False)
class NeumannConfig:
    """Neumann-series ansatz ``Â = F₀⁻¹[Σ_{k≤K} X^k + NN(X)]`` with ``X = −δF F₀⁻¹``."""

    F0_inverse: np.ndarray | None
    theta_mean: float
    K: int = 1
    enabled: bool = True
    F0: np.ndarray | None = None

    def __post_init__(self):
        if self.K < 0:
            raise ConfigError("K must be non-negative")
        if self.F0 is None and self.F0_inverse is not None:
            self.F0 = np.linalg.inv(self.F0_inverse)


@dataclass(eq=False)
class NgoModel:
    """Frozen or trainable NGO.

    ``input_scale`` and ``output_scale`` are fixed positive constants that
    condition the net (``NN(input_scale·x)·output_scale``); being constants
    they preserve positive homogeneity. ``scale_ref`` is the reference value
    of the scale norm, so ``s = ‖·‖ / scale_ref`` is 1 near ``⟨θ⟩``.
    """

    variant: str
    basis: object
    net: Mlp
    neumann: NeumannConfig | None = None
    scale_equivariant: bool = False
    nitsche_in_inputs: bool = False
    scale_ref: float = 1.0
    input_scale: float = 1.0
    output_scale: float = 1.0
    time_channel: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.uses_neumann:
            if self.variant == "data":
                raise ConfigError("the Neumann ansatz needs system matrices (model or data-free variant)")
            if self.neumann.F0_inverse is None:
                raise ConfigError("Neumann ansatz enabled but F0_inverse is missing")
        if not self.scale_ref > 0:
            raise ConfigError("scale_ref must be positive")

    @property
    def N(self) -> int:
        return self.basis.count

    @property
    def uses_neumann(self) -> bool:
        return self.neumann is not None and self.neumann.enabled

    def with_flags(self, **kw) -> "NgoModel":
        return replace(self, **kw)


@dataclass(eq=False)
class NgoInputs:
    """Precomputed per-sample arrays for a batch of problems.

    ``F`` (S, N, N) for model/data-free; ``Fn`` (S, k) for the data variant;
    ``d`` (S, N); ``u_q`` (S, Q) reference values on the evaluation rule
    ``(phi_q, w)``; ``fem`` (S, N) Galerkin solutions when requested.
    """

    d: np.ndarray
    phi_q: np.ndarray
    w: np.ndarray
    F: np.ndarray | None = None
    Fn: np.ndarray | None = None
    u_q: np.ndarray | None = None
    fem: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.d.shape[0]

    def subset(self, idx) -> "NgoInputs":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return NgoInputs(self.d[idx], self.phi_q, self.w, pick(self.F), pick(self.Fn),
                         pick(self.u_q), pick(self.fem), self.extras)


def _dense(a):
    return a.toarray() if sparse.issparse(a) else np.asarray(a)


def precompute_inputs(samples: Sequence, disc: Discretization, nitsche: bool = False,
                      system: bool = True, moments: bool = True, fem: bool = False,
                      reference: bool = True) -> NgoInputs:
    """Assemble ``F``, ``d`` and ``F_n`` once per steady sample."""
    phi = _dense(disc.phi)
    Fs, ds, Fns, us, fs = [], [], [], [], []
    for s in samples:
        fl = s.fields
        op = assemble_steady(fl.theta, disc, fl.f, fl.eta, fl.g)
        F, d = op.system(nitsche)
        F = _dense(F)
        ds.append(d)
        if system:
            Fs.append(F)
        if moments:
            Fns.append(phi.T @ (disc.w * sample_field(fl.theta, disc.pts)))
        if reference:
            us.append(s.u(disc.pts))
        if fem:
            fs.append(np.linalg.solve(F, d))
    arr = lambda xs: np.array(xs) if xs else None  # noqa: E731
    return NgoInputs(np.array(ds), phi, disc.w, arr(Fs), arr(Fns), arr(us), arr(fs))


def spectral_radius(X: np.ndarray) -> float:
    return float(np.abs(np.linalg.eigvals(X)).max())


def neumann_apply(F0_inverse: np.ndarray, deltaF: np.ndarray, K: int = 1,
                  net_correction: np.ndarray | None = None) -> np.ndarray:
    """``F₀⁻¹[Σ_{k=0}^{K} X^k + NN]`` with ``X = −δF F₀⁻¹``."""
    if K < 0:
        raise ConfigError("K must be non-negative")
    X = -deltaF @ F0_inverse
    term = np.eye(F0_inverse.shape[0])
    total = term.copy()
    for _ in range(K):
        term = term @ X
        total = total + term
    if net_correction is not None:
        total = total + net_correction
    return F0_inverse @ total


def neumann_truncation_ratio(F0_inverse: np.ndarray, F: np.ndarray, K_max: int = 40,
                             underflow: float = 1e-250) -> tuple[float, np.ndarray]:
    """Error ratio between successive truncations of the series for ``F⁻¹``.

    The truncation error after ``K`` terms is evaluated as
    ``‖F₀⁻¹ X^{K+1} (I − X)⁻¹‖``, which equals ``‖F⁻¹ − F₀⁻¹Σ_{k≤K} X^k‖``
    but has no cancellation, so the rate can be read deep in the series
    where clustered eigenvalues of ``X`` have separated. Returns the ratio
    at the largest ``K ≤ K_max`` whose error is above ``underflow·e₀``,
    and all errors ``e₀..e_{K_max}``.
    """
    n = F0_inverse.shape[0]
    X = -(F - np.linalg.inv(F0_inverse)) @ F0_inverse
    tail = F0_inverse @ X @ np.linalg.inv(np.eye(n) - X)
    errs = np.empty(K_max + 1)
    for K in range(K_max + 1):
        errs[K] = np.linalg.norm(tail)
        tail = tail @ X
    ok = np.nonzero(errs > underflow * errs[0])[0]
    k = int(ok.max()) if ok.size else 0
    if k == 0:
        return float("nan"), errs
    return float(errs[k] / errs[k - 1]), errs


def scale_factors(model: NgoModel, inputs: NgoInputs) -> np.ndarray:
    """Per-sample scale ``s``: Frobenius norm of F (model/data-free) or mean of F_n (data)."""
    n = len(inputs)
    if not model.scale_equivariant:
        return np.ones(n)
    if model.variant == "data":
        k = inputs.Fn.shape[1] // (2 if model.time_channel else 1)
        raw = inputs.Fn[:, :k].mean(axis=1)
    else:
        raw = np.sqrt(np.einsum("bij,bij->b", inputs.F, inputs.F))
    s = raw / model.scale_ref
    if np.any(s < 1e-12):
        raise NumericalError("degenerate scale: ‖θ‖ below 1e-12")
    return s


def _net_input(model: NgoModel, inputs: NgoInputs, s: np.ndarray):
    """Net input rows and, for the Neumann ansatz, the X matrices."""
    if model.variant == "data":
        x = inputs.Fn.copy()
        k = x.shape[1] // (2 if model.time_channel else 1)
        x[:, :k] /= s[:, None]
        return model.input_scale * x, None
    G = inputs.F / s[:, None, None]
    if model.uses_neumann:
        X = -(G - model.neumann.F0) @ model.neumann.F0_inverse
        return model.input_scale * X.reshape(len(G), -1), X
    return model.input_scale * G.reshape(len(G), -1), None


def system_matrices(model: NgoModel, inputs: NgoInputs, cache: bool = False, net: Mlp | None = None):
    """Batched ``Â'`` (S, N, N); with ``cache`` also returns backprop state."""
    net = model.net if net is None else net
    N = model.N
    s = scale_factors(model, inputs)
    x, X = _net_input(model, inputs, s)
    out, acts = net.forward_cache(x)
    Y = model.output_scale * out.reshape(-1, N, N)
    if model.uses_neumann:
        F0i = model.neumann.F0_inverse
        total = np.broadcast_to(np.eye(N), X.shape).copy()
        term = total.copy()
        for _ in range(model.neumann.K):
            term = term @ X
            total += term
        A = F0i @ (total + Y)
    else:
        A = Y
    A = A / s[:, None, None]
    if cache:
        return A, (acts, s)
    return A


def _backward(model: NgoModel, cache, dA: np.ndarray, net: Mlp | None = None):
    """Weight gradients given ``dL/dÂ'`` (S, N, N)."""
    net = model.net if net is None else net
    acts, s = cache
    dA0 = dA / s[:, None, None]
    dY = model.neumann.F0_inverse.T @ dA0 if model.uses_neumann else dA0
    return net.backward(acts, model.output_scale * dY.reshape(len(dY), -1))


class InverseOracle:
    """Stand-in system net whose output makes ``Â' = F⁻¹`` exactly.

    Works for model and data-free variants with any combination of the
    Neumann ansatz and the scale wrapper: it inverts the input conditioning
    to recover ``F/s`` and returns the matching net output.
    """

    def __init__(self, model: NgoModel):
        if model.variant == "data":
            raise ConfigError("the inverse oracle needs system-matrix inputs")
        self.model = model

    def forward_cache(self, x):
        m = self.model
        N = m.N
        Z = np.asarray(x).reshape(-1, N, N) / m.input_scale
        if m.uses_neumann:
            F0, F0i = m.neumann.F0, m.neumann.F0_inverse
            G = F0 - Z @ F0
            total = np.broadcast_to(np.eye(N), Z.shape).copy()
            term = total.copy()
            for _ in range(m.neumann.K):
                term = term @ Z
                total += term
            Y = F0 @ np.linalg.inv(G) - total
        else:
            Y = np.linalg.inv(Z)
        return (Y / m.output_scale).reshape(len(Z), -1), None

    def forward(self, x):
        return self.forward_cache(x)[0]

    __call__ = forward


def ngo_forward(model: NgoModel, inputs: NgoInputs) -> np.ndarray:
    """Solution coefficients ``û = Â' d`` (S, N)."""
    A = system_matrices(model, inputs)
    return np.einsum("bij,bj->bi", A, inputs.d)


def relative_errors(coeffs: np.ndarray, inputs: NgoInputs) -> np.ndarray:
    """Per-sample relative L² errors of ``coeffs`` against ``u_q``."""
    uh = coeffs @ inputs.phi_q.T
    e = np.sqrt(((uh - inputs.u_q) ** 2) @ inputs.w)
    return e / np.sqrt((inputs.u_q**2) @ inputs.w)


def batch_loss_closure(model: NgoModel, inputs: NgoInputs, kind: str, scale_fn=None):
    """``(net, idx) -> (loss, grads)`` for the solution (``"solution"``) or matrix (``"matrix"``) loss.

    ``scale_fn(A) -> factors`` optionally rescales each ``Â'`` by a per-sample
    factor that is treated as a constant in the backward pass.
    """
    if kind not in ("solution", "matrix"):
        raise ConfigError(f"unknown loss {kind!r}")

    def fn(net, idx):
        sub = inputs.subset(idx)
        A, cache = system_matrices(model, sub, cache=True, net=net)
        k = np.ones(len(A)) if scale_fn is None else np.asarray(scale_fn(A), dtype=float)
        A = A * k[:, None, None]
        if kind == "matrix":
            loss, dA = loss_matrix_pseudoinverse(A, sub.F, with_grad=True)
        else:
            u = np.einsum("bij,bj->bi", A, sub.d)
            loss, duq = loss_relative_L2(u @ sub.phi_q.T, sub.u_q, sub.w, with_grad=True)
            du = duq @ sub.phi_q
            dA = du[:, :, None] * sub.d[:, None, :]
        return loss, _backward(model, cache, dA * k[:, None, None], net)

    return fn


def _val_closure(model: NgoModel, inputs: NgoInputs, kind: str, scale_fn=None):
    def fn(net):
        A = system_matrices(model, inputs, net=net)
        if scale_fn is not None:
            A = A * np.asarray(scale_fn(A))[:, None, None]
        if kind == "matrix":
            return loss_matrix_pseudoinverse(A, inputs.F)
        u = np.einsum("bij,bj->bi", A, inputs.d)
        return float(relative_errors(u, inputs).mean())

    return fn


def make_ngo_model(variant: str, basis, train_inputs: NgoInputs, hidden: Sequence[int] = (64, 64),
                   neumann: bool = True, K: int = 1, scale_equivariant: bool = False,
                   nitsche_in_inputs: bool = False, theta_mean: float | None = None,
                   disc: Discretization | None = None, seed: int = 0, out_scale: float = 1e-3,
                   time_channel: bool = False, F0: np.ndarray | None = None) -> NgoModel:
    """Build an untrained NGO sized and conditioned from its training inputs.

    For the Neumann ansatz, ``F₀`` is ``F[⟨θ⟩]`` assembled on ``disc`` (with
    Nitsche terms if ``nitsche_in_inputs``) unless given explicitly.
    """
    N = basis.count
    neu = None
    if variant != "data" and neumann:
        if F0 is None:
            if disc is None or theta_mean is None:
                raise ConfigError("Neumann ansatz needs disc and theta_mean (or F0)")
            F0 = _dense(assemble_steady(float(theta_mean), disc).system(nitsche_in_inputs)[0])
        neu = NeumannConfig(np.linalg.inv(F0), float(theta_mean if theta_mean is not None else 1.0), K,
                            F0=F0)
    n_in = train_inputs.Fn.shape[1] if variant == "data" else N * N
    model = NgoModel(variant, basis, Mlp.create([n_in, *hidden, N * N], seed, out_scale), neu,
                     scale_equivariant, nitsche_in_inputs, 1.0, 1.0, 1.0, time_channel)
    # reference scale: value of the scale norm at the training mean
    if scale_equivariant:
        model.scale_ref = float(np.mean(scale_factors(model, train_inputs)))
    s = scale_factors(model, train_inputs)
    x, _ = _net_input(model, train_inputs, s)
    rms = float(np.sqrt(np.mean(x**2)))
    model.input_scale = 1.0 / rms if rms > 0 else 1.0
    if model.uses_neumann:
        # the net corrects the first omitted series term, so size its output like X^(K+1)
        _, X = _net_input(model, train_inputs.subset(np.arange(min(len(train_inputs), 50))), s[:50])
        model.output_scale = float(np.sqrt(np.mean(np.linalg.matrix_power(X, K + 1) ** 2)))
    else:
        model.output_scale = _output_scale(train_inputs)
    return model


def _output_scale(inputs: NgoInputs) -> float:
    """Typical entry size of Â from data: ‖u coefficients‖ / ‖d‖ (least squares fit)."""
    M = inputs.phi_q.T @ (inputs.w[:, None] * inputs.phi_q)
    if inputs.u_q is not None:
        c = np.linalg.solve(M, inputs.phi_q.T @ (inputs.w[:, None] * inputs.u_q.T)).T
    elif inputs.F is not None:
        c = np.linalg.solve(inputs.F, inputs.d[..., None])[..., 0]
    else:
        return 1.0
    r = np.linalg.norm(c, axis=1) / np.maximum(np.linalg.norm(inputs.d, axis=1), 1e-300)
    return float(np.median(r)) / np.sqrt(inputs.d.shape[1])


def _train(model, train_inputs, val_inputs, config, kind, scale_fn=None, on_epoch=None):
    res = train(model.net, batch_loss_closure(model, train_inputs, kind, scale_fn), len(train_inputs), config,
                val_loss=(_val_closure(model, val_inputs, kind, scale_fn) if val_inputs is not None else None),
                on_epoch=on_epoch)
    model.net = res.net
    return res


def train_model_ngo(model: NgoModel, train_inputs: NgoInputs, val_inputs: NgoInputs | None,
                    config: TrainConfig, **kw) -> TrainResult:
    """Solution-loss training; ``model.net`` is replaced by the best-validation net.

    Keyword arguments ``scale_fn`` and ``on_epoch`` are passed to the loss
    closures and the training loop.
    """
    if model.variant != "model":
        raise ConfigError("train_model_ngo needs a model-variant NGO")
    return _train(model, train_inputs, val_inputs, config, "solution", **kw)


def train_data_ngo(model: NgoModel, train_inputs: NgoInputs, val_inputs: NgoInputs | None,
                   config: TrainConfig, **kw) -> TrainResult:
    if model.variant != "data":
        raise ConfigError("train_data_ngo needs a data-variant NGO")
    return _train(model, train_inputs, val_inputs, config, "solution", **kw)


def train_data_free_ngo(model: NgoModel, train_inputs: NgoInputs, val_inputs: NgoInputs | None,
                        config: TrainConfig, **kw) -> TrainResult:
    """Pseudoinverse-loss training: needs only system matrices, no solutions."""
    if model.variant != "data-free":
        raise ConfigError("train_data_free_ngo needs a data-free-variant NGO")
    return _train(model, train_inputs, val_inputs, config, "matrix", **kw)


@dataclass(eq=False)
class GreensFunctionView:
    """``Ĝ(x, x′) = φ(x)ᵀ Â ψ(x′)`` for one Â."""

    A: np.ndarray
    trial: object
    test: object | None = None

    def __call__(self, X, Xp) -> np.ndarray:
        test = self.trial if self.test is None else self.test
        return _eval(self.trial, X) @ self.A @ _eval(test, Xp).T


def _eval(basis, X):
    return basis.eval(np.asarray(X, dtype=float))


def extract_greens(model_or_A, X, Xp, inputs: NgoInputs | None = None, basis=None) -> np.ndarray:
    """Matrix ``Ĝ(X_i, X′_j)``; pass an NgoModel plus single-sample inputs, or Â and a basis."""
    if isinstance(model_or_A, NgoModel):
        if inputs is None or len(inputs) != 1:
            raise ConfigError("extract_greens needs single-sample inputs for a model")
        A = system_matrices(model_or_A, inputs)[0]
        basis = model_or_A.basis
    else:
        A = np.asarray(model_or_A, dtype=float)
        if basis is None:
            raise ConfigError("a basis is required with an explicit matrix")
    return GreensFunctionView(A, basis)(X, Xp)


def ngo_inner_solver(model: NgoModel, disc: Discretization, f=0.0, eta=0.0, g=0.0):
    """Picard inner solver ``θ ↦ û`` backed by a frozen NGO."""
    phi = _dense(disc.phi)

    def solve(theta):
        op = assemble_steady(theta, disc, f, eta, g)
        F, d = op.system(model.nitsche_in_inputs)
        Fn = (phi.T @ (disc.w * sample_field(theta, disc.pts)))[None]
        inp = NgoInputs(d[None], phi, disc.w, _dense(F)[None], Fn)
        return ngo_forward(model, inp)[0]

    return solve


@dataclass
class Greens1DReport:
    """Errors in L²(Ω×Ω) against ``G(x,x′) = min(x,x′)(1 − max(x,x′))``."""

    ngo_error: float
    ritz_error: float
    l2_projection_error: float
    exact_norm: float


def _split_rule(breaks: np.ndarray, npts: int):
    """Composite Gauss rule over the sorted breakpoints."""
    ref, refw = np.polynomial.legendre.leggauss(npts)
    b = np.unique(breaks)
    h = np.diff(b)
    pts = (b[:-1, None] + 0.5 * h[:, None] * (ref + 1)).ravel()
    return pts, (0.5 * h[:, None] * refw).ravel()


def poisson_1d_greens(n: int = 16, degree: int = 3, A: np.ndarray | None = None,
                      npts: int = 8) -> Greens1DReport:
    """Green's function check for ``−u″ = f`` on (0, 1) with homogeneous Dirichlet data.

    ``A`` defaults to ``K⁻¹`` (the Galerkin inverse on the interior
    functions). The Ritz oracle is built independently from
    ``∫ ∂ₓG(x, x′) φ′(x) dx`` with the quadrature split at ``x′``.
    """
    from .assembly import assemble_poisson_1d
    from .discretization import RestrictedBasis, make_bspline_basis, make_quadrature

    basis = make_bspline_basis(n, degree)
    knots = np.unique(basis.knots)
    K, keep = assemble_poisson_1d(basis, make_quadrature("gauss", [len(knots) - 1], [degree + 2],
                                                         bounds=[(0.0, 1.0)]))
    sub = RestrictedBasis(basis, keep)
    A = np.linalg.inv(K) if A is None else np.asarray(A, dtype=float)
    G = lambda x, xp: np.minimum(x, xp) * (1 - np.maximum(x, xp))  # noqa: E731
    xp, wp = _split_rule(knots, npts)
    Vp = sub.eval(xp)
    Mx = Vp.T @ (wp[:, None] * Vp)
    B = np.empty((len(keep), xp.size))
    H = np.zeros((len(keep), len(keep)))
    sq = {"ngo": 0.0, "ritz": 0.0, "l2": 0.0, "exact": 0.0}
    rows = []
    for j, y in enumerate(xp):
        x, wx = _split_rule(np.concatenate([knots, [y]]), npts)
        V, D = sub.eval(x), basis.eval(x, 1)[:, keep]
        Gx = np.where(x < y, 1 - y, -y)
        B[:, j] = D.T @ (wx * Gx)
        H += wp[j] * np.outer(V.T @ (wx * G(x, y)), Vp[j])
        rows.append((x, wx, V))
    C = np.linalg.solve(K, B)
    P = np.linalg.solve(Mx, np.linalg.solve(Mx, H.T).T)
    for j, (x, wx, V) in enumerate(rows):
        g = G(x, xp[j])
        ghat = V @ A @ Vp[j]
        sq["ngo"] += wp[j] * (wx @ (ghat - g) ** 2)
        sq["ritz"] += wp[j] * (wx @ (V @ C[:, j] - g) ** 2)
        sq["l2"] += wp[j] * (wx @ (V @ P @ Vp[j] - g) ** 2)
        sq["exact"] += wp[j] * (wx @ g**2)
    r = {k: float(np.sqrt(v)) for k, v in sq.items()}
    return Greens1DReport(r["ngo"], r["ritz"], r["l2"], r["exact"])
