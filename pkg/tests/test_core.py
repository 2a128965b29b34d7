from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ngo.assembly import Discretization, make_quadratures
from ngo.core import (
    GreensFunctionView,
    InverseOracle,
    NeumannConfig,
    NgoModel,
    batch_loss_closure,
    extract_greens,
    make_ngo_model,
    neumann_apply,
    neumann_truncation_ratio,
    ngo_forward,
    ngo_inner_solver,
    poisson_1d_greens,
    precompute_inputs,
    relative_errors,
    spectral_radius,
    system_matrices,
    train_data_free_ngo,
    train_model_ngo,
)
from ngo.data import make_dataset_C, make_dataset_F
from ngo.discretization import make_bspline_basis, make_tensor_basis
from ngo.errors import ConfigError, NumericalError
from ngo.nn import Mlp, TrainConfig, grad_check
from ngo.solvers import PicardConfig, fem_inner_solver, picard_solve


@pytest.fixture(scope="module")
def disc():
    b = make_bspline_basis(6, 3)
    return Discretization(make_tensor_basis([b, b]), make_quadratures(8, 4))


@pytest.fixture(scope="module")
def inputs(disc):
    return precompute_inputs(make_dataset_C(24, 11), disc, nitsche=True, fem=True)


def _model(disc, inputs, variant="model", **kw):
    kw.setdefault("hidden", (16,))
    return make_ngo_model(variant, disc.basis, inputs, theta_mean=1.0, disc=disc,
                          nitsche_in_inputs=True, **kw)


def test_zero_data_gives_zero(disc, inputs):
    m = _model(disc, inputs)
    sub = inputs.subset(np.arange(3))
    sub.d = np.zeros_like(sub.d)
    assert np.all(ngo_forward(m, sub) == 0)


@pytest.mark.parametrize("neumann,se", [(True, True), (True, False), (False, True), (False, False)])
def test_inverse_oracle_reproduces_fem(disc, inputs, neumann, se):
    m = _model(disc, inputs, neumann=neumann, scale_equivariant=se)
    u = ngo_forward(m.with_flags(net=InverseOracle(m)), inputs)
    assert np.abs(u - inputs.fem).max() < 1e-10 * np.abs(inputs.fem).max()


def test_neumann_at_mean_theta_is_F0_inverse(disc):
    inp = precompute_inputs([_constant_theta_sample(1.0)], disc, nitsche=True)
    m = _model(disc, inp, neumann=True)
    m.net = Mlp([np.zeros_like(w) for w in m.net.weights])
    A = system_matrices(m, inp)[0]
    assert np.abs(A - m.neumann.F0_inverse).max() < 1e-12 * np.abs(A).max()


def _constant_theta_sample(value):
    s = make_dataset_C(1, 0)[0]
    return replace(s, fields=replace(s.fields, theta=value))


def test_neumann_apply_K0_and_no_perturbation():
    rng = np.random.default_rng(0)
    F0 = rng.standard_normal((5, 5)) + 5 * np.eye(5)
    F0i = np.linalg.inv(F0)
    dF = 0.1 * rng.standard_normal((5, 5))
    assert np.array_equal(neumann_apply(F0i, dF, K=0), F0i)
    assert np.allclose(neumann_apply(F0i, np.zeros((5, 5)), K=3), F0i, rtol=0, atol=1e-15)
    with pytest.raises(ConfigError):
        neumann_apply(F0i, dF, K=-1)


def test_neumann_truncation_ratio_matches_spectral_radius(disc, inputs):
    m = _model(disc, inputs)
    F0, F0i = m.neumann.F0, m.neumann.F0_inverse
    for F in inputs.F[:5]:
        rho = spectral_radius(-(F - F0) @ F0i)
        assert rho < 0.9
        ratio, errs = neumann_truncation_ratio(F0i, F)
        assert np.all(np.diff(errs[:6]) < 0)
        assert abs(ratio / rho - 1) < 0.2


def test_truncation_errors_match_direct_differences(disc, inputs):
    m = _model(disc, inputs)
    F0i = m.neumann.F0_inverse
    F = inputs.F[0]
    _, errs = neumann_truncation_ratio(F0i, F, K_max=4)
    direct = [np.linalg.norm(neumann_apply(F0i, F - m.neumann.F0, K) - np.linalg.inv(F)) for K in range(3)]
    np.testing.assert_allclose(errs[:3], direct, rtol=1e-8)


def test_truncation_ratio_of_exact_operator_is_nan(disc, inputs):
    m = _model(disc, inputs)
    F0i = m.neumann.F0_inverse
    ratio, errs = neumann_truncation_ratio(F0i, np.linalg.inv(F0i))
    assert np.isnan(ratio) and np.all(errs == 0)


@settings(max_examples=15, deadline=None)
@given(c=st.floats(0.1, 10.0), seed=st.integers(0, 100))
def test_scale_equivariance(disc, inputs, c, seed):
    m = _model(disc, inputs, scale_equivariant=True, seed=seed, out_scale=1.0)
    sub = inputs.subset(np.arange(2))
    scaled = sub.subset(np.arange(2))
    scaled.F = c * sub.F
    A, Ac = system_matrices(m, sub), system_matrices(m, scaled)
    assert np.abs(c * Ac - A).max() <= 1e-10 * np.abs(A).max()


def test_scale_equivariance_data_variant(disc, inputs):
    m = _model(disc, inputs, variant="data", scale_equivariant=True, out_scale=1.0)
    sub = inputs.subset(np.arange(2))
    scaled = sub.subset(np.arange(2))
    scaled.Fn = 3.0 * sub.Fn
    assert np.allclose(3.0 * system_matrices(m, scaled), system_matrices(m, sub), rtol=1e-12, atol=0)


def test_doubling_theta_and_data_keeps_solution(disc, inputs):
    m = _model(disc, inputs, scale_equivariant=True, out_scale=1.0)
    sub = inputs.subset(np.arange(3))
    two = sub.subset(np.arange(3))
    two.F, two.d = 2 * sub.F, 2 * sub.d
    assert np.allclose(ngo_forward(m, two), ngo_forward(m, sub), rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("variant", ["model", "data-free", "data"])
def test_linearity_in_data(disc, inputs, variant):
    m = _model(disc, inputs, variant=variant, neumann=variant != "data", out_scale=1.0)
    sub = inputs.subset(np.arange(4))
    rng = np.random.default_rng(1)
    d1, d2 = rng.standard_normal(sub.d.shape), rng.standard_normal(sub.d.shape)
    out = []
    for d in (d1, d2, 2.0 * d1 - 0.5 * d2):
        sub.d = d
        out.append(ngo_forward(m, sub))
    assert np.allclose(out[2], 2.0 * out[0] - 0.5 * out[1], rtol=1e-12, atol=1e-14)


def test_greens_zero_matrix_and_reciprocity():
    b = make_tensor_basis([make_bspline_basis(5, 2)] * 2)
    rng = np.random.default_rng(2)
    X, Xp = rng.random((7, 2)), rng.random((9, 2))
    assert np.all(extract_greens(np.zeros((25, 25)), X, Xp, basis=b) == 0)
    S = rng.standard_normal((25, 25))
    G = GreensFunctionView(S + S.T, b)
    assert np.allclose(G(X, Xp), G(Xp, X).T, rtol=1e-13, atol=1e-13)


def test_extract_greens_from_model(disc, inputs):
    m = _model(disc, inputs)
    X = np.random.default_rng(3).random((5, 2))
    G = extract_greens(m, X, X, inputs.subset([0]))
    A = system_matrices(m, inputs.subset([0]))[0]
    assert np.allclose(G, disc.basis.eval(X) @ A @ disc.basis.eval(X).T)
    with pytest.raises(ConfigError):
        extract_greens(m, X, X, inputs)


def test_greens_1d_poisson():
    r = poisson_1d_greens(16, 3)
    assert r.ngo_error <= r.ritz_error + 1e-8
    assert abs(r.exact_norm - np.sqrt(1 / 90)) < 1e-12
    assert r.l2_projection_error <= r.ritz_error
    assert r.ngo_error < 2e-2 * r.exact_norm


def _flat_loss(model, inputs, kind):
    fn = batch_loss_closure(model, inputs, kind)
    idx = np.arange(len(inputs))

    def loss(theta):
        model.net.set_flat(theta)
        return fn(model.net, idx)[0]

    def grad(theta):
        model.net.set_flat(theta)
        return np.concatenate([g.ravel() for g in fn(model.net, idx)[1]])

    return loss, grad


@pytest.mark.parametrize("variant,kind,neumann,se", [
    ("model", "solution", True, True),
    ("model", "solution", False, False),
    ("data-free", "matrix", True, False),
    ("data-free", "matrix", False, True),
    ("data", "solution", False, True),
])
def test_gradients_match_finite_differences(disc, inputs, variant, kind, neumann, se):
    m = _model(disc, inputs, variant=variant, neumann=neumann, scale_equivariant=se, out_scale=1.0)
    loss, grad = _flat_loss(m, inputs.subset(np.arange(6)), kind)
    r = grad_check(loss, grad, m.net.get_flat(), h=1e-4, n_coords=40)
    assert r.checked.size >= 30
    assert r.max_rel_error < 1e-4


def test_data_free_loss_zero_at_inverse(disc, inputs):
    m = _model(disc, inputs, variant="data-free")
    oracle = m.with_flags(net=InverseOracle(m))
    from ngo.nn import loss_matrix_pseudoinverse

    assert loss_matrix_pseudoinverse(system_matrices(oracle, inputs), inputs.F) < 1e-10 * np.abs(inputs.F).max()


def test_data_free_training_and_fem_bound(disc, inputs):
    tr, te = inputs.subset(np.arange(16)), inputs.subset(np.arange(16, 24))
    m = _model(disc, tr, variant="data-free")
    res = train_data_free_ngo(m, tr, te, TrainConfig(epochs=15, batch_size=8, learning_rate=1e-3))
    assert res.val_loss[res.best_epoch] < res.val_loss[0]
    # Galerkin is not L²-optimal, so the bound is checked on the mean
    e_ngo = relative_errors(ngo_forward(m, te), te)
    e_fem = relative_errors(te.fem, te)
    assert e_ngo.mean() >= e_fem.mean()


def test_model_training_reduces_error(disc, inputs):
    tr, te = inputs.subset(np.arange(16)), inputs.subset(np.arange(16, 24))
    m = _model(disc, tr)
    before = relative_errors(ngo_forward(m, te), te).mean()
    train_model_ngo(m, tr, te, TrainConfig(epochs=10, batch_size=8))
    assert relative_errors(ngo_forward(m, te), te).mean() <= before


def test_configuration_errors(disc, inputs):
    m = _model(disc, inputs)
    with pytest.raises(ConfigError):
        NgoModel("data", disc.basis, m.net, m.neumann)
    with pytest.raises(ConfigError):
        NgoModel("model", disc.basis, m.net, NeumannConfig(None, 1.0))
    with pytest.raises(ConfigError):
        NgoModel("other", disc.basis, m.net)
    with pytest.raises(ConfigError):
        train_data_free_ngo(m, inputs, None, TrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        InverseOracle(_model(disc, inputs, variant="data"))


def test_degenerate_scale(disc, inputs):
    m = _model(disc, inputs, scale_equivariant=True)
    sub = inputs.subset([0])
    sub.F = 0 * sub.F
    with pytest.raises(NumericalError, match="degenerate"):
        system_matrices(m, sub)


def test_ngo_picard_with_oracle_matches_fem_picard(disc):
    s = make_dataset_F(1, 4)[0]
    fl = s.fields
    inp = precompute_inputs(make_dataset_C(4, 1), disc, nitsche=True)
    m = _model(disc, inp)
    oracle = m.with_flags(net=InverseOracle(m))
    cfg = PicardConfig(alpha=fl.alpha, max_iterations=20)
    a = picard_solve(fl.theta0, disc, ngo_inner_solver(oracle, disc, fl.f, fl.eta, fl.g), cfg)
    b = picard_solve(fl.theta0, disc, fem_inner_solver(disc, fl.f, fl.eta, fl.g), cfg)
    assert np.abs(a.solution - b.solution).max() < 1e-9 * np.abs(b.solution).max()
