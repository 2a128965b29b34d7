from __future__ import annotations

import numpy as np
import pytest

from ngo.assembly import Discretization, make_quadratures
from ngo.core import make_ngo_model, precompute_inputs, system_matrices
from ngo.data import make_dataset_C
from ngo.discretization import make_bspline_basis, make_tensor_basis
from ngo.errors import ConfigError
from ngo.io import load_dataset, load_model, save_dataset, save_model


@pytest.fixture(scope="module")
def setup():
    b = make_bspline_basis(6, 3)
    disc = Discretization(make_tensor_basis([b, b]), make_quadratures(8, 4))
    inp = precompute_inputs(make_dataset_C(4, 0), disc, nitsche=True)
    return disc, inp


@pytest.mark.parametrize("variant,neumann,se", [("model", True, True), ("data", False, False)])
def test_model_bundle_round_trip(tmp_path, setup, variant, neumann, se):
    disc, inp = setup
    m = make_ngo_model(variant, disc.basis, inp, hidden=(8,), neumann=neumann, scale_equivariant=se,
                       nitsche_in_inputs=True, theta_mean=1.0, disc=disc)
    save_model(tmp_path / "b", m, {"note": "x"})
    back, header = load_model(tmp_path / "b")
    assert header["note"] == "x"
    assert np.array_equal(system_matrices(m, inp), system_matrices(back, inp))


def test_dataset_round_trip_and_tamper_check(tmp_path):
    save_dataset(tmp_path / "d", "C", 3, 11, {"u_length_range": (0.1, 0.1)})
    samples, man = load_dataset(tmp_path / "d")
    assert [s.seed for s in samples] == [11, 12, 13]
    assert all(s.params["u_length"] == 0.1 for s in samples)
    arr = dict(np.load(tmp_path / "d" / "arrays.npz"))
    arr["theta"][0, 0] += 1.0
    np.savez(tmp_path / "d" / "arrays.npz", **arr)
    with pytest.raises(ConfigError):
        load_dataset(tmp_path / "d")


def test_missing_files(tmp_path):
    with pytest.raises(ConfigError):
        load_model(tmp_path)
    with pytest.raises(ConfigError):
        load_dataset(tmp_path)
