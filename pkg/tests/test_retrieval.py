import dataclasses

import numpy as np
import pytest

from dynamics.errors import ConfigError, RetrievalDegeneracyError
from retrieval import (
    Superposition,
    bloch_grid,
    bloch_vector,
    noiseless_round_trip,
    qubit_state,
    rebit_params,
    rebit_readout_sweep,
    retrieval_matrices,
    retrieval_matrices_direct,
    retrieval_sweep,
    retrieve,
)


@pytest.fixture(scope="module")
def mats(solution, gram_matrices):
    return retrieval_matrices(solution, gram_matrices)


def test_rebit_endpoints():
    zero = rebit_params(0.0)
    assert zero.alpha == 1 and zero.beta == 0
    one = rebit_params(1.0)
    assert one.alpha == 0 and one.beta == 1
    half = rebit_params(0.5, branch=-1)
    assert half.alpha == pytest.approx(0.5 - 0.5j)


@pytest.mark.parametrize("x, branch", [(-0.1, 1), (1.5, 1), (0.5, 0)])
def test_rebit_parameter_checked(x, branch):
    with pytest.raises(ConfigError):
        rebit_params(x, branch)


def test_normalized_superposition_checked():
    Superposition(np.sqrt(0.5), 1j * np.sqrt(0.5), normalized=True)
    with pytest.raises(ConfigError):
        Superposition(1.0, 1.0, normalized=True)


def test_bloch_vector_of_basis_states():
    assert bloch_vector(qubit_state(0.0, 0.0)) == pytest.approx((0.0, 0.0, 1.0))
    assert bloch_vector(qubit_state(np.pi / 2, np.pi / 2)) == pytest.approx((0.0, 1.0, 0.0))


def test_sweep_grid():
    points = bloch_grid()
    assert len(points) == 21 * 41
    assert points[0] == (0.0, 0.0)
    assert points[-1] == pytest.approx((np.pi, 2 * np.pi))


def test_gram_and_trajectory_routes_agree(solution, basis, mats):
    direct = retrieval_matrices_direct(solution, basis)
    scale = np.max(np.abs(mats.f))
    np.testing.assert_allclose(mats.f, direct.f, rtol=1e-9, atol=1e-12 * scale)
    np.testing.assert_allclose(mats.f_r, direct.f_r, rtol=1e-9, atol=1e-12 * scale)


@pytest.mark.parametrize("alpha, beta", [(1, 0), (0, 1), (0.6, 0.8j), (0.3 - 0.2j, -0.9)])
def test_noiseless_retrieval_is_exact(solution, basis, mats, alpha, beta):
    result = noiseless_round_trip(Superposition(alpha, beta), solution, basis, mats)
    assert result.eps_alpha < 1e-9
    assert result.eps_beta < 1e-9


def test_retrieve_vectorizes_over_realizations(mats):
    sup = Superposition(0.6, 0.8)
    o = mats.f @ np.array([sup.alpha, sup.beta]) + mats.f_r
    stacked = (np.full(4, o[0]), np.full(4, o[1]))
    result = retrieve(stacked, mats)
    np.testing.assert_allclose(result.alpha_r, 0.6, rtol=1e-10)
    np.testing.assert_allclose(result.beta_r, 0.8, rtol=1e-10)


def test_identical_write_pulses_cannot_be_told_apart(solution, gram_matrices):
    twin = dataclasses.replace(solution, xi1=solution.xi0.copy())
    mats = retrieval_matrices(twin, gram_matrices)
    with pytest.raises(RetrievalDegeneracyError):
        retrieve((1.0, 1.0), mats)


def test_sweep_frame_columns(solution, basis, mats):
    frame = retrieval_sweep(solution, basis, mats, bloch_grid(3, 4))
    assert len(frame) == 12
    assert {"theta", "phi", "eps_alpha", "eps_beta", "r_x", "r_y", "r_z"} <= set(frame.columns)
    assert frame[["eps_alpha", "eps_beta"]].to_numpy().max() < 1e-9


def test_rebit_readout_is_scaled_to_unit_peak(solution, basis):
    frame = rebit_readout_sweep(solution, basis)
    assert list(frame.columns) == ["t_ns", "x_0.00", "x_0.25", "x_0.50", "x_0.75", "x_1.00"]
    assert frame.drop(columns="t_ns").max().tolist() == pytest.approx([1.0] * 5)
