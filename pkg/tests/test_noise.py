import numpy as np
import pytest

from dynamics.errors import ConfigError
from dynamics.model import SystemParams
from dynamics.solver import build_context, propagate_sections
from noise import (
    NoiseHarness,
    NoiseSpec,
    bare_cavity_variance,
    error_vs_amplitude,
    kick_response,
    monte_carlo_direct,
    monte_carlo_retrieval,
    noise_stream,
    noise_sweep,
    solve_noisy,
    unit_noise_responses,
)
from retrieval import Superposition, bloch_grid, encode, retrieval_matrices


@pytest.fixture(scope="module")
def mats(solution, gram_matrices):
    return retrieval_matrices(solution, gram_matrices)


@pytest.fixture(scope="module")
def harness(solution, basis, context, mats, params):
    spec = NoiseSpec(delta_eta=0.05 * params.kappa, n_realizations=16, seed=3)
    return NoiseHarness.build(solution, basis, context, mats, spec)


def test_noise_stream_is_reproducible():
    spec = NoiseSpec(delta_eta=1.0, seed=11)
    first = noise_stream(spec, 4, 500)
    np.testing.assert_array_equal(first, noise_stream(spec, 4, 500))
    assert not np.allclose(first, noise_stream(spec, 5, 500))
    assert not np.allclose(first, noise_stream(NoiseSpec(delta_eta=1.0, seed=12), 4, 500))


def test_noise_stream_has_unit_power():
    draws = noise_stream(NoiseSpec(delta_eta=1.0), 0, 20000)
    assert np.mean(np.abs(draws) ** 2) == pytest.approx(1.0, abs=0.05)
    assert abs(np.mean(draws)) < 0.05
    real = noise_stream(NoiseSpec(delta_eta=1.0, complex_noise=False), 0, 100)
    assert not np.any(real.imag)


@pytest.mark.parametrize("kwargs", [
    {"delta_eta": -0.1},
    {"delta_eta": 0.1, "n_realizations": 0},
    {"delta_eta": 0.1, "sections": "read"},
])
def test_noise_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        NoiseSpec(**kwargs)


def test_kick_response_is_damped_accumulation(params):
    dt = 0.05
    q = np.exp(-params.cavity_rate * dt)
    response = kick_response(params, np.array([1.0, 0.0, 0.0, 2.0]), dt)
    assert response.shape == (1, 5)
    np.testing.assert_allclose(response[0], [0, 1, q, q**2, q**3 + 2])


def test_zero_amplitude_reproduces_deterministic_solve(solution, basis, context, layout):
    drives = [basis.write_pulse(solution.xi0), basis.read_pulse(solution.zeta)]
    quiet = solve_noisy(context, layout, drives, NoiseSpec(delta_eta=0.0), 0)
    plain = propagate_sections(context, layout, drives)
    for a, b in zip(quiet.sections, plain.sections):
        np.testing.assert_array_equal(a.samples, b.samples)


def test_unit_responses_are_batched_per_realization(context, layout):
    spec = NoiseSpec(delta_eta=1.0, n_realizations=11)
    unit = unit_noise_responses(context, layout, spec)
    assert unit.samples.shape == (11, int(round((layout.t3 - layout.t2) / context.dt)) + 1)
    assert unit.t0 == pytest.approx(layout.t2)


def test_linear_path_matches_end_to_end_solves(solution, basis, context, mats, params):
    spec = NoiseSpec(delta_eta=0.1 * params.kappa, n_realizations=3, seed=5)
    sup = Superposition(0.6, 0.8j)
    linear = monte_carlo_retrieval(sup, solution, spec, basis, context, mats, keep=True)
    direct = monte_carlo_direct(sup, solution, spec, basis, context, mats)
    for a, b in zip(linear.per_realization, direct.per_realization):
        np.testing.assert_allclose(a, b, rtol=1e-8, atol=1e-10)
    assert linear.eps_alpha == pytest.approx(direct.eps_alpha, rel=1e-6, abs=1e-12)


def test_harness_is_deterministic(solution, basis, context, mats, harness):
    again = NoiseHarness.build(solution, basis, context, mats, harness.noise)
    np.testing.assert_array_equal(again.o_noise, harness.o_noise)
    sup = Superposition(np.sqrt(0.5), np.sqrt(0.5))
    assert again.study(sup).mean_alpha == harness.study(sup).mean_alpha


def test_noisy_retrieval_has_error_and_spread(harness):
    sup = Superposition(1.0, 0.0)
    quiet = harness.study(sup, delta_eta=0.0)
    noisy = harness.study(sup, keep=True)
    assert quiet.eps_alpha < 1e-9
    assert noisy.std_err[0] > 0
    assert len(noisy.per_realization[0]) == 16


def test_averaged_retrieval_is_unbiased(solution, basis, context, mats, params):
    spec = NoiseSpec(delta_eta=0.2 * params.kappa, n_realizations=400, seed=9)
    harness = NoiseHarness.build(solution, basis, context, mats, spec)
    sup = Superposition(0.6, 0.8j)
    res = harness.study(sup, keep=True)
    assert res.eps_alpha <= 4 * res.std_err[0]
    assert res.eps_beta <= 4 * res.std_err[1]
    single = np.abs(res.per_realization[0] - sup.alpha)
    assert res.eps_alpha < np.mean(single)


def test_noise_sweep_frame(harness):
    frame = noise_sweep(harness, bloch_grid(2, 3))
    assert len(frame) == 6
    assert {"eps_alpha", "eps_beta", "se_alpha", "se_beta"} <= set(frame.columns)
    quiet = noise_sweep(harness, bloch_grid(2, 3), delta_eta=0.0)
    assert quiet[["eps_alpha", "eps_beta"]].to_numpy().max() < 1e-9


def test_mean_error_grows_linearly_with_amplitude(harness, params):
    frame, fit = error_vs_amplitude(harness, [0.0, 0.02, 0.05, 0.1], bloch_grid(3, 3),
                                    eta0=params.kappa)
    assert list(frame.columns) == ["delta_eta_rel", "max_eps"]
    assert frame["max_eps"].is_monotonic_increasing
    assert fit["r_squared"] > 0.999
    assert fit["slope"] > 0


def test_uncoupled_cavity_matches_analytic_variance(grid, layout):
    params = SystemParams(Omega=0.0)
    context = build_context(params, grid, 0.05, horizon=20.0)
    spec = NoiseSpec(delta_eta=1.0, n_realizations=400, seed=21)
    unit = unit_noise_responses(context, layout, spec)
    n_steps = int(round(layout.t3 / context.dt))
    expected = bare_cavity_variance(params, 1.0, context.dt, n_steps)
    assert np.mean(np.abs(unit.samples[:, -1]) ** 2) == pytest.approx(expected, rel=0.25)


def test_encoded_drive_is_linear_in_amplitudes(solution):
    both = encode(Superposition(0.5, 0.5), solution)
    np.testing.assert_allclose(both, 0.5 * (solution.xi0 + solution.xi1))
