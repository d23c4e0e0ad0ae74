import numpy as np
import pytest

from dynamics.errors import ConfigError, NumericalInstabilityError, StepSizeError
from dynamics.kernel import KernelTable, driving_term
from dynamics.model import default_span, discretize
from dynamics.solver import (
    SpinStateVector,
    Trajectory,
    build_context,
    propagate_sections,
    section_bounds,
    solve_ode_reference,
    solve_volterra,
)


def drive(kappa):
    def eta(t):
        t = np.asarray(t, dtype=float)
        return kappa * (np.sin(np.pi * t / 20) + 0.5j * np.sin(2 * np.pi * t / 20))
    return eta


@pytest.fixture(scope="module")
def span_grid(density):
    # Bounded spectrum so the RK4 reference stays inside its stability region
    return discretize(density, 200, span=default_span(density))


def oracle_discrepancy(params, grid, dt, horizon=20.0):
    context = build_context(params, grid, dt, horizon=horizon)
    times = np.arange(int(round(horizon / dt)) + 1) * dt
    eta = drive(params.kappa)(times)
    volterra = solve_volterra(context.kernel, driving_term(params, eta, dt))
    reference = solve_ode_reference(params, SpinStateVector.from_grid(grid, params), eta, dt)
    scale = np.max(np.abs(reference.samples))
    return np.max(np.abs(volterra.samples - reference.samples)) / scale


def test_volterra_agrees_with_ode_reference(params, span_grid):
    coarse = oracle_discrepancy(params, span_grid, 0.05)
    fine = oracle_discrepancy(params, span_grid, 0.025)
    assert coarse < 1e-5
    assert coarse / fine > 3.0


def test_zero_drive_gives_zero_trajectory(context):
    result = propagate_sections(context, (0.0, 5.0, 15.0), [None, None])
    assert not np.any(result.concatenate().samples)
    assert result.final_state.is_zero


def test_solution_is_linear_in_the_drive(params, context):
    rng = np.random.default_rng(3)
    n = 201
    eta1 = rng.normal(size=n) + 1j * rng.normal(size=n)
    eta2 = rng.normal(size=n) + 1j * rng.normal(size=n)
    c = 0.3 - 1.2j

    def solve(eta):
        return solve_volterra(context.kernel, driving_term(params, eta, 0.05)).samples

    combined = solve(eta1 + c * eta2)
    np.testing.assert_allclose(combined, solve(eta1) + c * solve(eta2),
                               rtol=1e-10, atol=1e-10 * np.max(np.abs(combined)))


def test_batched_solve_matches_single_rows(params, context):
    rng = np.random.default_rng(4)
    eta = rng.normal(size=(3, 101)) + 0j
    g = driving_term(params, eta, 0.05)
    batched = solve_volterra(context.kernel, g)
    assert batched.batched
    for row, single in zip(batched.samples, g):
        np.testing.assert_allclose(row, solve_volterra(context.kernel, single).samples,
                                   rtol=1e-12, atol=1e-15)


def test_splitting_a_section_leaves_the_trajectory_unchanged(params, context):
    eta = drive(params.kappa)
    whole = propagate_sections(context, (0.0, 20.0), [eta]).concatenate()
    split = propagate_sections(context, (0.0, 7.5, 20.0), [eta, eta]).concatenate()
    assert len(split) == len(whole)
    scale = np.max(np.abs(whole.samples))
    np.testing.assert_allclose(split.samples, whole.samples, rtol=0, atol=1e-9 * scale)


def test_memory_carries_into_an_undriven_section(params, context):
    result = propagate_sections(context, (0.0, 5.0, 15.0), [drive(params.kappa), None])
    readout = result[1]
    assert readout.t0 == pytest.approx(5.0)
    assert readout.samples[0] == pytest.approx(result[0].samples[-1])
    assert np.any(np.abs(readout.samples[1:]) > 0)


def test_section_longer_than_kernel(context):
    g = np.zeros(context.kernel.n_steps + 2, dtype=complex)
    with pytest.raises(ConfigError, match="exceeds the kernel"):
        solve_volterra(context.kernel, g)


def test_unstable_kernel_reports_the_step():
    kernel = KernelTable(dt=1.0, values=np.array([0.0, 1e300, 1e300, 1e300]))
    with pytest.raises(NumericalInstabilityError, match="step"):
        solve_volterra(kernel, np.ones(4, dtype=complex))


def test_off_grid_boundaries_rejected():
    with pytest.raises(ConfigError, match="not on the dt"):
        section_bounds((0.0, 5.01, 15.0), 0.05)


def test_drive_count_checked(context):
    with pytest.raises(ConfigError, match="drives"):
        propagate_sections(context, (0.0, 5.0, 15.0), [None])


def test_drive_sample_count_checked(context):
    with pytest.raises(ConfigError, match="samples"):
        propagate_sections(context, (0.0, 5.0), [np.zeros(7)])


def test_trajectory_window_and_index():
    traj = Trajectory(t0=1.0, dt=0.5, samples=np.arange(9, dtype=complex))
    assert traj.t_end == pytest.approx(5.0)
    window = traj.window(2.0, 3.0)
    assert window.t0 == pytest.approx(2.0)
    np.testing.assert_array_equal(window.samples, [2, 3, 4])
    with pytest.raises(ConfigError, match="outside"):
        traj.index_of(6.0)


def test_trajectory_rejects_nan():
    with pytest.raises(NumericalInstabilityError, match="step 2"):
        Trajectory(t0=0.0, dt=0.1, samples=np.array([0, 1, np.nan, 3], dtype=complex))


def test_ode_reference_checks_step_size(params, grid):
    spins = SpinStateVector.from_grid(grid, params)
    with pytest.raises(StepSizeError, match="dt="):
        solve_ode_reference(params, spins, np.zeros(3), 0.5)
