import dataclasses

import numpy as np
import pytest

from dynamics.basis import GramMatrices, assemble_read, assemble_write
from dynamics.kernel import trapezoid_weights
from optimizer import (
    FEASIBILITY_TOL,
    constraints,
    cross_overlap,
    is_feasible,
    objective,
    optimize,
    pack,
    storage_efficiency,
    unpack,
)


def test_pack_layout(problem):
    xi0 = np.array([1 + 2j, 3 + 4j, 5 + 6j])
    x = pack(xi0, 2 * xi0, np.arange(10) * 1j)
    assert x[:3].tolist() == [1, 3, 5]
    assert x[3:6].tolist() == [2, 4, 6]
    xi0_back, xi1_back, zeta_back = unpack(x, 3, 10)
    np.testing.assert_array_equal(xi1_back, 2 * xi0)
    np.testing.assert_array_equal(zeta_back, np.arange(10) * 1j)


def test_objective_gradient_matches_finite_differences(problem, solution):
    x = pack(solution.xi0, solution.xi1, solution.zeta)
    _, grad = objective(problem, solution.xi0, solution.xi1, solution.zeta)
    h = 1e-4 * problem.kappa
    fd = np.empty_like(x)
    for i in range(len(x)):
        step = np.zeros_like(x)
        step[i] = h
        up, _ = objective(problem, *unpack(x + step, problem.n_write, problem.n_read))
        down, _ = objective(problem, *unpack(x - step, problem.n_write, problem.n_read))
        fd[i] = (up - down) / (2 * h)
    np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-7 * np.max(np.abs(fd)))


def test_objective_counts_off_bin_energy(problem, solution, basis, layout):
    value, _ = objective(problem, solution.xi0, solution.xi1, solution.zeta)

    def energy(xi, lo, hi):
        w = assemble_read(solution.zeta, xi, basis).window(lo, hi)
        return np.sum(trapezoid_weights(len(w), w.dt) * np.abs(w.samples) ** 2)

    off_bin = (energy(solution.xi0, layout.tau_b, layout.tau_c)
               + energy(solution.xi1, layout.tau_a, layout.tau_b))
    overlap = abs(cross_overlap(problem, solution.xi0, solution.xi1, solution.zeta))
    assert value == pytest.approx(off_bin + overlap, rel=1e-8)


def test_constraint_residuals(problem, solution):
    residuals = constraints(problem, solution.xi0, solution.xi1, solution.zeta,
                            s_target=solution.s_target)
    assert set(residuals) == {f"{k}_{i}" for k in ("energy", "power", "delay", "endpoint")
                              for i in (0, 1)}
    power = 0.5 * np.sum(np.abs(solution.xi0) ** 2)
    assert residuals["power_0"] == pytest.approx(power - problem.p_target)
    # No delay section: nothing to suppress
    assert residuals["delay_0"] <= 0
    assert residuals["energy_0"] == pytest.approx(-residuals["energy_1"])


def test_storage_efficiency_is_an_energy_ratio(problem, solution, basis, layout):
    efficiency = storage_efficiency(problem, solution)

    def energy(traj):
        return np.trapezoid(np.abs(traj.samples) ** 2, dx=traj.dt)

    ratios = []
    for xi in (solution.xi0, solution.xi1):
        read = assemble_read(solution.zeta, xi, basis).window(layout.tau_a, layout.tau_c)
        ratios.append(energy(read) / energy(assemble_write(xi, basis)))
    assert efficiency["state_0"] == pytest.approx(ratios[0], rel=1e-10)
    assert efficiency["state_1"] == pytest.approx(ratios[1], rel=1e-10)
    assert efficiency["mean"] == pytest.approx(np.mean(ratios), rel=1e-10)


def test_random_coefficients_are_not_feasible(problem, solution):
    assert not is_feasible(problem, solution.constraint_residuals, solution.s_target)


def test_zero_gram_returns_zero_solution(problem):
    zero = GramMatrices(
        blocks={k: np.zeros_like(v) for k, v in problem.gram.blocks.items()},
        intervals=problem.gram.intervals,
        at_tau_a=np.zeros_like(problem.gram.at_tau_a),
        n_read=problem.n_read,
        n_write=problem.n_write,
    )
    result = optimize(dataclasses.replace(problem, gram=zero), seed=1, restarts=2)
    assert result.objective_value == 0.0
    assert not np.any(result.zeta)
    assert result.converged


@pytest.mark.slow
def test_optimize_small_problem_is_feasible_and_reproducible(problem):
    first = optimize(problem, seed=7, restarts=2)
    second = optimize(problem, seed=7, restarts=2, n_workers=2)
    assert is_feasible(problem, first.constraint_residuals, first.s_target, FEASIBILITY_TOL)
    np.testing.assert_array_equal(first.zeta, second.zeta)
    assert first.objective_value < 0.05 * first.s_target
    efficiency = storage_efficiency(problem, first)
    assert efficiency["mean"] > 0
