import os

import numpy as np
import pytest

from dynamics.basis import (
    Pulse,
    assemble_read,
    assemble_write,
    build_basis,
    pulse_power,
    power_ratio,
    rabi_fundamentals,
)
from dynamics.config import TABLES_DIR
from dynamics.errors import ConfigError
from dynamics.kernel import trapezoid_weights
from dynamics.model import CASE_A_LAYOUT, CASE_B_LAYOUT, mhz
from dynamics.solver import propagate_sections
from utils import read_coefficient_table


def test_pulse_is_a_sine_series_inside_its_section():
    pulse = Pulse(np.array([1.0, 0.5j]), omega_f=np.pi / 10, section_start=5.0)
    assert pulse.section_end == pytest.approx(15.0)
    t = 7.5
    expected = np.sin(np.pi / 10 * 2.5) + 0.5j * np.sin(2 * np.pi / 10 * 2.5)
    assert pulse(t) == pytest.approx(expected)
    np.testing.assert_array_equal(pulse(np.array([4.0, 15.5])), [0, 0])
    assert pulse(5.0) == pytest.approx(0.0)


def test_normalized_power():
    pulse = Pulse(np.array([0.26, 0.26j]), omega_f=1.0, section_start=0.0, amp_scale=0.26)
    assert pulse.normalized_power == pytest.approx(1.0)
    assert pulse_power(pulse) == pytest.approx(0.26**2)


@pytest.mark.parametrize("table, expected", [("case_a.csv", 0.068), ("case_b.csv", 0.013)])
def test_published_power_ratios(table, expected):
    coeffs = read_coefficient_table(os.path.join(TABLES_DIR, table), kappa=1.0)
    write = Pulse(coeffs["xi0"][0], 1.0, 0.0)
    read = Pulse(coeffs["zeta"][0], 1.0, 0.0)
    assert power_ratio(read, write) == pytest.approx(expected, abs=1e-3)


def test_rabi_fundamentals_count_half_periods():
    counts = rabi_fundamentals(CASE_A_LAYOUT, mhz(13.62))
    assert counts["write"] == pytest.approx(1.0, abs=2e-3)
    assert counts["read"] == pytest.approx(2.0, abs=2e-3)
    assert rabi_fundamentals(CASE_B_LAYOUT, mhz(13.62))["write"] == pytest.approx(2.0, abs=2e-3)


def test_basis_shapes(basis, layout):
    assert basis.n_write == 3
    assert basis.n_read == 10
    assert basis.write_responses.samples.shape == (3, 101)
    assert basis.read_responses.samples.shape == (10, 201)
    assert basis.memory_responses.t0 == pytest.approx(layout.t2)
    assert basis.omega_f_write == pytest.approx(np.pi / 5)
    assert basis.omega_f_read == pytest.approx(np.pi / 10)


def test_assembled_response_matches_direct_solve(basis, context, params):
    rng = np.random.default_rng(5)
    xi = params.kappa * (rng.normal(size=3) + 1j * rng.normal(size=3))
    zeta = params.kappa * (rng.normal(size=10) + 1j * rng.normal(size=10))
    direct = propagate_sections(
        context, basis.layout, [basis.write_pulse(xi), basis.read_pulse(zeta)]
    )
    for assembled, solved in ((assemble_write(xi, basis), direct[0]),
                              (assemble_read(zeta, xi, basis), direct[1])):
        scale = np.max(np.abs(solved.samples))
        np.testing.assert_allclose(assembled.samples, solved.samples, rtol=0, atol=1e-9 * scale)


def test_basis_independent_of_worker_count(context, layout, basis):
    parallel = build_basis(context, layout, n1=3, n2=10, n_workers=3)
    np.testing.assert_array_equal(parallel.read_responses.samples, basis.read_responses.samples)
    np.testing.assert_array_equal(parallel.memory_responses.samples,
                                  basis.memory_responses.samples)


def test_coefficient_count_checked(basis):
    with pytest.raises(ConfigError, match="coefficients"):
        assemble_read(np.zeros(9), np.zeros(3), basis)


@pytest.mark.parametrize("kwargs", [{"omega_f_write": 0.0}, {"omega_f_read": 0.0}])
def test_zero_fundamental_is_rejected(context, layout, kwargs):
    with pytest.raises(ConfigError, match="fundamentals"):
        build_basis(context, layout, n1=3, n2=10, **kwargs)


def test_gram_energy_matches_quadrature(basis, gram_matrices, params):
    rng = np.random.default_rng(6)
    xi = rng.normal(size=3) + 1j * rng.normal(size=3)
    zeta = rng.normal(size=10) + 1j * rng.normal(size=10)
    c = np.concatenate([zeta, xi])
    for name, (lo, hi) in gram_matrices.intervals.items():
        window = assemble_read(zeta, xi, basis).window(lo, hi)
        quad = np.sum(trapezoid_weights(len(window), window.dt) * np.abs(window.samples) ** 2)
        energy = np.vdot(c, gram_matrices.energy_matrix(name) @ c)
        assert energy.real == pytest.approx(quad, rel=1e-10, abs=1e-300)
        assert abs(energy.imag) <= 1e-12 * max(quad, 1e-300)


def test_gram_blocks_are_hermitian(gram_matrices):
    for block in gram_matrices.blocks.values():
        np.testing.assert_allclose(block, block.conj().T)
    assert gram_matrices.size == 13
    assert gram_matrices.at_tau_a.shape == (13,)
