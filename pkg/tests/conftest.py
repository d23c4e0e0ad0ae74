import numpy as np
import pytest

from dynamics.basis import build_basis, gram
from dynamics.model import SectionLayout, SystemParams, default_shape, discretize, spin_density
from dynamics.solver import build_context
from optimizer import ControlProblem, evaluate_solution


DT = 0.05


@pytest.fixture(scope="session")
def params():
    return SystemParams()


@pytest.fixture(scope="session")
def density(params):
    return spin_density(default_shape(), params.omega_s)


@pytest.fixture(scope="session")
def grid(density):
    return discretize(density, 400)


@pytest.fixture(scope="session")
def layout():
    return SectionLayout(t1=0.0, t2=5.0, t3=15.0, tau_a=5.0, tau_c=15.0)


@pytest.fixture(scope="session")
def delayed_layout():
    return SectionLayout(t1=0.0, t2=5.0, t3=20.0, tau_a=9.0, tau_c=19.0)


@pytest.fixture(scope="session")
def context(params, grid):
    return build_context(params, grid, DT, horizon=20.0)


@pytest.fixture(scope="session")
def basis(context, layout):
    return build_basis(context, layout, n1=3, n2=10)


@pytest.fixture(scope="session")
def gram_matrices(basis, layout):
    return gram(basis, layout)


@pytest.fixture(scope="session")
def problem(basis, gram_matrices, layout, params):
    return ControlProblem(
        basis=basis, gram=gram_matrices, layout=layout,
        kappa=params.kappa, p_target=params.kappa**2,
    )


def random_coefficients(rng, n, scale):
    return scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))


@pytest.fixture(scope="session")
def solution(problem, params):
    """Random (not optimized) coefficients wrapped as a control solution."""
    rng = np.random.default_rng(0)
    k = params.kappa
    return evaluate_solution(
        problem,
        random_coefficients(rng, problem.n_write, k),
        random_coefficients(rng, problem.n_write, k),
        random_coefficients(rng, problem.n_read, 0.3 * k),
    )
