import argparse
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from tabulate import tabulate
from tqdm.contrib.concurrent import thread_map

from dynamics.basis import assemble_read, assemble_write, build_basis, gram
from dynamics.config import (
    PRESET_ALIASES,
    load_config,
    to_density,
    to_layout,
    to_params,
    to_span,
)
from dynamics.errors import Error, InfeasibleError
from dynamics.kernel import trapezoid_weights
from dynamics.model import discretize, mhz
from dynamics.solver import build_context


FEASIBILITY_TOL = 1e-6
ENDPOINT_FRACTION = 1e-3
# In-bin energy below this (units of kappa^2 ns) counts as "no usable readout"
ZERO_ENERGY = 1e-12


@dataclass(frozen=True)
class ControlProblem:
    """
    Energies are in amplitude^2 * ns and powers in amplitude^2, with
    coefficients in absolute drive units. `s_target=None` asks optimize()
    to choose the readout energy itself.
    """
    basis: object
    gram: object
    layout: object
    kappa: float
    p_target: float
    s_target: float | None = None
    suppression_budget: float = 1e-3
    endpoint_budget: float | None = None
    separation: float = 0.05
    s_fraction: float = 0.9
    maxiter: int = 2_000
    tol: float = 1e-8

    @property
    def n_write(self):
        return self.gram.n_write

    @property
    def n_read(self):
        return self.gram.n_read

    @property
    def readout_length(self):
        return self.layout.tau_c - self.layout.tau_a

    @property
    def has_delay(self):
        return self.layout.tau_a > self.layout.t2

    def endpoint_for(self, s_target):
        if self.endpoint_budget is not None:
            return self.endpoint_budget
        return ENDPOINT_FRACTION * s_target / self.readout_length

    @property
    def smoothing(self):
        return 1e-12 * (self.s_target if self.s_target else self.kappa**2)


@dataclass(frozen=True)
class ControlSolution:
    xi0: np.ndarray
    xi1: np.ndarray
    zeta: np.ndarray
    objective_value: float
    constraint_residuals: dict
    converged: bool
    iterations: int
    s_target: float
    p_target: float
    seed: int | None = None
    restarts: int = 0
    history: list = field(default_factory=list)


def pack(xi0, xi1, zeta):
    return np.concatenate([
        np.real(xi0), np.imag(xi0),
        np.real(xi1), np.imag(xi1),
        np.real(zeta), np.imag(zeta),
    ])


def unpack(x, n_write, n_read):
    sizes = [n_write, n_write, n_write, n_write, n_read, n_read]
    parts = np.split(np.asarray(x, dtype=float), np.cumsum(sizes)[:-1])
    return parts[0] + 1j * parts[1], parts[2] + 1j * parts[3], parts[4] + 1j * parts[5]


def _states(xi0, xi1, zeta):
    """Coefficient vectors over the readout family [a^R, psi]."""
    return np.concatenate([zeta, xi0]), np.concatenate([zeta, xi1])


def _to_real(g0, g1, n_read):
    """Complex gradients w.r.t. c0, c1 -> real gradient in pack() order."""
    return pack(g0[n_read:], g1[n_read:], g0[:n_read] + g1[:n_read])


def _quadratic(m, c):
    mc = m @ c
    return float(np.real(np.vdot(c, mc))), 2 * mc


def _separation_terms(m_bin0, m_bin1, m_read, c0, c1, eps):
    e01, g01 = _quadratic(m_bin1, c0)
    e10, g10 = _quadratic(m_bin0, c1)
    overlap = np.vdot(c0, m_read @ c1)
    r = np.sqrt(abs(overlap) ** 2 + eps**2)
    value = e01 + e10 + r - eps
    g0 = g01 + np.conj(overlap) * (m_read @ c1) / r
    g1 = g10 + overlap * (m_read @ c0) / r
    return value, g0, g1


def objective(problem, xi0, xi1, zeta):
    """
    Off-bin energies of both states plus the smoothed modulus of their
    readout cross overlap. Returns the value and its gradient with respect to
    (Re xi0, Im xi0, Re xi1, Im xi1, Re zeta, Im zeta).
    """
    g = problem.gram
    c0, c1 = _states(*(np.asarray(v, dtype=complex) for v in (xi0, xi1, zeta)))
    value, g0, g1 = _separation_terms(
        g.energy_matrix("bin0"), g.energy_matrix("bin1"),
        g.energy_matrix("readout"), c0, c1, problem.smoothing,
    )
    return value, _to_real(g0, g1, problem.n_read)


def cross_overlap(problem, xi0, xi1, zeta):
    c0, c1 = _states(xi0, xi1, zeta)
    return complex(np.vdot(c0, problem.gram.energy_matrix("readout") @ c1))


def constraints(problem, xi0, xi1, zeta, s_target=None):
    """
    Named residuals. Equalities ("energy_i", "power_i") vanish at a feasible
    point; inequalities ("delay_i", "endpoint_i") must be <= 0.
    """
    s = problem.s_target if s_target is None else s_target
    g = problem.gram
    residuals = {}
    for i, (xi, c) in enumerate(zip((xi0, xi1), _states(xi0, xi1, zeta))):
        in_bin, _ = _quadratic(g.energy_matrix(f"bin{i}"), c)
        delay, _ = _quadratic(g.energy_matrix("delay"), c)
        residuals[f"energy_{i}"] = in_bin - s
        residuals[f"power_{i}"] = 0.5 * float(np.sum(np.abs(xi) ** 2)) - problem.p_target
        residuals[f"delay_{i}"] = delay - problem.suppression_budget * s
        residuals[f"endpoint_{i}"] = (
            abs(np.dot(c, g.at_tau_a)) ** 2 - problem.endpoint_for(s)
        )
    return residuals


def is_feasible(problem, residuals, s_target, tol=FEASIBILITY_TOL):
    for i in (0, 1):
        if abs(residuals[f"energy_{i}"]) > tol * s_target:
            return False
        if abs(residuals[f"power_{i}"]) > tol * problem.p_target:
            return False
        if residuals[f"delay_{i}"] > tol * s_target:
            return False
        if residuals[f"endpoint_{i}"] > tol * max(problem.endpoint_for(s_target), 1e-300):
            return False
    return True


class _Scaled:
    """
    The problem in well-scaled units for SLSQP: coefficients divided by kappa,
    energies divided by kappa^2 times the mean diagonal readout energy.
    """

    def __init__(self, problem):
        g = problem.gram
        self.problem = problem
        self.n_read, self.n_write = problem.n_read, problem.n_write
        m_read = g.energy_matrix("readout")
        self.m_ref = max(float(np.real(np.trace(m_read))) / g.size, 1e-300)
        self.energy_unit = problem.kappa**2 * self.m_ref

        def scaled(name):
            return g.energy_matrix(name) / self.m_ref

        self.m_bin = (scaled("bin0"), scaled("bin1"))
        self.m_read = scaled("readout")
        self.m_delay = scaled("delay")
        self.x_a = g.at_tau_a / np.sqrt(self.m_ref)
        self.p = problem.p_target / problem.kappa**2
        self.eps = problem.smoothing / self.energy_unit
        self.endpoint_slope = ENDPOINT_FRACTION / problem.readout_length
        self.n_x = 4 * self.n_write + 2 * self.n_read

    def states(self, x):
        return _states(*unpack(x, self.n_write, self.n_read))

    def objective(self, x):
        c0, c1 = self.states(x)
        value, g0, g1 = _separation_terms(
            self.m_bin[0], self.m_bin[1], self.m_read, c0, c1, self.eps
        )
        return value, _to_real(g0, g1, self.n_read)

    def _zero(self):
        return np.zeros(self.n_read + self.n_write, dtype=complex)

    def _one_state(self, i, g):
        z = self._zero()
        return _to_real(g, z, self.n_read) if i == 0 else _to_real(z, g, self.n_read)

    def equalities(self, x, s):
        values, jac_x, jac_s = [], [], []
        for i, c in enumerate(self.states(x)):
            e, g = _quadratic(self.m_bin[i], c)
            values.append(e - s)
            jac_x.append(self._one_state(i, g))
            jac_s.append(-1.0)
        for i, c in enumerate(self.states(x)):
            xi = c[self.n_read:]
            g = self._zero()
            g[self.n_read:] = xi
            values.append((0.5 * np.sum(np.abs(xi) ** 2) - self.p) / self.p)
            jac_x.append(self._one_state(i, g) / self.p)
            jac_s.append(0.0)
        return np.array(values), np.array(jac_x), np.array(jac_s)

    def inequalities(self, x, s, fixed_endpoint=None):
        budget = self.problem.suppression_budget
        values, jac_x, jac_s = [], [], []
        for i, c in enumerate(self.states(x)):
            if self.problem.has_delay:
                e, g = _quadratic(self.m_delay, c)
                values.append(budget * s - e)
                jac_x.append(-self._one_state(i, g))
                jac_s.append(budget)
            v = np.dot(c, self.x_a)
            g = 2 * np.conj(self.x_a) * v
            if fixed_endpoint is None:
                values.append(self.endpoint_slope * s - abs(v) ** 2)
                jac_s.append(self.endpoint_slope)
            else:
                values.append(fixed_endpoint - abs(v) ** 2)
                jac_s.append(0.0)
            jac_x.append(-self._one_state(i, g))
        return np.array(values), np.array(jac_x), np.array(jac_s)

    def initial_point(self, rng):
        def on_sphere(n, power):
            z = rng.standard_normal(n) + 1j * rng.standard_normal(n)
            return z * np.sqrt(2 * power / np.sum(np.abs(z) ** 2))

        xi0 = on_sphere(self.n_write, self.p)
        xi1 = on_sphere(self.n_write, self.p)
        zeta = 0.1 * on_sphere(self.n_read, self.p)
        return pack(xi0, xi1, zeta)


def _max_energy_pass(sp, x0):
    """Largest in-bin energy s compatible with every constraint and separation."""
    c0, c1 = sp.states(x0)
    s0 = max(min(_quadratic(sp.m_bin[0], c0)[0], _quadratic(sp.m_bin[1], c1)[0]), 1e-6)
    z0 = np.append(x0, s0)
    n = sp.n_x
    sep = sp.problem.separation

    def fun(z):
        grad = np.zeros_like(z)
        grad[-1] = -1.0
        return -z[-1], grad

    def eq(z):
        return sp.equalities(z[:n], z[-1])[0]

    def eq_jac(z):
        _, jx, js = sp.equalities(z[:n], z[-1])
        return np.column_stack([jx, js])

    def ineq(z):
        values = sp.inequalities(z[:n], z[-1])[0]
        obj, _ = sp.objective(z[:n])
        return np.append(values, sep * z[-1] - obj)

    def ineq_jac(z):
        _, jx, js = sp.inequalities(z[:n], z[-1])
        _, g = sp.objective(z[:n])
        return np.vstack([np.column_stack([jx, js]), np.append(-g, sep)])

    res = minimize(
        fun, z0, jac=True, method="SLSQP",
        bounds=[(None, None)] * n + [(0.0, None)],
        constraints=[
            {"type": "eq", "fun": eq, "jac": eq_jac},
            {"type": "ineq", "fun": ineq, "jac": ineq_jac},
        ],
        options={"maxiter": sp.problem.maxiter, "ftol": sp.problem.tol},
    )
    return res.x[:n], float(res.x[-1]), res


def _separation_pass(sp, x0, s):
    endpoint = None
    if sp.problem.endpoint_budget is not None:
        endpoint = sp.problem.endpoint_budget / sp.energy_unit
    return minimize(
        sp.objective, x0, jac=True, method="SLSQP",
        constraints=[
            {"type": "eq",
             "fun": lambda x: sp.equalities(x, s)[0],
             "jac": lambda x: sp.equalities(x, s)[1]},
            {"type": "ineq",
             "fun": lambda x: sp.inequalities(x, s, endpoint)[0],
             "jac": lambda x: sp.inequalities(x, s, endpoint)[1]},
        ],
        options={"maxiter": sp.problem.maxiter, "ftol": sp.problem.tol},
    )


def _zero_solution(problem, seed, restarts):
    zeros = (np.zeros(problem.n_write, dtype=complex),) * 2
    zeta = np.zeros(problem.n_read, dtype=complex)
    return ControlSolution(
        xi0=zeros[0], xi1=zeros[1], zeta=zeta, objective_value=0.0,
        constraint_residuals=constraints(problem, *zeros, zeta, s_target=0.0),
        converged=True, iterations=0, s_target=0.0,
        p_target=problem.p_target, seed=seed, restarts=restarts,
    )


def evaluate_solution(problem, xi0, xi1, zeta):
    """
    Wrap externally supplied coefficients (e.g. a published table) as a
    ControlSolution; the readout energy target is the mean in-bin energy.
    """
    xi0, xi1, zeta = (np.asarray(v, dtype=complex) for v in (xi0, xi1, zeta))
    g = problem.gram
    energies = [_quadratic(g.energy_matrix(f"bin{i}"), c)[0]
                for i, c in enumerate(_states(xi0, xi1, zeta))]
    s = problem.s_target if problem.s_target is not None else 0.5 * sum(energies)
    value, _ = objective(problem, xi0, xi1, zeta)
    residuals = constraints(problem, xi0, xi1, zeta, s_target=s)
    return ControlSolution(
        xi0=xi0, xi1=xi1, zeta=zeta, objective_value=value,
        constraint_residuals=residuals, converged=is_feasible(problem, residuals, s),
        iterations=0, s_target=s, p_target=problem.p_target,
    )


def optimize(problem, seed=7, restarts=4, n_workers=1, verbose=False):
    """
    Multi-start SLSQP. Without a fixed s_target every restart first maximizes
    the readout energy; the common target is then s_fraction times the best
    value and each restart minimizes the separation objective at that target.
    """
    if not any(np.any(b) for b in problem.gram.blocks.values()):
        return _zero_solution(problem, seed, restarts)

    sp = _Scaled(problem)
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(restarts)]
    starts = [sp.initial_point(rng) for rng in rngs]

    if problem.s_target is None:
        firsts = thread_map(
            lambda x0: _max_energy_pass(sp, x0), starts,
            max_workers=max(1, n_workers), disable=not verbose, desc="energy pass",
        )
        s_best = max(s for _, s, _ in firsts)
        if s_best * sp.energy_unit <= ZERO_ENERGY * problem.kappa**2:
            return _zero_solution(problem, seed, restarts)
        s_hat = problem.s_fraction * s_best
        starts = [x for x, _, _ in firsts]
        problem = replace(problem, s_target=s_hat * sp.energy_unit)
        sp = _Scaled(problem)
        if verbose:
            print(f"Readout energy target S = {problem.s_target:.6g} "
                  f"({problem.s_fraction:g} x best {s_best * sp.energy_unit:.6g})")
    s_hat = problem.s_target / sp.energy_unit

    results = thread_map(
        lambda x0: _separation_pass(sp, x0, s_hat), starts,
        max_workers=max(1, n_workers), disable=not verbose, desc="restarts",
    )

    best, history = None, []
    for k, res in enumerate(results):
        xi0, xi1, zeta = (v * problem.kappa for v in unpack(res.x, sp.n_write, sp.n_read))
        value, _ = objective(problem, xi0, xi1, zeta)
        residuals = constraints(problem, xi0, xi1, zeta)
        feasible = is_feasible(problem, residuals, problem.s_target)
        history.append({"restart": k, "objective": value, "feasible": feasible,
                        "iterations": int(res.nit), "message": str(res.message)})
        if feasible and (best is None or value < best.objective_value):
            best = ControlSolution(
                xi0=xi0, xi1=xi1, zeta=zeta, objective_value=value,
                constraint_residuals=residuals, converged=bool(res.success),
                iterations=int(res.nit), s_target=problem.s_target,
                p_target=problem.p_target, seed=seed, restarts=restarts,
            )

    if verbose:
        headers = ["Restart", "Objective", "Feasible", "Iterations"]
        table = [(h["restart"], f"{h['objective']:.4e}", h["feasible"], h["iterations"])
                 for h in history]
        print(tabulate(table, headers=headers, tablefmt="fancy_grid"))

    if best is None:
        closest = min(
            (constraints(problem, *(v * problem.kappa for v in unpack(r.x, sp.n_write, sp.n_read)))
             for r in results),
            key=lambda res: sum(abs(v) for v in res.values()),
        )
        raise InfeasibleError(
            f"no feasible control solution in {restarts} restarts", residuals=closest
        )
    return replace(best, history=history)


def _integrated_power(samples, dt):
    return float(np.sum(trapezoid_weights(samples.shape[-1], dt) * np.abs(samples) ** 2))


def storage_efficiency(problem, solution):
    """Cavity energy over [tau_a, tau_c] divided by the cavity energy of the write section."""
    basis, layout = problem.basis, problem.layout
    out = {}
    for i, xi in enumerate((solution.xi0, solution.xi1)):
        write = assemble_write(xi, basis)
        read = assemble_read(solution.zeta, xi, basis).window(layout.tau_a, layout.tau_c)
        written = _integrated_power(write.samples, write.dt)
        out[f"state_{i}"] = _integrated_power(read.samples, read.dt) / written if written else 0.0
    out["mean"] = 0.5 * (out["state_0"] + out["state_1"])
    return out


def solution_report(problem, solution):
    """Quality metrics used in manifests and summary tables."""
    c = cross_overlap(problem, solution.xi0, solution.xi1, solution.zeta)
    s = solution.s_target
    report = {
        "objective": solution.objective_value,
        "s_target": s,
        "p_target": solution.p_target,
        "normalized_cross_overlap": abs(c) / s if s else 0.0,
        "efficiency": storage_efficiency(problem, solution) if s else {},
        "residuals": solution.constraint_residuals,
        "converged": solution.converged,
        "iterations": solution.iterations,
    }
    return report


@dataclass(frozen=True)
class Setup:
    params: object
    density: object
    grid: object
    layout: object
    context: object
    basis: object
    gram: object


def prepare_context(cfg, verbose=False):
    """Config -> params, density, spectral grid, snapped layout and kernel."""
    params = to_params(cfg)
    density = to_density(cfg, params)
    grid = discretize(density, cfg.density.n_points, to_span(cfg))
    layout = to_layout(cfg).on_grid(cfg.numerics.dt)
    context = build_context(
        params, grid, cfg.numerics.dt, layout=layout,
        cache_dir=cfg.numerics.cache_dir, verbose=verbose,
    )
    return params, density, grid, layout, context


def prepare(cfg, verbose=False):
    """Config -> spectral grid, kernel, basis responses and Gram matrices."""
    params, density, grid, layout, context = prepare_context(cfg, verbose)
    b = cfg.basis
    basis = build_basis(
        context, layout, b.n1, b.n2,
        omega_f_write=None if b.omega_f_write is None else mhz(b.omega_f_write),
        omega_f_read=None if b.omega_f_read is None else mhz(b.omega_f_read),
        n_workers=cfg.numerics.n_workers, verbose=verbose,
    )
    return Setup(params, density, grid, layout, context, basis, gram(basis, layout))


def problem_from_config(cfg, setup):
    kappa = setup.params.kappa
    o = cfg.optimizer
    s_target = None if o.s_target is None else o.s_target * kappa**2
    endpoint = None if o.endpoint_budget is None else o.endpoint_budget * kappa**2
    return ControlProblem(
        basis=setup.basis, gram=setup.gram, layout=setup.layout, kappa=kappa,
        p_target=o.p_target * (cfg.basis.write_scale * kappa) ** 2,
        s_target=s_target, suppression_budget=o.suppression_budget,
        endpoint_budget=endpoint, separation=o.separation,
        s_fraction=o.s_fraction, maxiter=o.maxiter, tol=o.tol,
    )


def main():
    parser = argparse.ArgumentParser(
        description="Optimize write/readout pulses for a preset or config"
    )
    parser.add_argument(
        "--preset",
        choices=["case-a", "case-b", *PRESET_ALIASES],
        default="case-a",
        help="Parameter preset"
    )
    parser.add_argument("--config", type=str, help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="Restart seed")
    parser.add_argument("--restarts", type=int, help="Number of restarts")
    parser.add_argument(
        "-v", "--verbose",
        action="store_true",
        help="Enable verbose output"
    )
    args = parser.parse_args()

    overrides = {"optimizer": {k: v for k, v in
                               (("seed", args.seed), ("restarts", args.restarts))
                               if v is not None}}
    try:
        cfg = load_config(args.config, args.preset, overrides)
        setup = prepare(cfg, verbose=args.verbose)
        problem = problem_from_config(cfg, setup)
        solution = optimize(problem, cfg.optimizer.seed, cfg.optimizer.restarts,
                            cfg.numerics.n_workers, verbose=args.verbose)
    except Error as e:
        parser.exit(e.exit_code, f"error: {e}\n")

    report = solution_report(problem, solution)
    table = [
        ("Objective", f"{report['objective']:.4e}"),
        ("S", f"{report['s_target']:.4e}"),
        ("|O01| / S", f"{report['normalized_cross_overlap']:.3e}"),
        ("Efficiency", f"{report['efficiency']['mean']:.2%}"),
    ]
    print(tabulate(table, tablefmt="fancy_grid"))


if __name__ == "__main__":
    main()
