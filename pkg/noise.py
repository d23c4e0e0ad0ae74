from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import signal, stats
from tabulate import tabulate
from tqdm import tqdm

from dynamics.basis import CHUNK_ROWS, assemble_read
from dynamics.errors import ConfigError
from dynamics.kernel import trapezoid_weights
from dynamics.solver import Trajectory, propagate_sections, section_bounds
from retrieval import (
    bloch_grid,
    encode,
    overlaps,
    qubit_state,
    reference_responses,
    retrieve,
)


RNG_ALGORITHM = "numpy.random.Philox/SeedSequence([seed, realization])"


@dataclass(frozen=True)
class NoiseSpec:
    """
    White drive noise delta_eta * upsilon(t). Kicks sqrt(dt) * delta_eta * xi_m
    are added after every step; xi_m is circular complex Gaussian with
    E|xi|^2 = 1, or real standard normal when `complex_noise` is off.
    """
    delta_eta: float
    n_realizations: int = 200
    seed: int = 7
    complex_noise: bool = True
    sections: str = "all"

    def __post_init__(self):
        if self.delta_eta < 0:
            raise ConfigError(f"noise amplitude must be >= 0, got {self.delta_eta}")
        if self.n_realizations < 1:
            raise ConfigError(
                f"need at least one noise realization, got {self.n_realizations}"
            )
        if self.sections not in ("all", "write"):
            raise ConfigError(f"noise sections must be 'all' or 'write', got {self.sections}")


@dataclass(frozen=True)
class NoiseStudyResult:
    mean_alpha: complex
    mean_beta: complex
    eps_alpha: float
    eps_beta: float
    std_err: tuple
    per_realization: tuple | None = None


def noise_stream(spec, realization, n_steps):
    """Unit draws xi_0..xi_{n-1} for one realization; draw m is the kick after step m."""
    seq = np.random.SeedSequence([spec.seed, realization])
    rng = np.random.Generator(np.random.Philox(seq))
    draws = rng.standard_normal((2, n_steps))
    if spec.complex_noise:
        return (draws[0] + 1j * draws[1]) / np.sqrt(2)
    return draws[0] + 0j


def kick_response(params, kicks, dt):
    """
    Cavity free evolution of post-step kicks: D[0] = 0,
    D[m+1] = exp(-b dt) D[m] + kicks[m].
    """
    kicks = np.atleast_2d(kicks)
    step = np.zeros((kicks.shape[0], kicks.shape[1] + 1), dtype=complex)
    step[:, 1:] = kicks
    b = params.cavity_rate
    return signal.lfilter([1.0], [1.0, -np.exp(-b * dt)], step, axis=-1)


def _section_kicks(spec, realizations, bounds, dt, amplitude):
    steps = [int(round((hi - lo) / dt)) for lo, hi in zip(bounds[:-1], bounds[1:])]
    draws = np.array([noise_stream(spec, r, sum(steps)) for r in realizations])
    draws *= np.sqrt(dt) * amplitude
    out, start = [], 0
    for n, count in enumerate(steps):
        if spec.sections == "write" and n > 0:
            out.append(None)
        else:
            out.append(draws[:, start:start + count])
        start += count
    return out


def solve_noisy(context, layout, drives, noise, realization):
    """
    End-to-end solve with the noise kicks of one realization added after each
    step in every noisy section. delta_eta = 0 reproduces the deterministic
    solve exactly.
    """
    if noise.delta_eta == 0:
        return propagate_sections(context, layout, drives)
    dt = context.dt
    bounds = section_bounds(layout, dt)
    kicks = _section_kicks(noise, [realization], bounds, dt, noise.delta_eta)
    extra = [None if k is None else kick_response(context.params, k, dt)[0] for k in kicks]
    return propagate_sections(context, layout, drives, extra=extra)


def unit_noise_responses(context, layout, noise, verbose=False):
    """
    Readout-section responses to the noise alone (zero drive, delta_eta = 1),
    one row per realization. Noisy responses follow by linearity as
    deterministic + delta_eta * rows.
    """
    dt = context.dt
    bounds = section_bounds(layout, dt)
    chunks = [range(i, min(i + CHUNK_ROWS, noise.n_realizations))
              for i in range(0, noise.n_realizations, CHUNK_ROWS)]
    rows = []
    for chunk in tqdm(chunks, disable=not verbose, desc="noise realizations"):
        kicks = _section_kicks(noise, list(chunk), bounds, dt, 1.0)
        extra = [None if k is None else kick_response(context.params, k, dt) for k in kicks]
        drives = [None] * (len(bounds) - 1)
        result = propagate_sections(context, bounds, drives, extra=extra)
        rows.append(np.atleast_2d(result.sections[-1].samples))
    last = result.sections[-1]
    return Trajectory(t0=last.t0, dt=last.dt, samples=np.vstack(rows))


def noise_overlaps(unit_responses, refs, interval):
    """int N_r A_i^* over the readout window, shape (2, n_realizations)."""
    o0, o1 = overlaps(unit_responses, refs, interval)
    return np.array([o0, o1])


def _study(sup, o_det, o_noise, delta_eta, mats, keep):
    o = (o_det[0] + delta_eta * o_noise[0], o_det[1] + delta_eta * o_noise[1])
    res = retrieve(o, mats)
    alpha_r, beta_r = np.atleast_1d(res.alpha_r), np.atleast_1d(res.beta_r)
    n = len(alpha_r)
    mean_alpha, mean_beta = complex(alpha_r.mean()), complex(beta_r.mean())
    std_err = (
        float(np.std(alpha_r, ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
        float(np.std(beta_r, ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
    )
    return NoiseStudyResult(
        mean_alpha=mean_alpha,
        mean_beta=mean_beta,
        eps_alpha=abs(sup.alpha - mean_alpha),
        eps_beta=abs(sup.beta - mean_beta),
        std_err=std_err,
        per_realization=(alpha_r, beta_r) if keep else None,
    )


@dataclass(frozen=True)
class NoiseHarness:
    """Everything a Monte-Carlo retrieval needs, computed once per solution."""
    solution: object
    basis: object
    mats: object
    refs: tuple
    noise: NoiseSpec
    o_noise: np.ndarray

    @classmethod
    def build(cls, solution, basis, context, mats, noise, verbose=False):
        refs = reference_responses(solution, basis)
        unit = unit_noise_responses(context, basis.layout, noise, verbose)
        return cls(solution, basis, mats, refs, noise,
                   noise_overlaps(unit, refs, mats.interval))

    def deterministic_overlaps(self, sup):
        response = assemble_read(self.solution.zeta, encode(sup, self.solution), self.basis)
        return overlaps(response, self.refs, self.mats.interval)

    def study(self, sup, delta_eta=None, keep=False):
        delta_eta = self.noise.delta_eta if delta_eta is None else delta_eta
        return _study(sup, self.deterministic_overlaps(sup), self.o_noise,
                      delta_eta, self.mats, keep)


def monte_carlo_retrieval(sup, solution, noise, basis, context, mats, harness=None,
                          keep=False, verbose=False):
    """Mean retrieved amplitudes and their absolute errors over the realizations."""
    harness = harness or NoiseHarness.build(solution, basis, context, mats, noise, verbose)
    return harness.study(sup, noise.delta_eta, keep)


def monte_carlo_direct(sup, solution, noise, basis, context, mats):
    """Per-realization end-to-end solves; slower reference for the linear path."""
    refs = reference_responses(solution, basis)
    drives = [basis.write_pulse(encode(sup, solution)), basis.read_pulse(solution.zeta)]
    o0, o1 = [], []
    for r in range(noise.n_realizations):
        response = solve_noisy(context, basis.layout, drives, noise, r).sections[-1]
        a, b = overlaps(response, refs, mats.interval)
        o0.append(a)
        o1.append(b)
    return _study(sup, (np.array(o0), np.array(o1)), (0.0, 0.0), 0.0, mats, keep=True)


def noise_sweep(harness, points=None, delta_eta=None, verbose=False):
    """Noisy retrieval over the Bloch-sphere grid, one row per (theta, phi)."""
    points = points or bloch_grid()
    rows = []
    for theta, phi in tqdm(points, disable=not verbose, desc="sweep"):
        sup = qubit_state(theta, phi)
        res = harness.study(sup, delta_eta)
        rows.append({
            "theta": theta, "phi": phi,
            "re_alpha_in": sup.alpha.real, "im_alpha_in": sup.alpha.imag,
            "re_beta_in": sup.beta.real, "im_beta_in": sup.beta.imag,
            "re_alpha_r": res.mean_alpha.real, "im_alpha_r": res.mean_alpha.imag,
            "re_beta_r": res.mean_beta.real, "im_beta_r": res.mean_beta.imag,
            "eps_alpha": res.eps_alpha, "eps_beta": res.eps_beta,
            "se_alpha": res.std_err[0], "se_beta": res.std_err[1],
        })
    return pd.DataFrame(rows)


def error_vs_amplitude(harness, amplitudes, points=None, eta0=1.0, verbose=False):
    """
    Maximum absolute retrieval error over `points` for each relative noise
    amplitude delta_eta / eta0, plus a least-squares line through the origin
    region (slope, intercept, R^2).
    """
    points = points or bloch_grid()
    sups = [qubit_state(th, ph) for th, ph in points]
    det = [harness.deterministic_overlaps(s) for s in sups]
    rows = []
    for rel in amplitudes:
        worst = 0.0
        for sup, o_det in zip(sups, det):
            res = _study(sup, o_det, harness.o_noise, rel * eta0, harness.mats, False)
            worst = max(worst, res.eps_alpha, res.eps_beta)
        rows.append({"delta_eta_rel": rel, "max_eps": worst})
    frame = pd.DataFrame(rows)
    fit = stats.linregress(frame["delta_eta_rel"], frame["max_eps"])
    summary = {"slope": fit.slope, "intercept": fit.intercept, "r_squared": fit.rvalue**2}
    if verbose:
        table = [(f"{r['delta_eta_rel']:.3f}", f"{r['max_eps']:.4e}") for r in rows]
        print(tabulate(table, headers=["delta_eta / eta_0", "max eps"], tablefmt="fancy_grid"))
        print(f"\nLinear fit R^2: {summary['r_squared']:.4f}\n")
    return frame, summary


def bare_cavity_variance(params, delta_eta, dt, n_steps):
    """delta_eta^2 dt sum_m exp(-2 kappa (t_n - t_{m+1})) for the uncoupled cavity."""
    lags = np.arange(n_steps) * dt
    return delta_eta**2 * dt * float(np.sum(np.exp(-2 * params.kappa * lags)))


def integrated_power(samples, dt):
    return float(np.sum(trapezoid_weights(samples.shape[-1], dt) * np.abs(samples) ** 2))
