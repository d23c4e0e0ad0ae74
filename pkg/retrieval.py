import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from dynamics.basis import assemble_read
from dynamics.errors import ConfigError, RetrievalDegeneracyError
from dynamics.kernel import trapezoid_weights


COND_WARNING = 1e8
COND_SINGULAR = 1e14


@dataclass(frozen=True)
class Superposition:
    alpha: complex
    beta: complex
    normalized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "alpha", complex(self.alpha))
        object.__setattr__(self, "beta", complex(self.beta))
        if self.normalized:
            norm = abs(self.alpha) ** 2 + abs(self.beta) ** 2
            if abs(norm - 1) > 1e-12:
                raise ConfigError(f"|alpha|^2 + |beta|^2 = {norm}, expected 1")

    def scaled(self, c):
        return Superposition(c * self.alpha, c * self.beta)


def rebit_params(x, branch=1):
    """alpha_x = 1 - x +/- i sqrt(x(1-x)), beta_x = x -/+ i sqrt(x(1-x))."""
    if not 0 <= x <= 1:
        raise ConfigError(f"rebit parameter must lie in [0, 1], got x={x}")
    if branch not in (1, -1):
        raise ConfigError(f"rebit branch must be +1 or -1, got {branch}")
    root = np.sqrt(x * (1 - x))
    return Superposition(1 - x + 1j * branch * root, x - 1j * branch * root)


def qubit_state(theta, phi):
    return Superposition(np.cos(theta / 2), np.sin(theta / 2) * np.exp(1j * phi))


def bloch_grid(n_theta=21, n_phi=41):
    """(theta, phi) pairs covering the Bloch sphere, theta in [0, pi], phi in [0, 2 pi]."""
    thetas = np.linspace(0, np.pi, n_theta)
    phis = np.linspace(0, 2 * np.pi, n_phi)
    return [(th, ph) for th in thetas for ph in phis]


def encode(sup, solution):
    """Write coefficients alpha * xi0 + beta * xi1."""
    return sup.alpha * np.asarray(solution.xi0) + sup.beta * np.asarray(solution.xi1)


def encode_pulse(sup, solution, basis, amp_scale=1.0):
    return basis.write_pulse(encode(sup, solution), amp_scale)


def _same_grid(a, b):
    return (
        a.samples.shape[-1] == b.samples.shape[-1]
        and abs(a.t0 - b.t0) < 1e-9
        and abs(a.dt - b.dt) < 1e-12
    )


def overlaps(response, refs, interval):
    """O_i = int_interval A(t) A_i(t)^* dt for both reference responses."""
    if not all(_same_grid(response, r) for r in refs):
        raise ConfigError("response and reference trajectories are on different grids")
    window = response.window(*interval)
    c = trapezoid_weights(len(window), window.dt)
    out = []
    for ref in refs:
        ref_window = ref.window(*interval)
        out.append(np.sum(window.samples * np.conj(ref_window.samples) * c, axis=-1))
    return tuple(out)


@dataclass(frozen=True)
class RetrievalMatrices:
    """
    f[i, q] = int A~_q A_i^* (state-dependent part of state q against full
    state i); f_r[i] = int A~_R A_i^* (readout-induced part).
    """
    f: np.ndarray
    f_r: np.ndarray
    interval: tuple

    @property
    def cond(self):
        return float(np.linalg.cond(self.f))


@dataclass(frozen=True)
class RetrievalResult:
    alpha_r: complex
    beta_r: complex
    o0: complex
    o1: complex
    cond: float
    eps_alpha: float | None = None
    eps_beta: float | None = None


def _family_vectors(solution, n_read):
    zeta = np.asarray(solution.zeta, dtype=complex)
    zeros_read = np.zeros(n_read, dtype=complex)
    zeros_write = np.zeros(len(solution.xi0), dtype=complex)
    full = [np.concatenate([zeta, solution.xi0]), np.concatenate([zeta, solution.xi1])]
    memory = [np.concatenate([zeros_read, solution.xi0]),
              np.concatenate([zeros_read, solution.xi1])]
    readout = np.concatenate([zeta, zeros_write])
    return full, memory, readout


def retrieval_matrices(solution, gram):
    """Overlap integrals from the readout-window Gram matrix."""
    g = gram.blocks["readout"]
    full, memory, readout = _family_vectors(solution, gram.n_read)

    def integral(u, v):
        return u @ g @ np.conj(v)

    f = np.array([[integral(memory[q], full[i]) for q in (0, 1)] for i in (0, 1)])
    f_r = np.array([integral(readout, full[i]) for i in (0, 1)])
    return RetrievalMatrices(f=f, f_r=f_r, interval=gram.intervals["readout"])


def reference_responses(solution, basis):
    return (
        assemble_read(solution.zeta, solution.xi0, basis),
        assemble_read(solution.zeta, solution.xi1, basis),
    )


def retrieval_matrices_direct(solution, basis, layout=None):
    """The same integrals by quadrature of assembled trajectories."""
    layout = layout or basis.layout
    interval = (layout.tau_a, layout.tau_c)
    refs = reference_responses(solution, basis)
    zeros_write = np.zeros(basis.n_write, dtype=complex)
    zeros_read = np.zeros(basis.n_read, dtype=complex)
    memory = [assemble_read(zeros_read, xi, basis) for xi in (solution.xi0, solution.xi1)]
    readout = assemble_read(solution.zeta, zeros_write, basis)

    f = np.empty((2, 2), dtype=complex)
    for q in (0, 1):
        f[:, q] = overlaps(memory[q], refs, interval)
    f_r = np.array(overlaps(readout, refs, interval))
    return RetrievalMatrices(f=f, f_r=f_r, interval=interval)


def retrieve(o, mats, sup=None):
    """
    Solve O_i = alpha F_i0 + beta F_i1 + F_iR for (alpha, beta). `o` is a pair
    of scalars or a pair of arrays (one entry per realization).
    """
    cond = mats.cond
    if not np.isfinite(cond) or cond > COND_SINGULAR:
        raise RetrievalDegeneracyError(
            f"retrieval matrix is singular (cond = {cond:.3e}); the two stored "
            "states cannot be told apart through this readout"
        )
    if cond > COND_WARNING:
        warnings.warn(f"retrieval matrix is ill-conditioned (cond = {cond:.3e})")

    rhs = np.array([np.asarray(o[0]) - mats.f_r[0], np.asarray(o[1]) - mats.f_r[1]])
    alpha_r, beta_r = np.linalg.solve(mats.f, rhs.reshape(2, -1)).reshape(rhs.shape)

    eps_alpha = eps_beta = None
    if sup is not None:
        eps_alpha = np.abs(sup.alpha - alpha_r)
        eps_beta = np.abs(sup.beta - beta_r)
    if np.ndim(alpha_r) == 0:
        alpha_r, beta_r = complex(alpha_r), complex(beta_r)
        if sup is not None:
            eps_alpha, eps_beta = float(eps_alpha), float(eps_beta)
    return RetrievalResult(
        alpha_r=alpha_r, beta_r=beta_r, o0=o[0], o1=o[1], cond=cond,
        eps_alpha=eps_alpha, eps_beta=eps_beta,
    )


def bloch_vector(sup):
    a, b = complex(sup.alpha), complex(sup.beta)
    cross = 2 * np.conj(a) * b
    return float(cross.real), float(cross.imag), abs(a) ** 2 - abs(b) ** 2


def noiseless_round_trip(sup, solution, basis, mats, refs=None):
    """Encode, assemble the readout response, project and retrieve."""
    refs = refs or reference_responses(solution, basis)
    response = assemble_read(solution.zeta, encode(sup, solution), basis)
    return retrieve(overlaps(response, refs, mats.interval), mats, sup)


def sweep_frame(points, inputs, results):
    """Rows of the Bloch-sphere sweep CSV."""
    rows = []
    for (theta, phi), sup, res in zip(points, inputs, results):
        r = bloch_vector(Superposition(res.alpha_r, res.beta_r))
        rows.append({
            "theta": theta, "phi": phi,
            "re_alpha_in": sup.alpha.real, "im_alpha_in": sup.alpha.imag,
            "re_beta_in": sup.beta.real, "im_beta_in": sup.beta.imag,
            "re_alpha_r": np.real(res.alpha_r), "im_alpha_r": np.imag(res.alpha_r),
            "re_beta_r": np.real(res.beta_r), "im_beta_r": np.imag(res.beta_r),
            "eps_alpha": res.eps_alpha, "eps_beta": res.eps_beta,
            "r_x": r[0], "r_y": r[1], "r_z": r[2],
        })
    return pd.DataFrame(rows)


def retrieval_sweep(solution, basis, mats, points=None, verbose=False):
    """Noiseless retrieval over the Bloch-sphere grid."""
    points = points or bloch_grid()
    refs = reference_responses(solution, basis)
    inputs = [qubit_state(th, ph) for th, ph in points]
    results = [noiseless_round_trip(s, solution, basis, mats, refs) for s in inputs]
    frame = sweep_frame(points, inputs, results)
    if verbose:
        worst = frame[["eps_alpha", "eps_beta"]].to_numpy().max()
        print(f"Noiseless sweep over {len(points)} states: max error {worst:.3e}")
    return frame


def rebit_readout_sweep(solution, basis, xs=(0.0, 0.25, 0.5, 0.75, 1.0), branch=1):
    """|A^(R)| over the readout section for rebit inputs, each scaled to unit maximum."""
    columns = {}
    times = None
    for x in xs:
        response = assemble_read(solution.zeta, encode(rebit_params(x, branch), solution), basis)
        magnitude = np.abs(response.samples)
        peak = magnitude.max()
        columns[f"x_{x:.2f}"] = magnitude / peak if peak > 0 else magnitude
        times = response.times
    return pd.DataFrame({"t_ns": times, **columns})
