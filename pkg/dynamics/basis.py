from dataclasses import dataclass

import numpy as np
from tqdm.contrib.concurrent import thread_map

from dynamics.errors import ConfigError
from dynamics.kernel import trapezoid_weights
from dynamics.solver import Trajectory, propagate_sections


# Rows per batched solve; fixed so results do not depend on the worker count
CHUNK_ROWS = 8


@dataclass(frozen=True)
class Pulse:
    """
    eta(t) = sum_k coeffs[k-1] * sin(k * omega_f * (t - section_start)).

    Coefficients are in absolute drive units; `normalized` divides by
    `amp_scale` the way published coefficient tables are written.
    """
    coeffs: np.ndarray
    omega_f: float
    section_start: float
    amp_scale: float = 1.0
    section_end: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=complex))
        if self.amp_scale <= 0:
            raise ConfigError(f"pulse amp_scale must be > 0, got {self.amp_scale}")
        if self.section_end is None:
            object.__setattr__(
                self, "section_end", self.section_start + np.pi / self.omega_f
            )

    def __call__(self, t):
        return pulse_eval(self, t)

    @property
    def n_harmonics(self):
        return len(self.coeffs)

    @property
    def normalized(self):
        return self.coeffs / self.amp_scale

    @property
    def normalized_power(self):
        """(1/2) sum |c_k / amp_scale|^2"""
        return 0.5 * float(np.sum(np.abs(self.normalized) ** 2))

    def scaled(self, factor):
        return Pulse(self.coeffs * factor, self.omega_f, self.section_start,
                     self.amp_scale, self.section_end)


def sine_matrix(n_harmonics, omega_f, t_rel):
    k = np.arange(1, n_harmonics + 1)
    return np.sin(np.outer(k * omega_f, t_rel))


def pulse_eval(pulse, t):
    t = np.asarray(t, dtype=float)
    t_rel = np.atleast_1d(t - pulse.section_start)
    value = pulse.coeffs @ sine_matrix(pulse.n_harmonics, pulse.omega_f, t_rel)
    inside = (t_rel >= 0) & (t_rel <= pulse.section_end - pulse.section_start + 1e-12)
    value = np.where(inside, value, 0.0)
    return value if t.ndim else complex(value[0])


def pulse_power(pulse):
    """Net power per fundamental period, amp_scale^2 * (1/2) sum |c/amp_scale|^2."""
    return 0.5 * float(np.sum(np.abs(pulse.coeffs) ** 2))


def power_ratio(read, write):
    return pulse_power(read) / pulse_power(write)


def rabi_fundamentals(layout, omega_r):
    """Section lengths measured in half Rabi periods, pi / omega_r."""
    half_period = np.pi / omega_r
    return {
        "write": (layout.t2 - layout.t1) / half_period,
        "read": (layout.t3 - layout.t2) / half_period,
    }


@dataclass(frozen=True)
class BasisSet:
    write_responses: Trajectory
    read_responses: Trajectory
    memory_responses: Trajectory
    layout: object
    omega_f_write: float
    omega_f_read: float

    @property
    def n_write(self):
        return self.write_responses.samples.shape[0]

    @property
    def n_read(self):
        return self.read_responses.samples.shape[0]

    @property
    def dt(self):
        return self.write_responses.dt

    def readout_family(self):
        """Rows [a^R_1..a^R_N2, psi_1..psi_N1] on the readout section."""
        return np.vstack([self.read_responses.samples, self.memory_responses.samples])

    def write_pulse(self, xi, amp_scale=1.0):
        return Pulse(xi, self.omega_f_write, self.layout.t1, amp_scale, self.layout.t2)

    def read_pulse(self, zeta, amp_scale=1.0):
        return Pulse(zeta, self.omega_f_read, self.layout.t2, amp_scale, self.layout.t3)


def _solve_rows(context, bounds, section_drives, n_workers, verbose, desc):
    n_rows = next(d.shape[0] for d in section_drives if d is not None)
    chunks = [np.arange(i, min(i + CHUNK_ROWS, n_rows))
              for i in range(0, n_rows, CHUNK_ROWS)]

    def run(rows):
        drives = [None if d is None else d[rows] for d in section_drives]
        return propagate_sections(context, bounds, drives)

    results = thread_map(
        run, chunks, max_workers=max(1, n_workers), disable=not verbose, desc=desc
    )
    merged = []
    for n in range(len(bounds) - 1):
        first = results[0][n]
        samples = np.concatenate([r[n].samples for r in results], axis=0)
        merged.append(Trajectory(t0=first.t0, dt=first.dt, samples=samples))
    return merged


def build_basis(context, layout, n1, n2, omega_f_write=None, omega_f_read=None,
                n_workers=1, verbose=False):
    """
    Unit-coefficient responses: a_k^(W) on [T1, T2], a_l^(R) on [T2, T3] from
    an empty cavity, and psi_k^(R) on [T2, T3] carrying the memory of a_k^(W).
    """
    if n1 < 1 or n2 < 1:
        raise ConfigError(f"basis sizes must be >= 1, got n1={n1}, n2={n2}")
    dt = context.dt
    layout = layout.on_grid(dt)
    t1, t2, t3 = layout.boundaries
    if omega_f_write is None:
        omega_f_write = layout.write_fundamental
    if omega_f_read is None:
        omega_f_read = layout.read_fundamental
    if not (omega_f_write > 0 and omega_f_read > 0):
        raise ConfigError(
            f"basis fundamentals must be > 0, got write={omega_f_write}, read={omega_f_read}"
        )

    write_times = np.arange(int(round((t2 - t1) / dt)) + 1) * dt
    read_times = np.arange(int(round((t3 - t2) / dt)) + 1) * dt
    write_drive = sine_matrix(n1, omega_f_write, write_times).astype(complex)
    read_drive = sine_matrix(n2, omega_f_read, read_times).astype(complex)

    write_resp, memory_resp = _solve_rows(
        context, (t1, t2, t3), [write_drive, None], n_workers, verbose,
        "write responses",
    )
    (read_resp,) = _solve_rows(
        context, (t2, t3), [read_drive], n_workers, verbose, "read responses"
    )
    if verbose:
        print(f"Built basis with {n1} write and {n2} read harmonics "
              f"({len(write_times)} + {len(read_times)} samples)")
    return BasisSet(
        write_responses=write_resp,
        read_responses=read_resp,
        memory_responses=memory_resp,
        layout=layout,
        omega_f_write=omega_f_write,
        omega_f_read=omega_f_read,
    )


def _check_length(name, coeffs, expected):
    coeffs = np.asarray(coeffs, dtype=complex)
    if coeffs.shape[-1] != expected:
        raise ConfigError(
            f"{name} has {coeffs.shape[-1]} coefficients, basis expects {expected}"
        )
    return coeffs


def assemble_write(xi, basis):
    xi = _check_length("xi", xi, basis.n_write)
    resp = basis.write_responses
    return Trajectory(t0=resp.t0, dt=resp.dt, samples=xi @ resp.samples)


def assemble_read(zeta, xi, basis):
    zeta = _check_length("zeta", zeta, basis.n_read)
    xi = _check_length("xi", xi, basis.n_write)
    resp = basis.read_responses
    samples = zeta @ resp.samples + xi @ basis.memory_responses.samples
    return Trajectory(t0=resp.t0, dt=resp.dt, samples=samples)


@dataclass(frozen=True)
class GramMatrices:
    """
    blocks[name][p, q] = int_S X_p(t) X_q(t)^* dt over the readout family X,
    for S in delay [T2, tau_a], bin0 [tau_a, tau_b], bin1 [tau_b, tau_c] and
    readout [tau_a, tau_c].
    """
    blocks: dict
    intervals: dict
    at_tau_a: np.ndarray
    n_read: int
    n_write: int

    @property
    def size(self):
        return self.n_read + self.n_write

    def energy_matrix(self, name):
        """M with int_S |c . X|^2 = c^H M c."""
        return self.blocks[name].T


def _overlap(family, start, stop, dt):
    window = family[:, start:stop + 1]
    c = trapezoid_weights(window.shape[-1], dt)
    g = (window * c) @ window.conj().T
    return 0.5 * (g + g.conj().T)


def gram(basis, layout=None):
    layout = basis.layout if layout is None else layout.on_grid(basis.dt)
    resp = basis.read_responses
    family = basis.readout_family()

    intervals = {
        "delay": (layout.t2, layout.tau_a),
        "bin0": (layout.tau_a, layout.tau_b),
        "bin1": (layout.tau_b, layout.tau_c),
        "readout": (layout.tau_a, layout.tau_c),
    }
    blocks = {
        name: _overlap(family, resp.index_of(lo), resp.index_of(hi), resp.dt)
        for name, (lo, hi) in intervals.items()
    }
    return GramMatrices(
        blocks=blocks,
        intervals=intervals,
        at_tau_a=np.array(family[:, resp.index_of(layout.tau_a)]),
        n_read=basis.n_read,
        n_write=basis.n_write,
    )
