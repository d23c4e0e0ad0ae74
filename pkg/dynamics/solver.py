from dataclasses import dataclass

import numpy as np

from dynamics.errors import ConfigError, NumericalInstabilityError, StepSizeError
from dynamics.kernel import (
    MemoryState,
    cached_kernel_table,
    driving_term,
    memory_handoff,
    memory_term,
)
from dynamics.model import SectionLayout


DEFAULT_DT = 0.05
# |lambda| * dt bound inside the classic RK4 stability region on the imaginary axis
RK4_STABILITY = 2.5


@dataclass(frozen=True)
class Trajectory:
    """
    Cavity amplitude A(t0 + m*dt). `samples` is (M+1,) or, for several
    independent solves on the same grid, (R, M+1).
    """
    t0: float
    dt: float
    samples: np.ndarray

    def __post_init__(self):
        finite = np.isfinite(self.samples)
        if not finite.all():
            bad = int(np.argwhere(~finite.reshape(-1, finite.shape[-1]))[:, 1].min())
            raise NumericalInstabilityError(
                f"trajectory has a non-finite sample at step {bad}"
            )
        self.samples.setflags(write=False)

    def __len__(self):
        return self.samples.shape[-1]

    @property
    def n_steps(self):
        return len(self) - 1

    @property
    def t_end(self):
        return self.t0 + self.n_steps * self.dt

    @property
    def times(self):
        return self.t0 + np.arange(len(self)) * self.dt

    @property
    def batched(self):
        return self.samples.ndim == 2

    def index_of(self, t):
        m = int(round((t - self.t0) / self.dt))
        if m < 0 or m > self.n_steps:
            raise ConfigError(
                f"time {t} ns lies outside the trajectory [{self.t0}, {self.t_end}]"
            )
        return m

    def window(self, start, stop):
        i, j = self.index_of(start), self.index_of(stop)
        return Trajectory(
            t0=self.t0 + i * self.dt, dt=self.dt,
            samples=np.array(self.samples[..., i:j + 1]),
        )

    def row(self, i):
        return Trajectory(t0=self.t0, dt=self.dt, samples=np.array(self.samples[i]))


@dataclass(frozen=True)
class SpinStateVector:
    """Discretized ensemble: B_k amplitudes, couplings g_k and frequencies."""
    amplitudes: np.ndarray
    couplings: np.ndarray
    frequencies: np.ndarray

    @classmethod
    def from_grid(cls, grid, params, amplitudes=None):
        couplings = np.sqrt(params.Omega**2 * grid.mass)
        if amplitudes is None:
            amplitudes = np.zeros(len(grid), dtype=complex)
        return cls(
            amplitudes=np.asarray(amplitudes, dtype=complex),
            couplings=couplings,
            frequencies=np.asarray(grid.points),
        )

    @property
    def collective_coupling(self):
        return float(np.sqrt(np.sum(self.couplings**2)))


@dataclass(frozen=True)
class SolverContext:
    params: object
    grid: object
    kernel: object

    @property
    def dt(self):
        return self.kernel.dt


def build_context(params, grid, dt=DEFAULT_DT, horizon=None, layout=None,
                  cache_dir=None, verbose=False):
    """Kernel table long enough for the longest section of `layout`."""
    if horizon is None:
        if layout is None:
            raise ConfigError("either a horizon or a section layout is required")
        bounds = section_bounds(layout, dt)
        horizon = max(b - a for a, b in zip(bounds[:-1], bounds[1:]))
    kernel = cached_kernel_table(params, grid, dt, horizon, cache_dir, verbose)
    return SolverContext(params=params, grid=grid, kernel=kernel)


def solve_volterra(kernel, drive, memory=None, t0=0.0):
    """
    A_m = dt * sum_j c_j K((m - j) dt) A_j + D_m + F_m (product trapezoid).

    K(0) = 0 removes A_m from the right-hand side, so the solve is explicit
    forward substitution. Leading axis of `drive`/`memory` batches solves.
    """
    g = np.array(drive, dtype=complex)
    if memory is not None:
        g = g + memory
    batched = g.ndim == 2
    g = np.atleast_2d(g)
    n_steps = g.shape[-1] - 1
    if n_steps > kernel.n_steps:
        raise ConfigError(
            f"section of {n_steps} steps exceeds the kernel table "
            f"({kernel.n_steps} steps)"
        )

    kw = kernel.dt * kernel.values[: n_steps + 1]
    krev = np.ascontiguousarray(kw[::-1])
    amp = np.empty_like(g)
    amp[:, 0] = g[:, 0]
    for m in range(1, n_steps + 1):
        amp[:, m] = (
            g[:, m]
            + amp[:, :m] @ krev[n_steps - m:n_steps]
            - 0.5 * kw[m] * amp[:, 0]
        )
        if not np.isfinite(amp[:, m]).all():
            raise NumericalInstabilityError(
                f"Volterra solve produced a non-finite amplitude at step {m}"
            )
    return Trajectory(t0=t0, dt=kernel.dt, samples=amp if batched else amp[0])


def _check_stability(params, spins, dt):
    bound = (
        abs(params.cavity_rate)
        + np.max(np.abs(params.spin_rates(spins.frequencies)), initial=0.0)
        + 2 * spins.collective_coupling
    )
    if bound * dt > RK4_STABILITY:
        raise StepSizeError(
            f"dt={dt} ns is outside the RK4 stability region "
            f"(|lambda| dt ~ {bound * dt:.2f}); try dt={dt / 2}"
        )


def _rk4(params, spins, eta, dt, amp0, spins0, keep_spins):
    b = params.cavity_rate
    a = params.spin_rates(spins.frequencies)
    g = spins.couplings

    def rhs(amp, spin, drive):
        return -b * amp + g @ spin - drive, -a * spin - g * amp

    n_steps = len(eta) - 1
    eta_mid = 0.5 * (eta[:-1] + eta[1:])
    out = np.empty(n_steps + 1, dtype=complex)
    history = np.empty((n_steps + 1, len(g)), dtype=complex) if keep_spins else None
    amp, spin = complex(amp0), np.array(spins0, dtype=complex)
    out[0] = amp
    if keep_spins:
        history[0] = spin
    h = dt
    for m in range(n_steps):
        k1a, k1b = rhs(amp, spin, eta[m])
        k2a, k2b = rhs(amp + 0.5 * h * k1a, spin + 0.5 * h * k1b, eta_mid[m])
        k3a, k3b = rhs(amp + 0.5 * h * k2a, spin + 0.5 * h * k2b, eta_mid[m])
        k4a, k4b = rhs(amp + h * k3a, spin + h * k3b, eta[m + 1])
        amp = amp + h / 6 * (k1a + 2 * k2a + 2 * k3a + k4a)
        spin = spin + h / 6 * (k1b + 2 * k2b + 2 * k3b + k4b)
        if not np.isfinite(amp):
            raise NumericalInstabilityError(
                f"ODE reference produced a non-finite amplitude at step {m + 1}"
            )
        out[m + 1] = amp
        if keep_spins:
            history[m + 1] = spin
    return out, history


def solve_ode_reference(params, spins, eta, dt, initial=None, t0=0.0,
                        check_step=False, step_tol=1e-6, return_spins=False):
    """
    Classic RK4 for dA/dt = -(kappa + i Delta_c) A + sum_k g_k B_k - eta,
    dB_k/dt = -(gamma + i Delta_k) B_k - g_k A.

    The drive is interpolated linearly between samples. With `check_step`
    the solve is repeated at dt/2 and a StepSizeError is raised if the two
    disagree by more than `step_tol` relative.
    """
    eta = np.asarray(eta, dtype=complex)
    amp0, spins0 = (0.0, spins.amplitudes) if initial is None else initial
    _check_stability(params, spins, dt)

    out, history = _rk4(params, spins, eta, dt, amp0, spins0, return_spins)

    if check_step:
        fine_eta = np.empty(2 * len(eta) - 1, dtype=complex)
        fine_eta[::2] = eta
        fine_eta[1::2] = 0.5 * (eta[:-1] + eta[1:])
        fine, _ = _rk4(params, spins, fine_eta, dt / 2, amp0, spins0, False)
        scale = max(np.max(np.abs(fine)), np.finfo(float).tiny)
        discrepancy = np.max(np.abs(out - fine[::2])) / scale
        if discrepancy > step_tol:
            raise StepSizeError(
                f"RK4 step-doubling discrepancy {discrepancy:.2e} exceeds "
                f"{step_tol:.0e}; try dt={dt / 2}"
            )

    trajectory = Trajectory(t0=t0, dt=dt, samples=out)
    return (trajectory, history) if return_spins else trajectory


@dataclass(frozen=True)
class SectionedTrajectory:
    sections: tuple
    final_state: MemoryState

    def __getitem__(self, i):
        return self.sections[i]

    def __len__(self):
        return len(self.sections)

    def concatenate(self):
        """One trajectory, boundary samples taken once."""
        first = self.sections[0]
        parts = [first.samples] + [s.samples[..., 1:] for s in self.sections[1:]]
        return Trajectory(
            t0=first.t0, dt=first.dt, samples=np.concatenate(parts, axis=-1)
        )


def section_bounds(boundaries, dt):
    if isinstance(boundaries, SectionLayout):
        return boundaries.on_grid(dt).boundaries
    bounds = tuple(float(b) for b in boundaries)
    for b in bounds[1:]:
        steps = (b - bounds[0]) / dt
        if abs(steps - round(steps)) > 1e-6:
            raise ConfigError(f"section boundary {b} ns is not on the dt={dt} ns grid")
    if any(hi <= lo for lo, hi in zip(bounds[:-1], bounds[1:])):
        raise ConfigError(f"section boundaries must increase, got {bounds}")
    return bounds


def _sample_drive(drive, times):
    if drive is None:
        return np.zeros(len(times), dtype=complex)
    if callable(drive):
        return np.asarray(drive(times), dtype=complex)
    samples = np.asarray(drive, dtype=complex)
    if samples.shape[-1] != len(times):
        raise ConfigError(
            f"drive has {samples.shape[-1]} samples, section needs {len(times)}"
        )
    return samples


def propagate_sections(context, boundaries, drives, extra=None, initial=None):
    """
    Solve consecutive sections, handing the cavity boundary value and spin
    memory integral from each section to the next.

    `drives` holds one entry per section: None, a callable eta(t) such as a
    Pulse, or samples on the section grid ((L+1,) or (R, L+1)). `extra`
    optionally adds per-section inhomogeneities to the driving term.
    """
    params, grid, dt = context.params, context.grid, context.dt
    bounds = section_bounds(boundaries, dt)
    n_sections = len(bounds) - 1
    if len(drives) != n_sections:
        raise ConfigError(
            f"{n_sections} sections but {len(drives)} drives were supplied"
        )
    if extra is not None and len(extra) != n_sections:
        raise ConfigError(
            f"{n_sections} sections but {len(extra)} extra terms were supplied"
        )

    state = initial if initial is not None else MemoryState.empty(len(grid))
    sections = []
    for n in range(n_sections):
        n_steps = int(round((bounds[n + 1] - bounds[n]) / dt))
        times = bounds[n] + np.arange(n_steps + 1) * dt
        g = driving_term(params, _sample_drive(drives[n], times), dt)
        if extra is not None and extra[n] is not None:
            g = g + extra[n]
        if not state.is_zero:
            g = g + memory_term(state, params, grid, n_steps + 1, dt)
        traj = solve_volterra(context.kernel, g, t0=bounds[n])
        sections.append(traj)
        state = memory_handoff(state, traj, dt, grid, params)
    return SectionedTrajectory(sections=tuple(sections), final_state=state)
