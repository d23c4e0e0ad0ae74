import hashlib
import os
from dataclasses import dataclass
from math import factorial

import numpy as np
from scipy import signal

from dynamics.errors import ConfigError


KERNEL_CACHE_VERSION = 1

# Below this |a - b| (rad/ns) the ratio is evaluated term by term with expm1
NEAR_POLE = 1e-4
TIME_BLOCK = 128


@dataclass(frozen=True)
class KernelTable:
    dt: float
    values: np.ndarray

    def __post_init__(self):
        self.values.setflags(write=False)

    @property
    def n_steps(self):
        return len(self.values) - 1

    @property
    def horizon(self):
        return self.n_steps * self.dt


@dataclass(frozen=True)
class MemoryState:
    """
    History carried into a section: the cavity amplitude at the boundary and
    the spin memory integral I(omega_k). A leading axis, when present, indexes
    independent right-hand sides.
    """
    boundary_amp: np.ndarray
    memory_integral: np.ndarray

    @classmethod
    def empty(cls, n_points, batch=None):
        shape = () if batch is None else (batch,)
        return cls(
            boundary_amp=np.zeros(shape, dtype=complex),
            memory_integral=np.zeros(shape + (n_points,), dtype=complex),
        )

    @property
    def is_zero(self):
        return not (np.any(self.boundary_amp) or np.any(self.memory_integral))


def relaxation_factor(d, t):
    """(exp(-d t) - 1) / d, continuous through d = 0 where it equals -t."""
    d = np.asarray(d, dtype=complex)
    t = np.asarray(t, dtype=float)
    safe = np.where(d == 0, 1.0, d)
    with np.errstate(invalid="ignore"):
        value = np.expm1(-d * t) / safe
    return np.where(d == 0, -t + 0j, value)


def relaxation_sum(d, weights, n_samples, dt, block=TIME_BLOCK):
    """
    sum_k weights[k] * (exp(-d_k t_m) - 1) / d_k on t_m = m*dt, m < n_samples.

    `weights` is (N,) or (N, R); the result is (n_samples,) or (n_samples, R).
    Far from the pole the exponentials are generated blockwise from one phase
    table so the inner work is a matrix product.
    """
    d = np.asarray(d, dtype=complex)
    weights = np.asarray(weights, dtype=complex)
    squeeze = weights.ndim == 1
    if squeeze:
        weights = weights[:, None]
    out = np.zeros((n_samples, weights.shape[1]), dtype=complex)
    if n_samples == 0:
        return out[:, 0] if squeeze else out

    near = np.abs(d) < NEAR_POLE
    far = ~near

    if far.any():
        d_far = d[far]
        w_far = weights[far] / d_far[:, None]
        offset = w_far.sum(axis=0)
        phase = np.exp(-np.outer(np.arange(min(block, n_samples)) * dt, d_far))
        for start in range(0, n_samples, block):
            stop = min(start + block, n_samples)
            shift = np.exp(-d_far * (start * dt))
            out[start:stop] = (phase[: stop - start] * shift) @ w_far - offset

    if near.any():
        t = np.arange(n_samples) * dt
        out += relaxation_factor(d[near][None, :], t[:, None]) @ weights[near]

    out[0] = 0
    return out[:, 0] if squeeze else out


def decay_sum(rates, samples, dt, block=TIME_BLOCK):
    """
    sum_m samples[..., m] * exp(-rates * m*dt)  ->  shape (..., N).
    """
    rates = np.asarray(rates, dtype=complex)
    samples = np.atleast_2d(np.asarray(samples, dtype=complex))
    n_samples = samples.shape[-1]
    out = np.zeros((samples.shape[0], len(rates)), dtype=complex)
    phase = np.exp(-np.outer(np.arange(min(block, n_samples)) * dt, rates))
    for start in range(0, n_samples, block):
        stop = min(start + block, n_samples)
        shift = np.exp(-rates * (start * dt))
        out += samples[:, start:stop] @ (phase[: stop - start] * shift)
    return out


def kernel_table(params, grid, dt, horizon):
    if not dt > 0:
        raise ConfigError(f"time step must be > 0, got dt={dt}")
    n_steps = int(np.ceil(horizon / dt - 1e-9))
    if n_steps < 1:
        raise ConfigError(f"kernel horizon {horizon} ns is shorter than dt={dt}")

    b = params.cavity_rate
    a = params.spin_rates(grid.points)
    t = np.arange(n_steps + 1) * dt
    values = params.Omega**2 * np.exp(-b * t) * relaxation_sum(
        a - b, grid.mass, n_steps + 1, dt
    )
    values[0] = 0
    return KernelTable(dt=dt, values=values)


def _series(z, coeffs):
    out = np.zeros_like(z, dtype=complex)
    for c in coeffs[::-1]:
        out = out * z + c
    return out


def _linear_weights(b, dt, n_terms=20):
    """
    Exact weights of a linear-in-time drive against exp(-b (t_{m+1} - tau)):
    returns (w0, w1) for eta_m and eta_{m+1}.
    """
    z = b * dt
    if abs(z) < 0.5:
        e1 = dt * _series(z, [(-1) ** (n + 1) / factorial(n) for n in range(1, n_terms)])
        w0 = dt * _series(
            z, [(-1) ** n * (n - 1) / factorial(n) for n in range(2, n_terms + 1)]
        )
    else:
        e1 = -np.expm1(-z) / b
        w0 = (1 - np.exp(-z) * (1 + z)) / (b**2 * dt)
    return complex(w0), complex(e1 - w0)


def driving_term(params, eta, dt):
    """
    D(t_m) = -int_{T_n}^{t_m} eta(tau) exp(-b (t_m - tau)) dtau, b = kappa + i*Delta_c.

    `eta` holds drive samples on the section grid (last axis = time). The
    integral is exact for a drive that is linear between samples.
    """
    eta = np.asarray(eta, dtype=complex)
    if eta.shape[-1] < 2:
        return np.zeros_like(eta)
    b = params.cavity_rate
    w0, w1 = _linear_weights(b, dt)
    step = np.zeros_like(eta)
    step[..., 1:] = -(w0 * eta[..., :-1] + w1 * eta[..., 1:])
    return signal.lfilter([1.0], [1.0, -np.exp(-b * dt)], step, axis=-1)


def trapezoid_weights(n_samples, dt):
    if n_samples < 2:
        return np.zeros(n_samples)
    c = np.full(n_samples, dt)
    c[0] = c[-1] = 0.5 * dt
    return c


def memory_handoff(prev_state, prev_traj, dt, grid, params):
    """
    I_new(omega) = I_prev(omega) exp(-a L) + int A(tau) exp(-a (T_n - tau)) dtau
    over the section just solved (length L), a = gamma + i*Delta_omega.
    """
    samples = np.asarray(getattr(prev_traj, "samples", prev_traj), dtype=complex)
    batched = samples.ndim == 2
    samples = np.atleast_2d(samples)
    n_samples = samples.shape[-1]
    a = params.spin_rates(grid.points)
    length = (n_samples - 1) * dt

    weighted = samples[:, ::-1] * trapezoid_weights(n_samples, dt)
    integral = decay_sum(a, weighted, dt)
    integral += np.atleast_2d(prev_state.memory_integral) * np.exp(-a * length)
    boundary = samples[:, -1]
    if not batched:
        integral, boundary = integral[0], boundary[0]
    return MemoryState(boundary_amp=boundary, memory_integral=integral)


def memory_term(state, params, grid, n_samples, dt):
    """
    F(t) = A(T_n) exp(-b t) + Omega^2 sum_k w_k rho_k I_k
           * (exp(-a_k t) - exp(-b t)) / (a_k - b),  t = m*dt since T_n.
    """
    b = params.cavity_rate
    a = params.spin_rates(grid.points)
    t = np.arange(n_samples) * dt
    envelope = np.exp(-b * t)

    integral = np.atleast_2d(state.memory_integral)
    boundary = np.atleast_1d(state.boundary_amp)
    out = boundary[:, None] * envelope[None, :]
    if np.any(integral) and params.Omega > 0:
        weights = (grid.mass[None, :] * integral).T
        spin_part = relaxation_sum(a - b, weights, n_samples, dt)
        out = out + params.Omega**2 * envelope[None, :] * spin_part.T
    return out if np.ndim(state.boundary_amp) else out[0]


def kernel_cache_key(params, grid, dt, horizon):
    digest = hashlib.sha256()
    digest.update(params.model_dump_json().encode())
    digest.update(np.ascontiguousarray(grid.points).tobytes())
    digest.update(np.ascontiguousarray(grid.mass).tobytes())
    digest.update(repr((float(dt), float(horizon), KERNEL_CACHE_VERSION)).encode())
    return digest.hexdigest()


def cached_kernel_table(params, grid, dt, horizon, cache_dir=None, verbose=False):
    """kernel_table with an optional on-disk cache keyed by content hash."""
    if cache_dir is None:
        return kernel_table(params, grid, dt, horizon)

    key = kernel_cache_key(params, grid, dt, horizon)
    path = os.path.join(cache_dir, f"kernel_{key[:16]}.npz")
    if os.path.exists(path):
        with np.load(path) as cached:
            if int(cached["version"]) == KERNEL_CACHE_VERSION and str(cached["key"]) == key:
                if verbose:
                    print(f"Loaded kernel table from {path}")
                return KernelTable(dt=float(cached["dt"]), values=cached["values"].copy())

    table = kernel_table(params, grid, dt, horizon)
    os.makedirs(cache_dir, exist_ok=True)
    np.savez(path, version=KERNEL_CACHE_VERSION, key=key, dt=dt, values=table.values)
    if verbose:
        print(f"Saved kernel table to {path}")
    return table
