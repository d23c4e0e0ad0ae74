import warnings
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import integrate, special

from dynamics.errors import ConfigError, EmptyGridError


TWO_PI = 2 * np.pi

DEFAULT_SPECTRAL_POINTS = 20_000
DEFAULT_PANEL_ORDER = 20
DEFAULT_ORACLE_BINS = 4_000


def mhz(value):
    """Linear frequency in MHz -> angular frequency in rad/ns."""
    if np.ndim(value):
        return TWO_PI * np.asarray(value, dtype=float) * 1e-3
    return TWO_PI * float(value) * 1e-3


def to_mhz(value):
    return np.asarray(value) / (TWO_PI * 1e-3)


class SystemParams(BaseModel):
    """Cavity and ensemble constants. Angular frequencies and rates in rad/ns."""
    model_config = ConfigDict(frozen=True)

    omega_c: float = mhz(2691.5)
    omega_p: float = mhz(2691.5)
    omega_s: float = mhz(2691.5)
    kappa: float = mhz(0.4)
    gamma: float = 0.0
    Omega: float = mhz(12.5)
    # Polariton (Rabi) frequency, only used for reporting and fundamentals
    omega_r: float = mhz(13.62)

    @model_validator(mode="after")
    def _check_rates(self):
        if not self.kappa > 0:
            raise ConfigError(f"system.kappa must be > 0, got {self.kappa}")
        if self.gamma < 0:
            raise ConfigError(f"system.gamma must be >= 0, got {self.gamma}")
        if self.Omega < 0:
            raise ConfigError(f"system.Omega must be >= 0, got {self.Omega}")
        return self

    @property
    def delta_c(self):
        return self.omega_c - self.omega_p

    @property
    def cavity_rate(self):
        """kappa + i*Delta_c"""
        return self.kappa + 1j * self.delta_c

    def spin_rates(self, omega):
        """gamma + i*Delta_omega for each spin frequency."""
        return self.gamma + 1j * (np.asarray(omega) - self.omega_p)


def _fwhm_factor(q):
    return np.sqrt((2**q - 2) / (2 * q - 2))


def _check_q(q):
    if not 1 < q < 3:
        raise ConfigError(
            f"q-Gaussian shape parameter must satisfy 1 < q < 3, got q={q}"
        )


class QGaussianShape(BaseModel):
    model_config = ConfigDict(frozen=True)

    q: float = 1.39
    delta_w: float

    @model_validator(mode="after")
    def _check_shape(self):
        _check_q(self.q)
        if not self.delta_w > 0:
            raise ConfigError(
                f"q-Gaussian width must be > 0, got delta_w={self.delta_w}"
            )
        return self

    @classmethod
    def from_fwhm(cls, q, gamma_q):
        _check_q(q)
        return cls(q=q, delta_w=gamma_q / (2 * _fwhm_factor(q)))

    @property
    def gamma_q(self):
        return 2 * self.delta_w * _fwhm_factor(self.q)

    @property
    def norm_c(self):
        q = self.q
        integral = (
            self.delta_w
            * np.sqrt(np.pi / (q - 1))
            * np.exp(
                special.gammaln((3 - q) / (2 * (q - 1)))
                - special.gammaln(1 / (q - 1))
            )
        )
        return 1 / integral

    def profile(self, x):
        """Unnormalized shape at offset x from the centre, peak value 1."""
        base = 1 - (1 - self.q) * np.square(x) / self.delta_w**2
        with np.errstate(divide="ignore", invalid="ignore"):
            value = np.abs(base) ** (1 / (1 - self.q))
        return np.where(base > 0, value, 0.0)


class HoleSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    center: float
    width: float = mhz(0.2)
    depth: float = 1.0

    @model_validator(mode="after")
    def _check_hole(self):
        if not 0 <= self.depth <= 1:
            raise ConfigError(f"hole depth must lie in [0, 1], got {self.depth}")
        if not self.width > 0:
            raise ConfigError(f"hole width must be > 0, got {self.width}")
        return self

    def factor(self, omega):
        offset = (np.asarray(omega) - self.center) / self.width
        return 1 - self.depth * np.exp(-0.5 * offset**2)


class SpinDensity(BaseModel):
    model_config = ConfigDict(frozen=True)

    shape: QGaussianShape
    center: float
    holes: tuple[HoleSpec, ...] = ()
    renormalize_after_holes: bool = False
    # Overall factor fixed by normalize(); 1 means the bare q-Gaussian norm
    scale: float = 1.0


def spin_density(shape, center, holes=(), renormalize_after_holes=False):
    density = SpinDensity(
        shape=shape,
        center=center,
        holes=tuple(holes),
        renormalize_after_holes=renormalize_after_holes,
    )
    if renormalize_after_holes and holes:
        density = normalize(density)
    return density


def two_hole_density(shape, params, width=mhz(0.2), depth=1.0, **kwargs):
    """Holes burnt at omega_s +/- Omega."""
    holes = [
        HoleSpec(center=params.omega_s + sign * params.Omega,
                 width=width, depth=depth)
        for sign in (-1, 1)
    ]
    return spin_density(shape, params.omega_s, holes, **kwargs)


def density_at(density, omega):
    omega = np.asarray(omega, dtype=float)
    value = (
        density.scale
        * density.shape.norm_c
        * density.shape.profile(omega - density.center)
    )
    for hole in density.holes:
        value = value * hole.factor(omega)
    return value


def _breakpoints(density):
    delta = density.shape.delta_w
    points = {density.center - 50 * delta, density.center + 50 * delta,
              density.center}
    for hole in density.holes:
        for k in (-10, 0, 10):
            points.add(hole.center + k * hole.width)
    return sorted(points)


def total_weight(density):
    """Adaptive quadrature of rho over the whole real axis."""
    def f(x):
        return float(density_at(density, x))

    options = dict(epsabs=1e-15, epsrel=1e-13, limit=400)
    points = _breakpoints(density)
    total = integrate.quad(f, -np.inf, points[0], **options)[0]
    for lo, hi in zip(points[:-1], points[1:]):
        total += integrate.quad(f, lo, hi, **options)[0]
    total += integrate.quad(f, points[-1], np.inf, **options)[0]
    return total


def normalize(density):
    total = total_weight(density)
    if not total > 0:
        raise ConfigError(f"spin density integrates to {total}, cannot normalize")
    return density.model_copy(update={"scale": density.scale / total})


@dataclass(frozen=True)
class FrequencyGrid:
    points: np.ndarray
    weights: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        for arr in (self.points, self.weights, self.rho):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.points)

    @property
    def mass(self):
        """Quadrature weight times density, w_k * rho(omega_k)."""
        return self.weights * self.rho


def _gauss_legendre_panels(lo, hi, n_points, order):
    order = max(1, min(order, n_points))
    n_panels = max(1, int(round(n_points / order)))
    nodes, weights = special.roots_legendre(order)
    edges = np.linspace(lo, hi, n_panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    x = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
    w = (half[:, None] * weights[None, :]).ravel()
    return x, w


def discretize(
    density,
    n_points=DEFAULT_SPECTRAL_POINTS,
    span=None,
    panel_order=DEFAULT_PANEL_ORDER
):
    """
    Composite Gauss-Legendre quadrature for integrals of rho(omega) f(omega).

    Without `span` the whole (infinite) q-Gaussian support is covered through
    omega = center + delta_w * tan(theta), so the heavy tails are included.
    With `span=(lo, hi)` panels are laid out directly on that interval.
    """
    if n_points < 2:
        raise EmptyGridError(f"need at least 2 spectral points, got {n_points}")

    if span is None:
        theta, w_theta = _gauss_legendre_panels(
            -np.pi / 2, np.pi / 2, n_points, panel_order
        )
        delta = density.shape.delta_w
        points = density.center + delta * np.tan(theta)
        weights = w_theta * delta / np.cos(theta) ** 2
    else:
        lo, hi = map(float, span)
        if not hi > lo:
            raise EmptyGridError(f"empty frequency span [{lo}, {hi}]")
        points, weights = _gauss_legendre_panels(lo, hi, n_points, panel_order)

    rho = density_at(density, points)
    if not np.sum(weights * rho) > 0:
        raise EmptyGridError("spin density vanishes on the requested span")

    return FrequencyGrid(points=points, weights=weights, rho=rho)


def default_span(density, params=None, width_factor=8.0):
    gamma_q = density.shape.gamma_q
    return (density.center - width_factor * gamma_q,
            density.center + width_factor * gamma_q)


def equal_weight_grid(density, n_bins=DEFAULT_ORACLE_BINS, oversample=20):
    """Quantile bins of rho, each bin carrying the same share of the mass."""
    if n_bins < 1:
        raise EmptyGridError(f"need at least one spin bin, got {n_bins}")
    dense = discretize(density, n_points=oversample * n_bins)
    mass = dense.mass
    cumulative = np.cumsum(mass) - 0.5 * mass
    total = mass.sum()
    targets = (np.arange(n_bins) + 0.5) / n_bins * total
    points = np.interp(targets, cumulative, dense.points)
    rho = density_at(density, points)
    if np.any(rho <= 0):
        raise EmptyGridError("equal-weight bin landed where rho vanishes")
    weights = (total / n_bins) / rho
    return FrequencyGrid(points=points, weights=weights, rho=rho)


def decoherence_estimate(params, density, offset=None):
    """
    Gamma ~ kappa + pi * Omega^2 * rho(omega_s +/- offset).

    offset defaults to Omega; pass params.omega_r to evaluate rho at the
    polariton peaks instead.
    """
    offset = params.Omega if offset is None else offset
    rho = density_at(
        density, [density.center + offset, density.center - offset]
    )
    return params.kappa + np.pi * params.Omega**2 * float(np.mean(rho))


class SectionLayout(BaseModel):
    """Write section [t1, t2], delay [t2, tau_a], readout [tau_a, tau_c] <= t3."""
    model_config = ConfigDict(frozen=True)

    t1: float = 0.0
    t2: float
    t3: float
    tau_a: float
    tau_b: float
    tau_c: float

    @model_validator(mode="before")
    @classmethod
    def _default_tau_b(cls, data):
        if isinstance(data, dict) and data.get("tau_b") is None:
            data = dict(data)
            if "tau_a" in data and "tau_c" in data:
                data["tau_b"] = 0.5 * (data["tau_a"] + data["tau_c"])
        return data

    @model_validator(mode="after")
    def _check_order(self):
        t = (self.t1, self.t2, self.tau_a, self.tau_b, self.tau_c, self.t3)
        if not (t[0] < t[1] <= t[2] < t[3] < t[4] <= t[5]):
            raise ConfigError(
                "layout must satisfy t1 < t2 <= tau_a < tau_b < tau_c <= t3, "
                f"got {t}"
            )
        return self

    @property
    def boundaries(self):
        return (self.t1, self.t2, self.t3)

    @property
    def write_fundamental(self):
        return np.pi / (self.t2 - self.t1)

    @property
    def read_fundamental(self):
        return np.pi / (self.t3 - self.t2)

    def on_grid(self, dt):
        """Snap every boundary to the time grid t1 + m*dt."""
        snapped = {}
        for name in ("t2", "t3", "tau_a", "tau_b", "tau_c"):
            value = getattr(self, name)
            snapped[name] = self.t1 + round((value - self.t1) / dt) * dt
        moved = {
            k: (getattr(self, k), v) for k, v in snapped.items()
            if abs(getattr(self, k) - v) > 1e-9
        }
        if moved:
            warnings.warn(
                f"section boundaries snapped to the dt={dt} ns grid: {moved}"
            )
        return SectionLayout(t1=self.t1, **snapped)


CASE_A_LAYOUT = SectionLayout(
    t1=0.0, t2=36.72, t3=110.15, tau_a=36.72, tau_c=110.15
)
CASE_B_LAYOUT = SectionLayout(
    t1=0.0, t2=73.4, t3=1174.9, tau_a=1114.3, tau_c=1153.6
)


def default_shape():
    return QGaussianShape.from_fwhm(1.39, mhz(9.4))
