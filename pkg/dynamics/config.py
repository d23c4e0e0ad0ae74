import hashlib
import json
import os

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from dynamics.errors import ConfigError
from dynamics.model import (
    HoleSpec,
    QGaussianShape,
    SectionLayout,
    SystemParams,
    mhz,
    spin_density,
)

# Environment defaults

load_dotenv()

OUTPUT_DIR = os.getenv("SPINMEM_OUTPUT_DIR", "output")
N_WORKERS = int(os.getenv("SPINMEM_N_WORKERS", "4"))
CACHE_DIR = os.getenv("SPINMEM_CACHE_DIR") or None
DEFAULT_SEED = int(os.getenv("SPINMEM_SEED", "7"))

DATA_DIR = os.path.join(os.path.dirname(os.path.dirname(__file__)), "data")
TABLES_DIR = os.path.join(DATA_DIR, "tables")

"""
Run configuration files are JSON trees with the sections below. Frequencies
are linear frequencies in MHz and times are in ns; conversion to rad/ns
happens in the to_* helpers. Example:

{
  "preset": "case-a",
  "system": {"kappa": 0.4, "Omega": 12.5},
  "layout": {"t2": 36.72, "t3": 110.15, "tau_a": 36.72, "tau_c": 110.15},
  "basis": {"n1": 5, "n2": 10, "read_scale": 0.26},
  "numerics": {"dt": 0.05}
}
"""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemConfig(_Section):
    omega_c: float = 2691.5
    omega_p: float = 2691.5
    omega_s: float = 2691.5
    kappa: float = Field(0.4, gt=0)
    gamma: float = Field(0.0, ge=0)
    Omega: float = Field(12.5, ge=0)
    omega_r: float = Field(13.62, gt=0)


class HoleConfig(_Section):
    # Either an absolute centre or an offset from omega_s, in MHz
    center: float | None = None
    offset: float | None = None
    width: float = Field(0.2, gt=0)
    depth: float = Field(1.0, ge=0, le=1)

    @model_validator(mode="after")
    def _one_position(self):
        if (self.center is None) == (self.offset is None):
            raise ValueError("give exactly one of 'center' or 'offset'")
        return self


class DensityConfig(_Section):
    q: float = Field(1.39, gt=1, lt=3)
    gamma_q: float = Field(9.4, gt=0)
    center: float | None = None
    renormalize_after_holes: bool = False
    n_points: int = Field(20_000, ge=2)
    span: tuple[float, float] | None = None
    oracle_bins: int = Field(4_000, ge=1)


class LayoutConfig(_Section):
    t1: float = 0.0
    t2: float = 36.72
    t3: float = 110.15
    tau_a: float = 36.72
    tau_b: float | None = None
    tau_c: float = 110.15


class BasisConfig(_Section):
    n1: int = Field(5, ge=1)
    n2: int = Field(10, ge=1)
    # Fundamentals in MHz; default pi / section length
    omega_f_write: float | None = None
    omega_f_read: float | None = None
    # Drive amplitude units, in multiples of kappa
    write_scale: float = Field(1.0, gt=0)
    read_scale: float = Field(0.26, gt=0)


class OptimizerConfig(_Section):
    s_target: float | None = Field(None, gt=0)
    p_target: float = Field(1.0, gt=0)
    suppression_budget: float = Field(1e-3, ge=0)
    endpoint_budget: float | None = Field(None, ge=0)
    separation: float = Field(0.05, gt=0)
    s_fraction: float = Field(0.9, gt=0, le=1)
    restarts: int = Field(4, ge=1)
    seed: int = DEFAULT_SEED
    maxiter: int = Field(2_000, ge=1)
    tol: float = Field(1e-8, gt=0)


class NoiseConfig(_Section):
    # Noise amplitude relative to the write drive unit eta_0 = write_scale * kappa
    delta_eta_rel: float = Field(0.05, ge=0)
    n_realizations: int = Field(200, ge=1)
    seed: int = DEFAULT_SEED
    complex_noise: bool = True
    sections: str = Field("all", pattern="^(all|write)$")
    amplitudes: list[float] = [0.01, 0.02, 0.03, 0.04, 0.05,
                               0.06, 0.07, 0.08, 0.09, 0.1]


class NumericsConfig(_Section):
    dt: float = Field(0.05, gt=0)
    n_workers: int = Field(N_WORKERS, ge=1)
    cache_dir: str | None = CACHE_DIR


class RunConfig(_Section):
    preset: str | None = None
    output_dir: str = OUTPUT_DIR
    system: SystemConfig = SystemConfig()
    density: DensityConfig = DensityConfig()
    holes: list[HoleConfig] = []
    layout: LayoutConfig = LayoutConfig()
    basis: BasisConfig = BasisConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    noise: NoiseConfig = NoiseConfig()
    numerics: NumericsConfig = NumericsConfig()


PRESETS = {
    "case-a": {
        "preset": "case-a",
        "layout": {"t1": 0.0, "t2": 36.72, "t3": 110.15,
                   "tau_a": 36.72, "tau_c": 110.15},
        "basis": {"n1": 5, "n2": 10, "write_scale": 1.0, "read_scale": 0.26},
    },
    "case-b": {
        "preset": "case-b",
        "holes": [{"offset": -12.5}, {"offset": 12.5}],
        "layout": {"t1": 0.0, "t2": 73.4, "t3": 1174.9,
                   "tau_a": 1114.3, "tau_c": 1153.6},
        "basis": {"n1": 4, "n2": 60, "write_scale": 1.0, "read_scale": 0.11},
    },
}

PRESET_TABLES = {
    "case-a": "case_a.csv",
    "case-b": "case_b.csv",
}

PRESET_ALIASES = {
    "paper-case-a": "case-a",
    "paper-case-b": "case-b",
}


def _merge(base, update):
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _describe(error):
    first = error.errors()[0]
    where = ".".join(str(p) for p in first["loc"]) or "<root>"
    return f"invalid configuration field '{where}': {first['msg']}"


def load_config(path=None, preset=None, overrides=None):
    """
    Build a RunConfig. Precedence: overrides > config file > preset > defaults.
    """
    tree = {}
    from_file = {}
    if path is not None:
        try:
            with open(path, "r") as f:
                from_file = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read configuration file {path}: {e}") from e
        if not isinstance(from_file, dict):
            raise ConfigError(f"configuration file {path} must hold a JSON object")

    preset = preset or from_file.get("preset")
    preset = PRESET_ALIASES.get(preset, preset)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(
                f"unknown preset '{preset}', choose from {sorted(PRESETS)}"
            )
        tree = _merge(tree, PRESETS[preset])

    tree = _merge(tree, from_file)
    if overrides:
        tree = _merge(tree, overrides)
    if preset is not None:
        tree["preset"] = preset

    try:
        return RunConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError(_describe(e)) from e


def to_params(cfg):
    s = cfg.system
    return SystemParams(
        omega_c=mhz(s.omega_c),
        omega_p=mhz(s.omega_p),
        omega_s=mhz(s.omega_s),
        kappa=mhz(s.kappa),
        gamma=mhz(s.gamma),
        Omega=mhz(s.Omega),
        omega_r=mhz(s.omega_r),
    )


def to_density(cfg, params=None):
    params = params or to_params(cfg)
    d = cfg.density
    center = params.omega_s if d.center is None else mhz(d.center)
    holes = [
        HoleSpec(
            center=mhz(h.center) if h.center is not None else center + mhz(h.offset),
            width=mhz(h.width),
            depth=h.depth,
        )
        for h in cfg.holes
    ]
    return spin_density(
        QGaussianShape.from_fwhm(d.q, mhz(d.gamma_q)),
        center,
        holes,
        renormalize_after_holes=d.renormalize_after_holes,
    )


def to_span(cfg):
    if cfg.density.span is None:
        return None
    return tuple(mhz(v) for v in cfg.density.span)


def to_layout(cfg):
    return SectionLayout(**cfg.layout.model_dump())


def config_digest(cfg):
    return hashlib.sha256(cfg.model_dump_json().encode()).hexdigest()
