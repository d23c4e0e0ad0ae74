import hashlib
import json
import os
import platform

import numpy as np
import pandas as pd
import scipy

from dynamics.config import config_digest
from dynamics.errors import ConfigError


FLOAT_FORMAT = "%.17g"
TABLE_COLUMNS = ["role", "k", "re", "im", "amp_scale"]
TABLE_ROLES = ("xi0", "xi1", "zeta")
POWER_TOL = 0.01


def next_free_path(path):
    """`path`, or the first `base-N.ext` that does not exist yet."""
    base, ext = os.path.splitext(path)
    candidate, n = path, 0
    while os.path.exists(candidate):
        n += 1
        candidate = f"{base}-{n}{ext}"
    return candidate


def output_file(base_dir, name, ext=".csv"):
    """Fresh path under base_dir; an existing file gets a -N suffix instead of being overwritten."""
    os.makedirs(base_dir, exist_ok=True)
    return next_free_path(os.path.join(base_dir, name + ext))


def write_csv(frame, path, what="results", verbose=True):
    frame.to_csv(path, float_format=FLOAT_FORMAT, index=False)
    if verbose:
        print(f"Saved {what} to {path}")
    return path


def trajectory_frame(traj):
    if traj.batched:
        raise ConfigError("only single trajectories can be exported, got a batch")
    a = traj.samples
    return pd.DataFrame({
        "t_ns": traj.times,
        "re_A": a.real,
        "im_A": a.imag,
        "abs2_A": np.abs(a) ** 2,
    })


def write_trajectory(traj, path, verbose=True):
    return write_csv(trajectory_frame(traj), path, "trajectory", verbose)


def read_trajectory(path):
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = {"t_ns", "re_A", "im_A"} - set(frame.columns)
    if missing:
        raise ConfigError(f"trajectory file {path} lacks columns {sorted(missing)}")
    return frame


# Coefficient tables


def coefficient_frame(xi0, xi1, zeta, kappa, write_scale=1.0, read_scale=1.0):
    """
    Rows role,k,re,im,amp_scale with re + i im = c / (amp_scale * kappa), the
    normalization used by published coefficient tables.
    """
    rows = []
    for role, coeffs, scale in (("xi0", xi0, write_scale), ("xi1", xi1, write_scale),
                                ("zeta", zeta, read_scale)):
        for k, c in enumerate(np.asarray(coeffs, dtype=complex), start=1):
            c = c / (scale * kappa)
            rows.append({"role": role, "k": k, "re": c.real, "im": c.imag,
                         "amp_scale": scale})
    return pd.DataFrame(rows, columns=TABLE_COLUMNS)


def normalized_power(frame, role):
    rows = frame[frame["role"] == role]
    return 0.5 * float(np.sum(rows["re"] ** 2 + rows["im"] ** 2))


def read_coefficient_table(path, kappa, check_power=False, power_tol=POWER_TOL):
    """
    Load a coefficient table into absolute drive units. Returns
    {role: (coeffs, amp_scale)} for xi0, xi1 and zeta.
    """
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigError(f"cannot read coefficient table {path}: {e}") from e

    missing = set(TABLE_COLUMNS) - set(frame.columns)
    if missing:
        raise ConfigError(f"coefficient table {path} lacks columns {sorted(missing)}")
    if frame[["re", "im", "amp_scale"]].isna().any().any():
        raise ConfigError(f"coefficient table {path} has empty entries")

    out = {}
    for role in TABLE_ROLES:
        rows = frame[frame["role"] == role].sort_values("k")
        if rows.empty:
            raise ConfigError(f"coefficient table {path} has no '{role}' rows")
        expected = np.arange(1, len(rows) + 1)
        if not np.array_equal(rows["k"].to_numpy(), expected):
            raise ConfigError(f"coefficient table {path}: '{role}' k must run 1..{len(rows)}")
        scales = rows["amp_scale"].unique()
        if len(scales) != 1 or scales[0] <= 0:
            raise ConfigError(f"coefficient table {path}: '{role}' needs one positive amp_scale")
        if check_power:
            power = normalized_power(frame, role)
            if abs(power - 1) > power_tol:
                raise ConfigError(
                    f"coefficient table {path}: '{role}' normalized power is "
                    f"{power:.4f}, expected 1 +/- {power_tol}"
                )
        scale = float(scales[0])
        coeffs = (rows["re"].to_numpy() + 1j * rows["im"].to_numpy()) * scale * kappa
        out[role] = (coeffs, scale)
    return out


def write_coefficient_table(frame, path, verbose=True):
    return write_csv(frame, path, "coefficient table", verbose)


# Manifests


def content_hash(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def solution_hash(solution):
    return content_hash(solution.xi0, solution.xi1, solution.zeta)


def versions():
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (complex, np.complexfloating)):
        return {"re": float(value.real), "im": float(value.imag)}
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_manifest(path, command, cfg=None, verbose=True, **fields):
    """Record everything needed to rerun a command: config, its hash, seeds, versions and results."""
    manifest = {"command": command, "versions": versions()}
    if cfg is not None:
        manifest["config_sha256"] = config_digest(cfg)
        manifest["config"] = cfg.model_dump(mode="json")
    manifest.update(fields)
    with open(path, "w") as f:
        json.dump(_jsonable(manifest), f, indent=4)
    if verbose:
        print(f"Saved manifest to {path}")
    return path
