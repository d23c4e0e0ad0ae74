import argparse
import os
import re
import sys

import numpy as np
import pandas as pd
from tabulate import tabulate

from dynamics.basis import Pulse, power_ratio, rabi_fundamentals
from dynamics.config import PRESET_ALIASES, PRESET_TABLES, TABLES_DIR, load_config
from dynamics.errors import ConfigError, Error
from dynamics.model import decoherence_estimate, mhz, to_mhz
from dynamics.solver import propagate_sections
from noise import NoiseHarness, NoiseSpec, RNG_ALGORITHM, error_vs_amplitude, noise_sweep
from optimizer import (
    evaluate_solution,
    optimize,
    prepare,
    prepare_context,
    problem_from_config,
    solution_report,
)
from retrieval import (
    Superposition,
    bloch_grid,
    noiseless_round_trip,
    rebit_readout_sweep,
    retrieval_matrices,
    retrieval_sweep,
)
from utils import (
    coefficient_frame,
    output_file,
    read_coefficient_table,
    solution_hash,
    write_coefficient_table,
    write_csv,
    write_manifest,
    write_trajectory,
)


PULSE_TABLES = {
    "case-a": "case_a.csv",
    "case-b": "case_b.csv",
    "table1": "case_a.csv",
    "table2": "case_b.csv",
}
PULSE_PATTERN = re.compile(r"^(table|table1|table2|case-a|case-b)-ket([01])$")

# Long names accepted for the Bloch-sphere grid
GRID_ALIASES = {"fig3": "bloch"}


def parse_complex(text):
    try:
        return complex(text.replace(" ", "").replace("i", "j"))
    except ValueError:
        raise ConfigError(f"cannot read '{text}' as a complex number")


def parse_coefficients(text):
    return np.array([parse_complex(v) for v in text.split(",") if v.strip()])


# Configuration and inputs


def config_from_args(args):
    overrides = {"numerics": {}, "optimizer": {}, "noise": {}}
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    if args.dt is not None:
        overrides["numerics"]["dt"] = args.dt
    if args.n_workers is not None:
        overrides["numerics"]["n_workers"] = args.n_workers
    if args.seed is not None:
        overrides["optimizer"]["seed"] = args.seed
        overrides["noise"]["seed"] = args.seed
    if args.restarts is not None:
        overrides["optimizer"]["restarts"] = args.restarts
    if getattr(args, "noise_rel", None) is not None:
        overrides["noise"]["delta_eta_rel"] = args.noise_rel
    if getattr(args, "n", None) is not None:
        overrides["noise"]["n_realizations"] = args.n
    return load_config(args.config, args.preset, overrides)


def table_path(cfg, name="table"):
    if name == "table":
        if cfg.preset is None:
            raise ConfigError("pulse source 'table-ketN' needs a preset or an explicit --table")
        return os.path.join(TABLES_DIR, PRESET_TABLES[cfg.preset])
    return os.path.join(TABLES_DIR, PULSE_TABLES[name])


def load_table(cfg, kappa, path=None):
    return read_coefficient_table(path or table_path(cfg), kappa)


def resolve_pulses(args, cfg, kappa):
    """Write and readout coefficients, in absolute units, for `simulate`."""
    write_unit = cfg.basis.write_scale * kappa
    if args.xi is not None:
        xi = parse_coefficients(args.xi) * write_unit
        zeta = (parse_coefficients(args.zeta) * cfg.basis.read_scale * kappa
                if args.zeta is not None else None)
        return xi, zeta
    if args.pulse == "zero":
        return None, None
    if args.table is not None:
        state = args.state
        table = read_coefficient_table(args.table, kappa)
    else:
        match = PULSE_PATTERN.match(args.pulse)
        if match is None:
            raise ConfigError(
                f"unknown pulse source '{args.pulse}', use zero, table-ketN, "
                "case-a-ketN, case-b-ketN, table1-ketN or table2-ketN"
            )
        name, state = match.group(1), int(match.group(2))
        table = read_coefficient_table(table_path(cfg, name), kappa)
    return table[f"xi{state}"][0], table["zeta"][0]


def load_solution(args, cfg, setup, verbose=False):
    table = load_table(cfg, setup.params.kappa, getattr(args, "solution", None))
    problem = problem_from_config(cfg, setup)
    solution = evaluate_solution(problem, table["xi0"][0], table["xi1"][0], table["zeta"][0])
    if verbose:
        print(f"Loaded control solution (sha256 {solution_hash(solution)[:12]})")
    return problem, solution


def noise_spec(cfg, kappa, delta_eta_rel=None):
    n = cfg.noise
    rel = n.delta_eta_rel if delta_eta_rel is None else delta_eta_rel
    return NoiseSpec(
        delta_eta=rel * cfg.basis.write_scale * kappa,
        n_realizations=n.n_realizations,
        seed=n.seed,
        complex_noise=n.complex_noise,
        sections=n.sections,
    )


def noise_fields(cfg, spec):
    return {
        "noise": {
            "delta_eta_rel": cfg.noise.delta_eta_rel,
            "n_realizations": spec.n_realizations,
            "seed": spec.seed,
            "complex_noise": spec.complex_noise,
            "sections": spec.sections,
            "rng": RNG_ALGORITHM,
        }
    }


def sweep_points(args):
    return bloch_grid(args.n_theta, args.n_phi)


# Subcommands


def cmd_simulate(args, cfg):
    params, density, grid, layout, context = prepare_context(cfg, args.verbose)
    xi, zeta = resolve_pulses(args, cfg, params.kappa)
    b = cfg.basis
    f_write = layout.write_fundamental if b.omega_f_write is None else mhz(b.omega_f_write)
    f_read = layout.read_fundamental if b.omega_f_read is None else mhz(b.omega_f_read)
    drives = [
        None if xi is None else Pulse(xi, f_write, layout.t1, section_end=layout.t2),
        None if zeta is None else Pulse(zeta, f_read, layout.t2, section_end=layout.t3),
    ]
    result = propagate_sections(context, layout, drives)
    traj = result.concatenate()

    path = output_file(cfg.output_dir, "trajectory")
    write_trajectory(traj, path)
    write_manifest(
        output_file(cfg.output_dir, "simulate", ".json"), "simulate", cfg,
        pulse=args.pulse if args.xi is None else "inline",
        write_coefficients=xi, readout_coefficients=zeta,
        n_spectral_points=len(grid), trajectory=path,
    )
    if args.verbose:
        gamma = decoherence_estimate(params, density)
        print(f"Decoherence estimate 1/Gamma = {1 / gamma:.2f} ns")
    return 0


def cmd_basis(args, cfg):
    setup = prepare(cfg, args.verbose)
    basis, g = setup.basis, setup.gram
    resp = basis.read_responses
    columns = {"t_ns": resp.times}
    for name, rows in (("a", basis.read_responses.samples), ("psi", basis.memory_responses.samples)):
        for k, row in enumerate(rows, start=1):
            columns[f"re_{name}{k}"] = row.real
            columns[f"im_{name}{k}"] = row.imag
    path = write_csv(pd.DataFrame(columns), output_file(cfg.output_dir, "basis_readout"),
                     "readout basis responses")
    fundamentals = rabi_fundamentals(setup.layout, setup.params.omega_r)
    diag = {name: np.real(np.diag(block)) for name, block in g.blocks.items()}
    write_manifest(
        output_file(cfg.output_dir, "basis", ".json"), "basis", cfg,
        responses=path, n_write=basis.n_write, n_read=basis.n_read,
        omega_f_write_mhz=to_mhz(basis.omega_f_write),
        omega_f_read_mhz=to_mhz(basis.omega_f_read),
        half_rabi_periods=fundamentals, gram_diagonals=diag,
    )
    table = [
        ("Write harmonics", basis.n_write),
        ("Read harmonics", basis.n_read),
        ("Write section / (pi / Omega_R)", f"{fundamentals['write']:.3f}"),
        ("Read section / (pi / Omega_R)", f"{fundamentals['read']:.3f}"),
    ]
    print(tabulate(table, tablefmt="fancy_grid"))
    return 0


def save_solution(cfg, problem, solution, command, name="solution", extra=None):
    frame = coefficient_frame(
        solution.xi0, solution.xi1, solution.zeta, problem.kappa,
        cfg.basis.write_scale, cfg.basis.read_scale,
    )
    path = write_coefficient_table(frame, output_file(cfg.output_dir, name))
    report = solution_report(problem, solution)
    write_manifest(
        output_file(cfg.output_dir, command, ".json"), command, cfg,
        solution=path, solution_sha256=solution_hash(solution),
        seed=solution.seed, restarts=solution.restarts, report=report,
        history=solution.history, **(extra or {}),
    )
    return report


def print_report(report, ratio=None):
    table = [
        ("Objective", f"{report['objective']:.4e}"),
        ("S", f"{report['s_target']:.4e}"),
        ("|O01| / S", f"{report['normalized_cross_overlap']:.3e}"),
    ]
    if report["efficiency"]:
        table.append(("Efficiency", f"{report['efficiency']['mean']:.2%}"))
    if ratio is not None:
        table.append(("P(R) / P(W)", f"{ratio:.4f}"))
    print(tabulate(table, tablefmt="fancy_grid"))


def cmd_optimize(args, cfg):
    setup = prepare(cfg, args.verbose)
    problem = problem_from_config(cfg, setup)
    o = cfg.optimizer
    solution = optimize(problem, o.seed, o.restarts, cfg.numerics.n_workers, args.verbose)
    report = save_solution(cfg, problem, solution, "optimize")
    print_report(report)
    return 0


def single_retrieval(args, cfg, setup, solution, mats):
    sup = Superposition(parse_complex(args.alpha), parse_complex(args.beta))
    rel = cfg.noise.delta_eta_rel
    row = {"re_alpha_in": sup.alpha.real, "im_alpha_in": sup.alpha.imag,
           "re_beta_in": sup.beta.real, "im_beta_in": sup.beta.imag}
    if rel == 0:
        res = noiseless_round_trip(sup, solution, setup.basis, mats)
        alpha_r, beta_r, eps = res.alpha_r, res.beta_r, (res.eps_alpha, res.eps_beta)
    else:
        spec = noise_spec(cfg, setup.params.kappa)
        harness = NoiseHarness.build(solution, setup.basis, setup.context, mats, spec,
                                     args.verbose)
        res = harness.study(sup)
        alpha_r, beta_r, eps = res.mean_alpha, res.mean_beta, (res.eps_alpha, res.eps_beta)
        row.update({"se_alpha": res.std_err[0], "se_beta": res.std_err[1]})
    row.update({
        "re_alpha_r": alpha_r.real, "im_alpha_r": alpha_r.imag,
        "re_beta_r": beta_r.real, "im_beta_r": beta_r.imag,
        "eps_alpha": eps[0], "eps_beta": eps[1], "cond": mats.cond,
    })
    print(tabulate([(k, f"{v:.6g}") for k, v in row.items()], tablefmt="fancy_grid"))
    return pd.DataFrame([row])


def run_noise_sweeps(args, cfg, setup, solution, mats, sweep):
    """Noisy Bloch-sphere sweep and/or the error-versus-amplitude table."""
    spec = noise_spec(cfg, setup.params.kappa)
    harness = NoiseHarness.build(solution, setup.basis, setup.context, mats, spec, args.verbose)
    points = sweep_points(args)
    outputs = {}
    fields = noise_fields(cfg, spec)
    if sweep in ("bloch", "all"):
        frame = noise_sweep(harness, points, verbose=args.verbose)
        outputs["sweep"] = write_csv(frame, output_file(cfg.output_dir, "noise_sweep"),
                                     "noisy retrieval sweep")
        fields["max_eps"] = float(frame[["eps_alpha", "eps_beta"]].to_numpy().max())
        print(f"Max retrieval error over {len(points)} states: {fields['max_eps']:.4e}")
    if sweep in ("noise-amplitudes", "all"):
        frame, fit = error_vs_amplitude(
            harness, cfg.noise.amplitudes, points,
            eta0=cfg.basis.write_scale * setup.params.kappa, verbose=True,
        )
        outputs["amplitudes"] = write_csv(frame, output_file(cfg.output_dir, "noise_amplitudes"),
                                          "error versus noise amplitude")
        fields["fit"] = fit
        fields["amplitudes"] = cfg.noise.amplitudes
    return outputs, fields


def cmd_retrieve(args, cfg):
    setup = prepare(cfg, args.verbose)
    problem, solution = load_solution(args, cfg, setup, args.verbose)
    mats = retrieval_matrices(solution, setup.gram)
    fields = {"solution_sha256": solution_hash(solution), "cond": mats.cond}

    if args.sweep == "none":
        frame = single_retrieval(args, cfg, setup, solution, mats)
        fields["retrieval"] = write_csv(frame, output_file(cfg.output_dir, "retrieval"),
                                        "retrieval")
        if cfg.noise.delta_eta_rel:
            fields.update(noise_fields(cfg, noise_spec(cfg, setup.params.kappa)))
    elif args.sweep == "rebit":
        frame = rebit_readout_sweep(solution, setup.basis)
        fields["rebit"] = write_csv(frame, output_file(cfg.output_dir, "rebit_readout"),
                                    "rebit readout responses")
    elif args.sweep == "bloch" and cfg.noise.delta_eta_rel == 0:
        frame = retrieval_sweep(solution, setup.basis, mats, sweep_points(args), verbose=True)
        fields["sweep"] = write_csv(frame, output_file(cfg.output_dir, "retrieval_sweep"),
                                    "noiseless retrieval sweep")
    else:
        outputs, noise = run_noise_sweeps(args, cfg, setup, solution, mats, args.sweep)
        fields.update(outputs)
        fields.update(noise)

    write_manifest(output_file(cfg.output_dir, "retrieve", ".json"), "retrieve", cfg, **fields)
    return 0


def cmd_noise_sweep(args, cfg):
    setup = prepare(cfg, args.verbose)
    problem, solution = load_solution(args, cfg, setup, args.verbose)
    mats = retrieval_matrices(solution, setup.gram)
    outputs, fields = run_noise_sweeps(args, cfg, setup, solution, mats, "all")
    write_manifest(
        output_file(cfg.output_dir, "noise_sweep", ".json"), "noise-sweep", cfg,
        solution_sha256=solution_hash(solution), **outputs, **fields,
    )
    return 0


def reproduce_case(args, cfg, name):
    """Published pulses end to end, plus optionally an in-house optimization."""
    setup = prepare(cfg, args.verbose)
    problem, solution = load_solution(args, cfg, setup, args.verbose)
    basis, layout = setup.basis, setup.layout
    ratio = power_ratio(basis.read_pulse(solution.zeta), basis.write_pulse(solution.xi0))

    outputs = {}
    for i, xi in enumerate((solution.xi0, solution.xi1)):
        drives = [basis.write_pulse(xi), basis.read_pulse(solution.zeta)]
        traj = propagate_sections(setup.context, layout, drives).concatenate()
        outputs[f"trajectory_{i}"] = write_trajectory(
            traj, output_file(cfg.output_dir, f"{name}-ket{i}")
        )

    gamma = decoherence_estimate(setup.params, setup.density)
    gamma_r = decoherence_estimate(setup.params, setup.density, setup.params.omega_r)
    extra = {
        **outputs,
        "power_ratio": ratio,
        "decoherence_time_ns": 1 / gamma,
        "decoherence_time_polariton_ns": 1 / gamma_r,
    }
    report = save_solution(cfg, problem, solution, f"reproduce-{name}",
                           name=f"{name}-table", extra=extra)
    print_report(report, ratio)
    print(f"1/Gamma = {1 / gamma:.2f} ns at omega_s +/- Omega, "
          f"{1 / gamma_r:.2f} ns at omega_s +/- Omega_R")

    if args.optimize:
        o = cfg.optimizer
        optimized = optimize(problem, o.seed, o.restarts, cfg.numerics.n_workers, args.verbose)
        report = save_solution(cfg, problem, optimized, f"reproduce-{name}-optimized",
                               name=f"{name}-optimized")
        print_report(report)
    return 0


def cmd_reproduce(args, cfg):
    if args.target == "bloch":
        setup = prepare(cfg, args.verbose)
        problem, solution = load_solution(args, cfg, setup, args.verbose)
        mats = retrieval_matrices(solution, setup.gram)
        frame = retrieval_sweep(solution, setup.basis, mats, sweep_points(args), verbose=True)
        outputs = {"noiseless": write_csv(frame, output_file(cfg.output_dir, "bloch-noiseless"),
                                          "noiseless retrieval sweep")}
        noisy, fields = run_noise_sweeps(args, cfg, setup, solution, mats, "all")
        outputs.update(noisy)
        write_manifest(
            output_file(cfg.output_dir, "reproduce-bloch", ".json"), "reproduce bloch", cfg,
            solution_sha256=solution_hash(solution), cond=mats.cond, **outputs, **fields,
        )
        return 0
    return reproduce_case(args, cfg, args.target)


COMMANDS = {
    "simulate": cmd_simulate,
    "basis": cmd_basis,
    "optimize": cmd_optimize,
    "retrieve": cmd_retrieve,
    "noise-sweep": cmd_noise_sweep,
    "reproduce": cmd_reproduce,
}

TARGET_PRESETS = {
    "case-a": "case-a",
    "case-b": "case-b",
    "bloch": "case-a",
    "fig3": "case-a",
}


def parse_args(argv=None):
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="JSON run configuration")
    common.add_argument(
        "--preset",
        choices=["case-a", "case-b", *PRESET_ALIASES],
        help="Parameter preset"
    )
    common.add_argument("--output-dir", type=str, help="Directory for CSV and manifest output")
    common.add_argument("--dt", type=float, help="Time step in ns")
    common.add_argument("--seed", type=int, help="Seed for optimizer restarts and noise")
    common.add_argument("--restarts", type=int, help="Number of optimizer restarts")
    common.add_argument("--n-workers", type=int, help="Worker threads")
    common.add_argument(
        "-v", "--verbose",
        action="store_true",
        help="Enable verbose output"
    )

    sweep = argparse.ArgumentParser(add_help=False)
    sweep.add_argument("--solution", type=str,
                       help="Coefficient table (default: the preset's published table)")
    sweep.add_argument("--noise-rel", type=float, help="Noise amplitude delta_eta / eta_0")
    sweep.add_argument("--n", type=int, help="Noise realizations")
    sweep.add_argument("--n-theta", type=int, default=21, help="Polar grid points")
    sweep.add_argument("--n-phi", type=int, default=41, help="Azimuthal grid points")

    parser = argparse.ArgumentParser(
        description="Optimal write/readout control of a cavity coupled to a spin ensemble"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="Simulate the cavity amplitude")
    p.add_argument("--pulse", default="zero",
                   help="zero, table-ketN, case-a-ketN, case-b-ketN, table1-ketN or table2-ketN")
    p.add_argument("--table", type=str, help="Coefficient table to take the pulse from")
    p.add_argument("--state", type=int, choices=[0, 1], default=0,
                   help="State row of --table")
    p.add_argument("--xi", type=str, help="Inline write coefficients, e.g. '0.4+0.1i,0.3'")
    p.add_argument("--zeta", type=str, help="Inline readout coefficients")

    sub.add_parser("basis", parents=[common], help="Build basis responses and Gram matrices")
    sub.add_parser("optimize", parents=[common], help="Optimize write and readout pulses")

    p = sub.add_parser("retrieve", parents=[common, sweep], help="Encode and retrieve a state")
    p.add_argument("--alpha", default="1", help="Amplitude of |0>")
    p.add_argument("--beta", default="0", help="Amplitude of |1>")
    p.add_argument("--sweep",
                   choices=["none", "bloch", "noise-amplitudes", "rebit", *GRID_ALIASES],
                   default="none", help="Retrieve over a grid of states instead")

    sub.add_parser("noise-sweep", parents=[common, sweep],
                   help="Noisy retrieval sweep and error versus noise amplitude")

    p = sub.add_parser("reproduce", parents=[common, sweep], help="Reproduce published results")
    p.add_argument("target", choices=sorted(TARGET_PRESETS))
    p.add_argument("--optimize", action="store_true",
                   help="Also run the optimizer on the same setup")

    args = parser.parse_args(argv)

    if args.command == "reproduce" and args.preset is None and args.config is None:
        args.preset = TARGET_PRESETS[args.target]
    if args.command == "reproduce":
        args.target = GRID_ALIASES.get(args.target, args.target)
    if getattr(args, "sweep", None) in GRID_ALIASES:
        args.sweep = GRID_ALIASES[args.sweep]
    if args.command == "simulate" and args.zeta is not None and args.xi is None:
        parser.error("--zeta needs --xi")
    if getattr(args, "noise_rel", None) is not None and args.noise_rel < 0:
        parser.error("--noise-rel must be >= 0")
    if getattr(args, "n_theta", 2) < 1 or getattr(args, "n_phi", 2) < 1:
        parser.error("sweep grids need at least one point per axis")

    return args


def main(argv=None):
    args = parse_args(argv)
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](args, cfg)
    except Error as e:
        print(f"error: {e}", file=sys.stderr)
        residuals = getattr(e, "residuals", None)
        if residuals:
            print(tabulate(sorted(residuals.items()), headers=["Constraint", "Residual"],
                           tablefmt="fancy_grid"), file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
