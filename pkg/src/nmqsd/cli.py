"""Command-line interface.

Subcommands mirror the package layout: ``simulate`` (ensemble runs),
``analyze`` (histogram / lineshape fit / area ratio), ``kernel``
(tau, fit, check), ``noise-check`` (alias of ``kernel check``) and
``oracle-compare`` (trajectory engine vs brute-force few-mode solver).

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O
error.  ``NMQSD_WORKERS`` sets the default worker count.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import __version__

WORKERS_ENV = "NMQSD_WORKERS"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _fmt(x: float) -> str:
    return f"{x:.17g}"


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _load_model_arg(name: str):
    from .kernel import mg24_kernel
    from .models import build_dephasing, build_mg24, build_rabi, load_model

    if name == "mg24":
        return build_mg24()
    if name == "rabi":
        return build_rabi(2.0)
    if name == "dephasing":
        return build_dephasing(1.0, mg24_kernel())
    if os.path.exists(name):
        return load_model(name)
    raise ValueError(f"unknown model preset or missing config file: {name!r}")


def _cmd_simulate(args) -> int:
    from .ensemble import EnsembleConfig, run_ensemble
    from .linalg import basis_state

    model = _load_model_arg(args.model)
    dt = args.dt if args.dt is not None else (0.1 if args.method == "nmqsd" else 0.01)
    cfg = EnsembleConfig(
        n_traj=args.ntraj, t_max=args.tmax, dt=dt, sample_every=args.sample_every,
        method=args.method, seed=args.seed, workers=args.workers,
    )
    psi0 = basis_state(model.dim, args.initial_state)
    result = run_ensemble(model, psi0, cfg, out_dir=args.out)
    print(f"wrote {args.out}: {cfg.n_traj} trajectories, "
          f"{result.n_failed} aborted, {result.wall_time:.1f} s")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _read_run(run_dir: str):
    manifest_path = os.path.join(run_dir, "manifest.json")
    ptable_path = os.path.join(run_dir, "ptable.csv")
    if not os.path.exists(manifest_path) or not os.path.exists(ptable_path):
        raise OSError(f"{run_dir} is not a complete run directory "
                      f"(need manifest.json and ptable.csv)")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    rows = []
    with open(ptable_path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            rows.append([float(x) for x in line.split(",")])
    p_table = np.array(rows)
    grid = manifest["t_grid"]
    t = grid["start"] + grid["step"] * np.arange(grid["count"])
    return manifest, t, p_table


def _cmd_analyze(args) -> int:
    from .analysis import fit_lineshape, histogram, peak_area_ratio

    manifest, t, p_table = _read_run(args.run_dir)
    window = tuple(args.window) if args.window else None
    hist = histogram(p_table, t, delta_p=args.delta_p, t_window=window)
    out_dir = args.out or args.run_dir
    os.makedirs(out_dir, exist_ok=True)

    with open(os.path.join(out_dir, "chi.csv"), "w", encoding="utf-8") as fh:
        fh.write("P,chi,stderr\n")
        total = hist.counts.sum()
        for center, dens, count in zip(hist.centers, hist.density, hist.counts):
            stderr = math.sqrt(max(count, 1.0)) / (total * hist.bin_width)
            fh.write(f"{_fmt(center)},{_fmt(dens)},{_fmt(stderr)}\n")

    fit = fit_lineshape(hist, args.variant)
    areas = peak_area_ratio(fit)
    record = {
        "variant": fit.variant,
        "params": {k: float(v) for k, v in fit.params.items()},
        "rms": fit.rms,
        "converged": fit.converged,
        "area_bright": areas.area_bright,
        "area_dark": areas.area_dark,
        "background_area": areas.background_area,
        "ratio": areas.ratio,
        "delta_p": args.delta_p,
        "t_window": list(hist.t_window),
        "n_samples": hist.n_samples,
    }
    with open(os.path.join(out_dir, "fit.json"), "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2)
        fh.write("\n")
    print(f"peak area ratio (bright/dark): {areas.ratio:.3f}  "
          f"[rms {fit.rms:.3e}, {hist.n_samples} samples]")
    return EXIT_OK


# ---------------------------------------------------------------------------
# kernel tools and noise check
# ---------------------------------------------------------------------------

def _load_kernel_arg(path: str):
    from .kernel import load_kernel, mg24_kernel

    if path == "mg24":
        return mg24_kernel()
    return load_kernel(path)


def _cmd_kernel_tau(args) -> int:
    from .kernel import memory_time

    print(_fmt(memory_time(_load_kernel_arg(args.kernel))))
    return EXIT_OK


def _cmd_kernel_fit(args) -> int:
    from .kernel import fit_kernel

    data = np.loadtxt(args.samples, delimiter=",", comments="#")
    if data.ndim != 2 or data.shape[1] != 3:
        raise ValueError(f"{args.samples}: expected CSV columns t,re,im")
    kernel, report = fit_kernel(data[:, 0], data[:, 1] + 1j * data[:, 2], args.terms)
    print(f"# rms residual {report.rms:.6e} after {report.n_iter} iterations")
    print("# A  gamma  omega")
    for term in kernel.terms:
        print(f"{_fmt(term.amplitude)} {_fmt(term.decay)} {_fmt(term.frequency)}")
    return EXIT_OK


def _cmd_kernel_check(args) -> int:
    from .noise import estimate_covariance

    kernel = _load_kernel_arg(args.kernel)
    lags = np.array(args.lags, dtype=float)
    est = estimate_covariance(kernel, lags, n_paths=args.paths,
                              master_seed=args.seed, omega_sign=args.omega_sign)
    print("lag,re_alpha,im_alpha,re_cov,im_cov,stderr_re,stderr_im")
    for i, lag in enumerate(est.lags):
        print(",".join(_fmt(x) for x in (
            lag, est.kernel_values[i].real, est.kernel_values[i].imag,
            est.covariance[i].real, est.covariance[i].imag,
            est.stderr_covariance[i, 0], est.stderr_covariance[i, 1])))
    return EXIT_OK


# ---------------------------------------------------------------------------
# oracle-compare
# ---------------------------------------------------------------------------

def _parse_modes(text: str):
    modes = []
    for field in text.split(","):
        g, _, w = field.partition(":")
        modes.append((float(g), float(w)))
    return tuple(modes)


def _cmd_oracle_compare(args) -> int:
    from .fewmode import TotalSystem, compare_nmqsd_to_exact
    from .linalg import basis_state, ketbra

    d = 2
    if args.coupling == "dephasing":
        coupling = ketbra(d, 0, 0) - ketbra(d, 1, 1)
        h = 0.5 * args.splitting * (ketbra(d, 0, 0) - ketbra(d, 1, 1))
        psi0 = (basis_state(d, 0) + basis_state(d, 1)) / math.sqrt(2.0)
    else:
        coupling = ketbra(d, 1, 0)     # lowering |g><e| with e = index 0
        h = 0.5 * args.splitting * (ketbra(d, 0, 0) - ketbra(d, 1, 1))
        psi0 = basis_state(d, 0)
    spec = TotalSystem(hamiltonian=h, coupling=coupling,
                       modes=_parse_modes(args.modes), n_max=args.nmax)
    report = compare_nmqsd_to_exact(spec, psi0, t_max=args.tmax, n_traj=args.ntraj,
                                    dt=args.dt, seed=args.seed, workers=args.workers)
    print("entry,max_abs_dev,max_sigma_units")
    for i in range(d):
        for j in range(d):
            print(f"rho_{i}_{j},{_fmt(report.max_abs_dev[i, j])},"
                  f"{_fmt(report.max_sigma_units[i, j])}")
    print(f"# worst deviation {report.worst_sigma:.2f} sigma over "
          f"{report.n_traj} trajectories")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nmqsd",
        description="Stochastic quantum-trajectory simulation and analysis")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a trajectory ensemble")
    sim.add_argument("--model", default="mg24",
                     help="preset (mg24, rabi, dephasing) or model config path")
    sim.add_argument("--method", choices=("nmqsd", "mqsd"), default="nmqsd")
    sim.add_argument("--ntraj", type=int, required=True)
    sim.add_argument("--tmax", type=float, default=2e5)
    sim.add_argument("--dt", type=float, default=None,
                     help="integration step (default 0.1 nmqsd, 0.01 mqsd)")
    sim.add_argument("--sample-every", type=float, default=10.0)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--workers", type=int, default=_default_workers())
    sim.add_argument("--initial-state", type=int, default=0)
    sim.add_argument("--out", required=True, help="output run directory")
    sim.set_defaults(func=_cmd_simulate)

    ana = sub.add_parser("analyze", help="histogram, lineshape fit and area ratio")
    ana.add_argument("run_dir")
    ana.add_argument("--delta-p", type=float, default=0.01)
    ana.add_argument("--window", nargs=2, type=float, default=None,
                     metavar=("T_MIN", "T_MAX"))
    ana.add_argument("--variant", choices=("nonmarkov", "markov"), default="nonmarkov")
    ana.add_argument("--out", default=None, help="output directory (default: run dir)")
    ana.set_defaults(func=_cmd_analyze)

    ker = sub.add_parser("kernel", help="kernel utilities")
    ker_sub = ker.add_subparsers(dest="kernel_command", required=True)
    tau = ker_sub.add_parser("tau", help="print the memory time of a kernel file")
    tau.add_argument("kernel", help="kernel file path, or 'mg24' for the packaged table")
    tau.set_defaults(func=_cmd_kernel_tau)
    fit = ker_sub.add_parser("fit", help="fit an exponential sum to sampled alpha(t,0)")
    fit.add_argument("samples", help="CSV with columns t,re,im")
    fit.add_argument("-m", "--terms", type=int, required=True)
    fit.set_defaults(func=_cmd_kernel_fit)

    def add_check_args(p):
        p.add_argument("kernel", help="kernel file path or 'mg24'")
        p.add_argument("--lags", nargs="+", type=float,
                       default=[0.0, 10.0, 50.0, 100.0, 200.0])
        p.add_argument("--paths", type=int, default=10_000)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--omega-sign", type=int, choices=(-1, 1), default=-1)
        p.set_defaults(func=_cmd_kernel_check)

    add_check_args(ker_sub.add_parser("check", help="noise covariance vs kernel"))
    add_check_args(sub.add_parser("noise-check", help="noise covariance vs kernel"))

    cmp_ = sub.add_parser("oracle-compare",
                          help="trajectory engine vs exact few-mode dynamics")
    cmp_.add_argument("--coupling", choices=("dephasing", "decay"), default="dephasing")
    cmp_.add_argument("--modes", default="0.2:1.0,0.15:1.7,0.1:0.6",
                      help="comma-separated g:omega pairs")
    cmp_.add_argument("--splitting", type=float, default=1.0)
    cmp_.add_argument("--nmax", type=int, default=4)
    cmp_.add_argument("--ntraj", type=int, default=2000)
    cmp_.add_argument("--tmax", type=float, default=6.0)
    cmp_.add_argument("--dt", type=float, default=0.005)
    cmp_.add_argument("--seed", type=int, default=0)
    cmp_.add_argument("--workers", type=int, default=_default_workers())
    cmp_.set_defaults(func=_cmd_oracle_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses exit code 2 for usage errors already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # numerical failures from the engine layers
        from .ensemble import EnsembleFailure
        from .propagator import TrajectoryAbort

        if isinstance(exc, (TrajectoryAbort, EnsembleFailure, FloatingPointError, RuntimeError)):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        raise


if __name__ == "__main__":
    sys.exit(main())
