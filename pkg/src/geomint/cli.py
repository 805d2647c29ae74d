"""Command-line experiment runner writing self-describing CSV tables.

Every output starts with ``#`` metadata lines (``key=value``: schema, code
version, every option and the seed) followed by an RFC-4180 style table.
Exit codes: 0 success, 1 numerical failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import shlex
import sys
import tempfile

import numpy as np

from . import __version__
from .analysis import (constraint_scaling_scan, convergence_scan, equivalent_multiplier,
                       harmonic_sylipn_boundedness, linear_stability_spectrum, local_exponents,
                       paired_radial_histograms, oo_radial_histogram)
from .core import ConfigurationError, PhaseState, build_penalty_system
from .integrators import (CONSTRAINED_INTEGRATORS, INTEGRATORS, IntegratorConfig,
                          LangevinConfig, Stepper, StepError, run_trajectory)
from .solvers import SolverError
from .systems import (ChainParams, DoublePendulumParams, WaterParams, chain_initial_state,
                      circular_motion, double_pendulum_cartesian,
                      double_pendulum_generalized_benchmark, double_pendulum_initial_state,
                      pendulum_chain, water_cluster, water_initial_configuration)

SCHEMAS = {
    "simulate": "geomint.trajectory/1",
    "convergence": "geomint.convergence/1",
    "stability-scan": "geomint.stability/1",
    "multiplier-compare": "geomint.multiplier/1",
    "water-rdf": "geomint.rdf/1",
    "scaling": "geomint.scaling/1",
}

DEFAULT_H_GRID = np.concatenate([np.arange(1, 100) * 1e-4, np.arange(10, 100) * 1e-3,
                               np.arange(10, 21) * 1e-2])


class UsageError(Exception):
    pass


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "nan" if math.isnan(x) else repr(float(x))
    return "" if x is None else str(x)


def write_table(path, command, args, columns, rows, extra_meta=None):
    """Write metadata lines plus a CSV table; files are replaced atomically."""
    buf = io.StringIO()
    meta = {"schema": SCHEMAS[command], "version": __version__, "command": command}
    for key, val in sorted(vars(args).items()):
        if key in ("func", "out", "command", "argv"):
            continue
        meta[key] = val
    meta["invocation"] = "geomint " + " ".join(shlex.quote(a) for a in args.argv)
    meta.update(extra_meta or {})
    for key, val in meta.items():
        buf.write(f"# {key}={_fmt(val) if not isinstance(val, str) else val}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    text = buf.getvalue()
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".geomint-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# system assembly
# ---------------------------------------------------------------------------

def _water_params(args):
    overrides = {"N": args.waters}
    if args.params_file:
        return WaterParams.from_file(args.params_file, **overrides)
    return WaterParams.default(**overrides)


def _water_initial(args, params):
    if getattr(args, "initial_file", None):
        q = np.loadtxt(args.initial_file, dtype=float).reshape(-1)
        if q.size != 9 * params.N:
            raise ConfigurationError(f"initial file holds {q.size} numbers, need {9 * params.N}")
        return q
    return water_initial_configuration(params, seed=args.seed)


def build_system(args):
    """(base system, constraints, initial state) for ``args.system``."""
    if args.system == "double-pendulum":
        base, cons = double_pendulum_cartesian(DoublePendulumParams(gravity=args.gravity))
        return base, cons, double_pendulum_initial_state()
    if args.system == "chain":
        base, cons = pendulum_chain(ChainParams(args.n, gravity=args.gravity))
        return base, cons, chain_initial_state(args.n)
    if args.system == "circle":
        base, cons, _ = circular_motion(v0=(0.0, args.speed))
        return base, cons, PhaseState([1.0, 0.0], [0.0, args.speed])
    if args.system == "water":
        params = _water_params(args)
        base, cons = water_cluster(params)
        q0 = _water_initial(args, params)
        return base, cons, PhaseState(q0, np.zeros_like(q0))
    raise UsageError(f"unknown system {args.system!r}")


def _check_integrator_flags(args):
    constrained = args.integrator in CONSTRAINED_INTEGRATORS
    if constrained and args.omega is not None:
        raise UsageError(f"--omega has no meaning for --integrator {args.integrator}")
    gla = args.integrator.startswith("gla")
    if not gla and (args.friction is not None or args.inv_temp is not None):
        raise UsageError("--friction/--inv-temp only apply to gla-* integrators")


def make_stepper(args, base, cons):
    """Integrated system, stepper and config for the simulate-style options."""
    _check_integrator_flags(args)
    constrained = args.integrator in CONSTRAINED_INTEGRATORS
    omega = None if constrained else (20.0 if args.omega is None else args.omega)
    if omega is not None:
        args.omega = omega
    system = base if constrained else build_penalty_system(base, cons, omega)
    stiff = args.integrator == "sylipn-stiff" or getattr(args, "stiff_only", False)
    cfg = IntegratorConfig(h=args.h, beta=args.beta, tol_x=args.tol, tol_f=args.tol,
                           stiff_only_hessian=stiff)
    langevin = None
    if args.integrator.startswith("gla"):
        args.friction = 0.01 if args.friction is None else args.friction
        args.inv_temp = 50.0 if args.inv_temp is None else args.inv_temp
        langevin = LangevinConfig(args.friction, args.inv_temp, seed=args.seed)
    return system, Stepper(args.integrator, system, cfg, cons, langevin), cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    base, cons, initial = build_system(args)
    system, stepper, cfg = make_stepper(args, base, cons)
    traj = run_trajectory(stepper, system, initial, args.t_end, cfg, args.record_stride, cons)
    n = system.dof
    cols = (["t"] + [f"q_{i}" for i in range(n)] + [f"v_{i}" for i in range(n)]
            + ["energy", "g_norm", "solver_iters"])
    rows = (list(np.concatenate([[traj.t[k]], traj.q[k], traj.v[k],
                                 [traj.energy[k], traj.g_norm[k]]])) + [int(traj.solver_iters[k])]
            for k in range(len(traj)))
    write_table(args.out, "simulate", args, cols, rows)
    return 0


def _convergence_reference(args, system, initial):
    if args.reference == "exact":
        if args.system != "circle":
            raise UsageError("the exact reference exists only for --system circle")
        _, _, exact = circular_motion(v0=(0.0, args.speed))
        return exact
    if args.reference == "generalized-coords":
        if args.system != "double-pendulum":
            raise UsageError("generalized coordinates exist only for --system double-pendulum")
        params = DoublePendulumParams(gravity=args.gravity)
        return double_pendulum_generalized_benchmark(params, 0.0, math.pi / 4, args.h_ref,
                                                     args.t_end)
    h_ref = args.h_ref if args.h_ref else 1e-4 / args.omega
    n = int(round(args.t_end / h_ref))
    stride = max(1, int(round(1e-4 / h_ref)))
    n -= n % stride
    return run_trajectory("vv", system, initial, n * h_ref, IntegratorConfig(h=h_ref), stride)


def cmd_convergence(args):
    alpha = args.alpha
    if not 0.0 < alpha < 1.0:
        raise UsageError("--alpha must lie in (0, 1)")
    if args.h_grid:
        grid = np.array([float(x) for x in args.h_grid.split(",")])
    else:
        grid = DEFAULT_H_GRID
    if args.synthetic is not None:
        err = grid ** args.synthetic
        p = local_exponents(err, (alpha * grid) ** args.synthetic, alpha)
        rows = zip(grid, err, p)
        write_table(args.out, "convergence", args, ["h", "error", "p"], rows)
        return 0
    base, cons, initial = build_system(args)
    args.omega = 20.0 if args.omega is None else args.omega
    system = build_penalty_system(base, cons, args.omega)
    reference = _convergence_reference(args, system, initial)
    beta = args.beta
    report = convergence_scan(args.integrator, system, reference, grid, alpha, args.t_end,
                              initial, cfg_factory=lambda h: IntegratorConfig(h=h, beta=beta),
                              jobs=args.jobs)
    rows = zip(report.h, report.error, report.exponent)
    write_table(args.out, "convergence", args, ["h", "error", "p"], rows,
                {"fitted_order": report.order, "fitted_constant": report.constant})
    return 0


def cmd_stability_scan(args):
    betas = [float(x) for x in args.betas.split(",")]
    Ks = [float(x) for x in args.Ks.split(",")]
    hs = [float(x) for x in args.hs.split(",")]
    B, K, H = np.meshgrid(betas, Ks, hs, indexing="ij")
    m1, m2 = linear_stability_spectrum(args.mass, K, B, H)
    bounded = harmonic_sylipn_boundedness(args.mass, K, B, H, args.steps).bounded
    rows = ((K.flat[i], H.flat[i], B.flat[i], max(m1.flat[i], m2.flat[i]), bounded.flat[i])
            for i in range(K.size))
    write_table(args.out, "stability-scan", args,
                ["K", "h", "beta", "max_modulus", "bounded_after_N_steps"], rows)
    return 0


def cmd_multiplier_compare(args):
    if args.omega is None:
        args.omega = 500.0 if args.system == "water" else 20.0
    base, cons, initial = build_system(args)
    cfg_shake = IntegratorConfig(h=args.h, tol_x=args.tol, tol_f=args.tol)
    shake = run_trajectory(Stepper("shake", base, cfg_shake, cons), base, initial,
                           args.t_end + args.window, cfg_shake, 1, cons)
    system = build_penalty_system(base, cons, args.omega)
    cfg = IntegratorConfig(h=args.h, beta=args.beta,
                           stiff_only_hessian=args.system == "water")
    traj = run_trajectory("sylipn", system, initial, args.t_end + args.window, cfg, 1, cons)
    est = equivalent_multiplier(traj, cons, args.omega, args.window, args.spacing,
                                centered=args.centered)
    lam = shake.extras["multiplier"]
    keep = est.t <= args.t_end + 1e-12
    m = cons.m
    cols = (["t"] + [f"lambda_hat_{i}" for i in range(m)]
            + [f"lambda_shake_{i}" for i in range(m)])
    idx = np.searchsorted(shake.t, est.t[keep] - 1e-12)
    rows = (list(np.concatenate([[t], lh, lam[j]]))
            for t, lh, j in zip(est.t[keep], est.value[keep], idx))
    write_table(args.out, "multiplier-compare", args, cols, rows,
                {"window_spacing": est.spacing})
    return 0


def cmd_water_rdf(args):
    params = _water_params(args)
    if params.N < 2:
        raise ConfigurationError("a single molecule has no oxygen-oxygen distances")
    base, cons = water_cluster(params)
    q0 = _water_initial(args, params)
    initial = PhaseState(q0, np.zeros_like(q0))
    langevin = LangevinConfig(args.friction, args.inv_temp, seed=args.seed)
    cfg = IntegratorConfig(h=args.h, beta=args.beta, tol_x=args.tol, tol_f=args.tol,
                           stiff_only_hessian=True)
    names = ["gla-sylipn", "gla-shake"] if args.integrator == "paired" else [args.integrator]
    stride = args.record_stride

    def run(name):
        system = base if name == "gla-shake" else build_penalty_system(base, cons, args.omega)
        stepper = Stepper(name, system, cfg, cons, langevin)
        return run_trajectory(stepper, system, initial, args.t_end, cfg, stride, cons)

    from .analysis import parallel_map
    trajs = parallel_map(run, names, args.jobs)
    if len(trajs) == 2:
        hists = paired_radial_histograms(trajs, params.N, args.t_min, args.bins)
    else:
        hists = [oo_radial_histogram(trajs[0], params.N, args.t_min, args.bins)]
    meta = {"bin_width": hists[0].bin_width}
    for name, h in zip(names, hists):
        meta[f"first_peak_{name}"] = h.first_peak()
    if len(hists) == 2:
        meta["first_peak_delta_bins"] = abs(hists[0].first_peak() - hists[1].first_peak()) \
            / hists[0].bin_width
    cols = ["r"] + [f"mass_{n}" for n in names]
    rows = (list(np.concatenate([[r], [h.mass[k] for h in hists]]))
            for k, r in enumerate(hists[0].centers))
    write_table(args.out, "water-rdf", args, cols, rows, meta)
    return 0


def cmd_scaling(args):
    base, cons, initial = build_system(args)
    grid = [float(x) for x in args.omegas.split(",")]
    rows = constraint_scaling_scan(lambda w: build_penalty_system(base, cons, w), grid,
                                   args.integrator, args.h, args.t_end, initial, args.beta,
                                   jobs=args.jobs)
    write_table(args.out, "scaling", args, ["omega", "omega2_g_norm"], rows)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _default_jobs():
    raw = os.environ.get("GEOMINT_JOBS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _add_system_flags(p, systems=("double-pendulum", "chain", "circle", "water")):
    p.add_argument("--system", choices=systems, default=systems[0])
    p.add_argument("--n", type=int, default=4, help="chain length")
    p.add_argument("--gravity", type=float, default=1.0,
                   help="pendulum potential is gravity * sum(y)")
    p.add_argument("--speed", type=float, default=1.0, help="circle tangential speed")
    p.add_argument("--waters", type=int, default=3, help="water molecule count")
    p.add_argument("--params-file", default=None, help="water key=value parameter file")
    p.add_argument("--initial-file", default=None, help="water initial positions (9N numbers)")


def _add_common(p, h=0.05, t_end=10.0):
    p.add_argument("--h", type=float, default=h)
    p.add_argument("--beta", type=float, default=0.4)
    p.add_argument("--t-end", type=float, default=t_end)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-6, help="Newton tolerance")
    p.add_argument("--out", default="-", help="output CSV path, '-' for stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geomint",
                                     description="Symplectic linearly implicit integration "
                                                 "experiments")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="integrate one trajectory")
    _add_system_flags(p)
    _add_common(p)
    p.add_argument("--integrator", choices=INTEGRATORS, default="sylipn")
    p.add_argument("--omega", type=float, default=None, help="penalty stiffness (default 20)")
    p.add_argument("--record-stride", type=int, default=1)
    p.add_argument("--friction", type=float, default=None)
    p.add_argument("--inv-temp", type=float, default=None)
    p.add_argument("--stiff-only", action="store_true",
                   help="use only the stiff Hessian in the SyLiPN solve")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("convergence", help="error(h) and local exponents")
    _add_system_flags(p, ("double-pendulum", "circle", "chain"))
    _add_common(p, t_end=10.0)
    p.add_argument("--integrator", choices=["sylipn", "sylipn-stiff", "pfn", "newmark",
                                            "newmark-lin", "vv"], default="sylipn")
    p.add_argument("--omega", type=float, default=None)
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--h-grid", default=None, help="comma-separated h values")
    p.add_argument("--reference", choices=["vv-fine", "generalized-coords", "exact"],
                   default="vv-fine")
    p.add_argument("--h-ref", type=float, default=None)
    p.add_argument("--synthetic", type=float, default=None,
                   help="self-test: error(h) = h^p with this p")
    p.add_argument("--jobs", type=int, default=_default_jobs())
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("stability-scan", help="linear stability grid")
    p.add_argument("--mass", type=float, default=1.0)
    p.add_argument("--betas", default="0.2,0.25,0.4,1.0")
    p.add_argument("--Ks", default="0,1,100,1000000")
    p.add_argument("--hs", default="0.1,1,10,100")
    p.add_argument("--steps", type=int, default=100000)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_stability_scan)

    p = sub.add_parser("multiplier-compare", help="windowed penalty multiplier vs SHAKE")
    _add_system_flags(p)
    _add_common(p)
    p.add_argument("--omega", type=float, default=None,
                   help="penalty stiffness (default 20, water 500)")
    p.add_argument("--window", type=float, default=0.2)
    p.add_argument("--spacing", type=float, default=None,
                   help="sample spacing inside the window (default: every step)")
    p.add_argument("--centered", action="store_true",
                   help="average over [t - window/2, t + window/2] instead of [t, t + window]")
    p.set_defaults(func=cmd_multiplier_compare)

    p = sub.add_parser("water-rdf", help="oxygen-oxygen distance histogram")
    p.add_argument("--waters", type=int, default=7)
    p.add_argument("--params-file", default=None)
    p.add_argument("--initial-file", default=None)
    p.add_argument("--integrator", choices=["gla-sylipn", "gla-shake", "paired"],
                   default="paired")
    p.add_argument("--omega", type=float, default=20.0)
    p.add_argument("--friction", type=float, default=0.01)
    p.add_argument("--inv-temp", type=float, default=50.0)
    p.add_argument("--t-min", type=float, default=5000.0)
    p.add_argument("--bins", type=int, default=5000)
    p.add_argument("--record-stride", type=int, default=10)
    p.add_argument("--jobs", type=int, default=_default_jobs())
    _add_common(p, t_end=10000.0)
    p.set_defaults(func=cmd_water_rdf)

    p = sub.add_parser("scaling", help="omega^2 ||g(q(T))|| across omega")
    _add_system_flags(p, ("double-pendulum", "chain", "circle"))
    _add_common(p, h=0.01, t_end=50.0)
    p.add_argument("--integrator", choices=["sylipn", "sylipn-stiff", "pfn", "newmark"],
                   default="sylipn")
    p.add_argument("--omegas", default="10,20,40,80,100")
    p.add_argument("--jobs", type=int, default=_default_jobs())
    p.set_defaults(func=cmd_scaling)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"geomint {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except StepError as exc:
        where = f" at step {exc.step_index}" if exc.step_index is not None else ""
        print(f"geomint {args.command}: numerical failure{where}: {exc}", file=sys.stderr)
        return 1
    except (SolverError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"geomint {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
