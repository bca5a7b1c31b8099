"""Command line front end: run a scenario, or drive a measurement harness.

Exit codes: 0 on success, 2 for configuration problems (including bad
command lines, which argparse also reports as 2), 3 when a solve fails
mid-run.
"""

import argparse
import sys

from . import app
from .dynamics import StepError
from .mobility import ConvergenceError


def _parse_int_list(text, option):
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise app.ConfigError("%s expects comma-separated integers, got %r"
                              % (option, text)) from None
    if not values:
        raise app.ConfigError("%s expects at least one value" % option)
    return values


def _cmd_run(args):
    summary = app.run_scenario(args.config, out_dir=args.out,
                               dump_surfaces=args.dump_surfaces,
                               profile=args.profile)
    iters = summary["iterations"]
    print("ran %d steps to t=%.6g for %d bodies"
          % (summary["steps"], summary["t_final"], summary["bodies"]))
    print("trajectory written to %s" % summary["trajectory"])
    if iters:
        print("solver iterations per step: min %d, max %d"
              % (min(iters), max(iters)))
    if "profile" in summary:
        print(app.format_profile(summary["profile"], summary["steps"]),
              end="")
    return 0


def _cmd_converge(args):
    result = app.convergence_harness(args.kind, scheme=args.scheme,
                                     shape=args.shape, out_path=args.out)
    rows = result["rows"]
    if args.kind == "temporal":
        print("scheme %s, p=8, one swimmer cycle; each row vs halved dt"
              % result["scheme"])
        print("%8s %12s %8s %8s" % ("steps", "dt", "E_C", "E_R"))
        for row in rows:
            print("%8d %12.6g %8.2f %8.2f"
                  % (row["steps"], row["dt"], row["E_C"], row["E_R"]))
    else:
        print("scheme %s, dt=2*pi/128, one swimmer cycle; each row vs "
              "doubled p" % result["scheme"])
        print("%8s %8s %8s" % ("p", "E_C", "E_R"))
        for row in rows:
            print("%8d %8.2f %8.2f" % (row["p"], row["E_C"], row["E_R"]))
    if result["increments"]:
        print("E_C increments: %s"
              % ", ".join("%.2f" % inc for inc in result["increments"]))
    if args.out:
        print("table written to %s" % args.out)
    return 0


def _cmd_scale(args):
    rows = app.scaling_harness(_parse_int_list(args.n, "--n"),
                               _parse_int_list(args.p, "--p"),
                               steps=args.steps, out_path=args.out)
    print("%4s %6s %8s %12s %12s %12s %12s %6s"
          % ("p", "n", "N", "apply", "solve", "update", "inter", "iters"))
    for row in rows:
        print("%4d %6d %8d %12.4g %12.4g %12.4g %12.4g %6d"
              % (row["p"], row["n"], row["N"], row["apply"], row["solve"],
                 row["update"], row["inter_apply"], row["iters"]))
    if args.out:
        print("table written to %s" % args.out)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stokesmob",
        description="Rigid-body Stokes mobility simulations on "
                    "spherical-harmonic surfaces.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="evolve a scenario from a JSON config")
    run.add_argument("config", help="path to the scenario JSON document")
    run.add_argument("--out", default=".", help="output directory")
    run.add_argument("--dump-surfaces", action="store_true",
                     help="write a legacy-VTK surface frame per step")
    run.add_argument("--profile", action="store_true",
                     help="write profile.txt with per-stage timings")
    run.set_defaults(func=_cmd_run)

    conv = sub.add_parser("converge",
                          help="swimmer self-convergence tables")
    conv.add_argument("--kind", required=True,
                      choices=("spatial", "temporal"))
    conv.add_argument("--scheme", choices=("euler", "heun", "rk4"),
                      default=None,
                      help="default: rk4 for temporal, euler for spatial")
    conv.add_argument("--shape", default="sphere",
                      help="sphere or ellipsoid-a, e.g. ellipsoid-0.5")
    conv.add_argument("--out", default=None, help="also write a CSV table")
    conv.set_defaults(func=_cmd_converge)

    scale = sub.add_parser("scale",
                           help="lattice sedimentation timing tables")
    scale.add_argument("--n", default="8,16",
                       help="comma-separated body counts (multiples of 4)")
    scale.add_argument("--p", default="8",
                       help="comma-separated spherical harmonic orders")
    scale.add_argument("--steps", type=int, default=2,
                       help="timesteps to average over")
    scale.add_argument("--out", default=None, help="also write a CSV table")
    scale.set_defaults(func=_cmd_scale)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except app.ConfigError as err:
        print("config error: %s" % err, file=sys.stderr)
        return 2
    except ValueError as err:
        print("config error: %s" % err, file=sys.stderr)
        return 2
    except (app.SimulationError, StepError, ConvergenceError) as err:
        print("solver failure: %s" % err, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
