"""Command line interface: ``longwave <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .cell import make_medium
from .effective import EffectiveModel, algorithm1, bloch_dispersion_1d
from .errors import ConfigError, NumericalError
from .experiment import _parse_bounds, _parse_times, load_config, report, run
from .wave import (MacroGrid, SimConfig, dispersion_relation, effective_solve, fine_solve,
                   gaussian_initial, write_field)


def _add_domain(p: argparse.ArgumentParser):
    p.add_argument("--bounds", default="-21,21", help="'left,right' per axis, separated by ';'")
    p.add_argument("--points-per-cell", type=int, default=16)
    p.add_argument("--beta", type=float, default=4.0, help="initial value exp(-beta |nu x|^2)")
    p.add_argument("--nu", type=float, default=1.0)
    p.add_argument("--times", default="", help="output times: list or log:<first>:<last>:<count>")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="longwave", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tensors", help="compute an effective model")
    p.add_argument("--medium", required=True, help="coefficient file or builtin:<name>")
    p.add_argument("--alpha", type=int, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--grid", type=int, default=None, help="cell points per axis")
    p.add_argument("--out", required=True)
    p.add_argument("--naive-check", action="store_true", help="also evaluate the direct g formulas")
    p.add_argument("--delta-margin", type=float, default=0.0, help="added to every deltastar")

    p = sub.add_parser("simulate-fine", help="leapfrog run in the periodic medium")
    p.add_argument("--medium", required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--grid", type=int, default=None, help="cell points per axis (grid-sampled media)")
    p.add_argument("--t-end", type=float, required=True)
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--out", required=True, help="field dump of the final state")
    _add_domain(p)

    p = sub.add_parser("simulate-effective", help="exact-in-time effective solution")
    p.add_argument("--model", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--out", required=True)
    _add_domain(p)

    p = sub.add_parser("compare", help="run an experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="copy of the error curves (or cut) CSV")
    p.add_argument("--paper-scale", action="store_true", help="domain (-84,84), T = 1e4, h = eps/16")

    p = sub.add_parser("bloch", help="Bloch dispersion of a 1D medium")
    p.add_argument("--medium", required=True)
    p.add_argument("--k", default="log:0.01:0.1:5")
    p.add_argument("--modes", type=int, default=64)
    p.add_argument("--model", default=None, help="also print the model dispersion")

    p = sub.add_parser("report", help="summarize a run")
    p.add_argument("--manifest", required=True, help="manifest.json or run directory")
    return ap


def _grid(args, epsilon: float) -> MacroGrid:
    return MacroGrid.with_cell_resolution(_parse_bounds(args.bounds), epsilon, args.points_per_cell)


def _cmd_tensors(args):
    a = make_medium(args.medium, args.grid)
    model = algorithm1(a, args.alpha, args.epsilon, naive_check=args.naive_check,
                       delta_margin=args.delta_margin)
    model.save(args.out)
    print(f"a0 = {' '.join(f'{v:.12g}' for v in model.a0.values)}")
    for st in model.stages:
        print(f"stage {st.r}: deltastar = {st.deltastar:.6e}")
    print(f"cell problems solved: {model.info.get('cell_solves')}")
    for k, v in model.info.items():
        if k.startswith("naive_gap"):
            print(f"{k} = {v}")


def _cmd_fine(args):
    a = make_medium(args.medium, args.grid)
    grid = _grid(args, args.epsilon)
    g0 = gaussian_initial(grid, args.beta, args.nu)
    times = _parse_times(args.times) or (args.t_end,)
    res = fine_solve(grid, a, g0, np.zeros_like(g0), SimConfig(args.t_end, args.dt, times))
    final = res.states[-1]
    write_field(args.out, grid, final.t, final.u)
    stem = Path(args.out)
    for st in res.states[:-1]:
        write_field(stem.with_name(f"{stem.stem}_t{st.t:.6g}{stem.suffix}"), grid, st.t, st.u)
    print(f"{res.steps} steps of {res.dt:.6g}, energy drift {res.energy_drift:.3e}")


def _cmd_effective(args):
    model = EffectiveModel.load(args.model)
    grid = _grid(args, model.epsilon)
    g0 = gaussian_initial(grid, args.beta, args.nu)
    times = _parse_times(args.times) or (args.t,)
    states = effective_solve(grid, model, g0, np.zeros_like(g0), times)
    stem = Path(args.out)
    for st in states:
        path = args.out if st.t == times[-1] else stem.with_name(f"{stem.stem}_t{st.t:.6g}{stem.suffix}")
        write_field(path, grid, st.t, st.u)
    print(f"wrote {len(states)} field(s), model with {model.s} stage(s)")


def _cmd_compare(args):
    cfg = load_config(args.config, paper_scale=args.paper_scale)
    res = run(cfg)
    out_dir = Path(cfg.output_dir)
    src = out_dir / ("cut.csv" if cfg.kind == "highfreq" else "curves.csv")
    if args.out:
        Path(args.out).write_bytes(src.read_bytes())
    for k, v in sorted(res.manifest.get("final_errors", {}).items()):
        print(f"{k} = {v:.4e}")


def _cmd_bloch(args):
    a = make_medium(args.medium, args.modes)
    ks = _parse_times(args.k)
    # Bloch wave numbers are cell-scale, i.e. eps = 1
    model = EffectiveModel.load(args.model).with_epsilon(1.0) if args.model else None
    print("k omega2_bloch" + (" omega2_model" if model else ""))
    for k in ks:
        w2 = bloch_dispersion_1d(a, k, args.modes)
        line = f"{k:.6g} {w2:.17g}"
        if model:
            _, _, om = dispersion_relation(model, np.array([k]))
            line += f" {float(om) ** 2:.17g}"
        print(line)


def _cmd_report(args):
    print(report(args.manifest))


COMMANDS = {"tensors": _cmd_tensors, "simulate-fine": _cmd_fine, "simulate-effective": _cmd_effective,
            "compare": _cmd_compare, "bloch": _cmd_bloch, "report": _cmd_report}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"longwave: configuration error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"longwave: numerical failure: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
