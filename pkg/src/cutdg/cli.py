"""Command-line interface: single solves, grid/degree sweeps,
matrix-operation micro-benchmarks, and MatrixMarket export.

Configuration comes from optional ``key=value`` files (one pair per
line, ``#`` comments) with command-line flags taking precedence.  Exit
codes: 0 success, 1 usage error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields as dataclass_fields
from typing import Optional, Sequence

from .bench import (
    MATOPS_CSV_HEADER,
    SOLVER_IDS,
    SWEEP_CSV_HEADER,
    BenchCase,
    export_case_matrix,
    format_rows,
    micro_bench_matops,
    run_case,
    run_sweep,
    write_matops_csv,
)
from .errors import CutDgError, InvalidConfigError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse reports usage problems with exit code 2; this project
    reserves 2 for numerical failures, so usage errors raise instead."""

    def error(self, message):
        raise _UsageError(message)


def parse_levelset(text: str) -> tuple[str, dict]:
    """``name`` or ``name:key=value,key=value``; vector values use
    semicolons, e.g. ``sphere:radius=0.7,center=0;0;0``."""
    name, _, rest = text.partition(":")
    params = {}
    if rest:
        for pair in rest.split(","):
            key, sep, value = pair.partition("=")
            if not sep:
                raise _UsageError(
                    f"level-set parameter {pair!r} is not key=value"
                )
            if ";" in value:
                params[key.strip()] = tuple(
                    float(v) for v in value.split(";")
                )
            else:
                params[key.strip()] = float(value)
    return name.strip(), params


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise _UsageError(f"expected comma-separated integers: {text!r}") from exc


def _solver_list(text: str) -> list:
    solvers = [v.strip() for v in text.split(",") if v.strip()]
    for s in solvers:
        if s not in SOLVER_IDS:
            raise _UsageError(
                f"unknown solver {s!r}; choose from {', '.join(SOLVER_IDS)}"
            )
    return solvers


_CASE_FLAGS = {
    # flag/config key -> (BenchCase field, converter)
    "dim": ("dim", int),
    "cells": ("cells", int),
    "degree": ("degree", int),
    "mu-a": ("mu_a", float),
    "mu-b": ("mu_b", float),
    "alpha": ("alpha", float),
    "levelset": ("levelset", str),
    "solver": ("solver", str),
    "tol": ("tolerance", float),
    "klo": ("k_lo", int),
    "levels": ("num_levels", int),
    "max-iter": ("max_iterations", int),
    "schwarz-target": ("schwarz_target_dofs", int),
    "gmres-restart": ("gmres_restart", int),
    "rm-cap": ("rm_max_columns", int),
    "coarse-iters": ("coarse_cycle_iterations", int),
    "quad-depth": ("quad_depth", int),
    "gauss-order": ("gauss_order", int),
    "out": ("out", str),
}


def _add_case_flags(parser: _Parser) -> None:
    for flag, (fieldname, conv) in _CASE_FLAGS.items():
        if flag in ("cells", "degree", "solver"):
            continue  # added per-subcommand (sweep takes lists)
        parser.add_argument(f"--{flag}", dest=fieldname, type=conv,
                            default=None)
    parser.add_argument("--config", default=None,
                        help="key=value file; flags override it")


def read_config_file(path: str) -> dict:
    values = {}
    try:
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    raise _UsageError(
                        f"{path}:{lineno}: expected key=value, got {raw!r}"
                    )
                values[key.strip()] = value.strip()
    except OSError as exc:
        raise _UsageError(f"cannot read config file {path}: {exc}") from exc
    return values


_FIELD_TYPES = {f.name: f for f in dataclass_fields(BenchCase)}


def build_case(args: argparse.Namespace) -> BenchCase:
    """BenchCase from defaults, then config file, then explicit flags."""
    kwargs = {}
    if getattr(args, "config", None):
        raw = read_config_file(args.config)
        for key, value in raw.items():
            flag = key.replace("_", "-")
            if flag not in _CASE_FLAGS:
                raise _UsageError(f"unknown config key {key!r}")
            fieldname, conv = _CASE_FLAGS[flag]
            if fieldname == "levelset":
                name, params = parse_levelset(value)
                kwargs["levelset"] = name
                kwargs["levelset_params"] = params
            else:
                try:
                    kwargs[fieldname] = conv(value)
                except ValueError as exc:
                    raise _UsageError(
                        f"config key {key!r}: bad value {value!r}"
                    ) from exc
    for fieldname, _ in _CASE_FLAGS.values():
        value = getattr(args, fieldname, None)
        if value is None:
            continue
        if fieldname == "levelset":
            name, params = parse_levelset(value)
            kwargs["levelset"] = name
            kwargs["levelset_params"] = params
        else:
            kwargs[fieldname] = value
    try:
        return BenchCase(**kwargs)
    except InvalidConfigError as exc:
        raise _UsageError(str(exc)) from exc


def make_parser() -> _Parser:
    parser = _Parser(
        prog="cutdg",
        description=(
            "Cut-cell interior-penalty solver benchmarks for the "
            "jump-coefficient Poisson problem"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="build and solve one case")
    _add_case_flags(p_solve)
    p_solve.add_argument("--cells", dest="cells", type=int, default=None)
    p_solve.add_argument("--degree", dest="degree", type=int, default=None)
    p_solve.add_argument("--solver", dest="solver", type=str, default=None)
    p_solve.add_argument(
        "--history-out", default=None,
        help="write the residual history CSV here",
    )

    p_sweep = sub.add_parser(
        "sweep", help="grid x degree x solver sweep, one CSV row each"
    )
    _add_case_flags(p_sweep)
    p_sweep.add_argument("--cells", dest="cells_list", type=_int_list,
                         default=None, help="comma-separated, e.g. 2,4,8")
    p_sweep.add_argument("--degree", dest="degree_list", type=_int_list,
                         default=None, help="comma-separated, e.g. 2,3")
    p_sweep.add_argument("--solver", dest="solver_list", type=_solver_list,
                         default=None, help="comma-separated solver ids")

    p_mat = sub.add_parser(
        "bench-matops",
        help="micro-benchmark matrix-vector and aggregation products",
    )
    _add_case_flags(p_mat)
    p_mat.add_argument("--cells", dest="cells", type=int, default=None)
    p_mat.add_argument("--degree", dest="degree", type=int, default=None)
    p_mat.add_argument("--solver", dest="solver", type=str, default=None)
    p_mat.add_argument("--reps", type=int, default=20)

    p_exp = sub.add_parser(
        "export-matrix",
        help="assemble a case and write its first-level matrix "
        "(MatrixMarket coordinate format)",
    )
    _add_case_flags(p_exp)
    p_exp.add_argument("--cells", dest="cells", type=int, default=None)
    p_exp.add_argument("--degree", dest="degree", type=int, default=None)
    p_exp.add_argument("--solver", dest="solver", type=str, default=None)

    return parser


def cmd_solve(args) -> int:
    case = build_case(args)
    result = run_case(case)
    rep = result.report
    print(
        f"solver={rep.solver} grid={case.cells}^{case.dim} k={case.degree} "
        f"dofs={result.dofs_raw} (agglomerated {result.dofs_agglomerated})"
    )
    print(
        f"iterations={rep.iterations} converged={rep.converged} "
        f"final_residual={rep.final_residual:.6e}"
    )
    print(
        f"basis_setup={rep.time_basis_setup * 1e3:.1f}ms "
        f"matmat_setup={rep.time_matmat_setup * 1e3:.1f}ms "
        f"solve={rep.time_iterations * 1e3:.1f}ms"
    )
    rep.dofs = result.dofs_raw
    if case.out:
        rep.write_csv(case.out)
        print(f"report written to {case.out}")
    if args.history_out:
        rep.write_history_csv(args.history_out)
        print(f"residual history written to {args.history_out}")
    return EXIT_OK if rep.converged else EXIT_NUMERICAL


def cmd_sweep(args) -> int:
    if args.cells_list is None or args.degree_list is None:
        raise _UsageError("sweep requires --cells and --degree lists")
    solvers = args.solver_list or ["omg"]
    base = build_case(args)
    rows = run_sweep(
        args.cells_list, args.degree_list, solvers,
        base_case=base, out=base.out,
    )
    text = format_rows(SWEEP_CSV_HEADER, rows)
    sys.stdout.write(text)
    if base.out:
        print(f"sweep written to {base.out}", file=sys.stderr)
    failed = any(str(r[5]) == "False" for r in rows)
    return EXIT_NUMERICAL if failed else EXIT_OK


def cmd_bench_matops(args) -> int:
    case = build_case(args)
    rows = micro_bench_matops(case, repetitions=args.reps)
    sys.stdout.write(format_rows(MATOPS_CSV_HEADER, rows))
    if case.out:
        write_matops_csv(rows, case.out)
        print(f"timings written to {case.out}", file=sys.stderr)
    return EXIT_OK


def cmd_export_matrix(args) -> int:
    case = build_case(args)
    if not case.out:
        raise _UsageError("export-matrix requires --out")
    n = export_case_matrix(case, case.out)
    print(f"wrote {n}x{n} matrix to {case.out}")
    return EXIT_OK


_COMMANDS = {
    "solve": cmd_solve,
    "sweep": cmd_sweep,
    "bench-matops": cmd_bench_matops,
    "export-matrix": cmd_export_matrix,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CutDgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
