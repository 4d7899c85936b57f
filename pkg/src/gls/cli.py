"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 I/O or parse error, 3 solver failure.
Results go to standard output, diagnostics to standard error.
"""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

import numpy as np

from .imaging import (NetpbmError, TvMode, denoise, denoise_multichannel, poisson_blend,
                      read_image, write_image)
from .instance import (InstanceFormatError, Solution, parse_instance, random_instance,
                       serialize_instance, tv_chain_instance, write_trace)
from .ipm import IpmConfig, solve_ipm
from .linalg import InconsistentSystemError, SingularMatrixError
from .modeling import (GraphFormatError, PointsFormatError, cluster, mincut_encoding,
                       parse_graph, parse_points, shortest_path_instance)
from .mw import MwConfig, solve_mw

EXIT_USAGE, EXIT_IO, EXIT_SOLVER = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _offset(text: str) -> tuple[int, int]:
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y, got {text!r}") from None
    return x, y


def _add_solver_flags(p, default_eps: bool = True):
    p.add_argument("--solver", choices=("mw", "ipm"), default="mw")
    p.add_argument("--eps", type=float, default=None,
                   help="mw accuracy (default 0.1) or ipm additive gap (default 1e-6)")
    p.add_argument("--strict", action="store_true", help="mw: theoretical width and iteration count")
    p.add_argument("--trace", metavar="FILE", help="write the solver trace table to FILE")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gls", description="Grouped least squares solvers.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="solve an instance file")
    p.add_argument("instance")
    _add_solver_flags(p)
    p.add_argument("--out", metavar="FILE", help="write x here (one value per line) instead of stdout")

    p = sub.add_parser("denoise", help="TV-denoise a PGM/PPM image")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--mode", choices=("iso", "aniso"), default="iso")
    p.add_argument("--sqrt-fidelity", action="store_true",
                   help="use ||x - s|| instead of ||x - s||^2 as fidelity")
    _add_solver_flags(p)

    p = sub.add_parser("blend", help="Poisson blending")
    for name in ("src", "dst", "mask", "output"):
        p.add_argument(name)
    p.add_argument("--offset", type=_offset, default=(0, 0), help="X,Y placement of src in dst")

    for name, helptext in (("shortest-path", "s-t distance"), ("mincut", "minimum s-t cut")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("graph")
        p.add_argument("--s", type=int, required=True)
        p.add_argument("--t", type=int, required=True)
        _add_solver_flags(p)

    p = sub.add_parser("cluster", help="convex clustering of a points file")
    p.add_argument("points")
    p.add_argument("--lambda", dest="lam", type=float, required=True)

    p = sub.add_parser("gen", help="emit a deterministic instance file")
    p.add_argument("--kind", choices=("tv", "random"), default="random")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", metavar="FILE")
    return parser


def _read_text(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _run_solver(inst, args) -> Solution:
    if args.solver == "ipm":
        return solve_ipm(inst, IpmConfig(eps=args.eps if args.eps is not None else 1e-6))
    cfg = MwConfig(eps=args.eps if args.eps is not None else 0.1, strict_mode=args.strict)
    return solve_mw(inst, cfg)


def _maybe_trace(sol: Solution, path: str | None) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            write_trace(sol, fh)


def _rounded(value: float, integral: bool) -> str:
    if integral:
        return f"{int(round(value))} (raw {value!r})"
    return repr(value)


def cmd_solve(args, out) -> None:
    inst = parse_instance(_read_text(args.instance))
    sol = _run_solver(inst, args)
    _maybe_trace(sol, args.trace)
    print(f"objective {sol.objective!r}", file=out)
    lines = "\n".join(repr(float(v)) for v in sol.x)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(lines + "\n")
    else:
        print(lines, file=out)


def cmd_denoise(args, out) -> None:
    img = read_image(args.input)
    run = denoise if img.channels == 1 else denoise_multichannel
    res = run(img, TvMode.parse(args.mode), args.lam, solver=args.solver, eps=args.eps,
              sqrt_fidelity=args.sqrt_fidelity)
    write_image(args.output, res.image, "P5" if img.channels == 1 else "P6")
    if args.trace and res.solutions:
        _maybe_trace(res.solutions[-1], args.trace)
    print(f"objective {res.objective!r}", file=out)


def cmd_blend(args, out) -> None:
    src, dst, mask = (read_image(p) for p in (args.src, args.dst, args.mask))
    res = poisson_blend(src, dst, mask, args.offset)
    write_image(args.output, res, "P5" if res.channels == 1 else "P6")


def cmd_shortest_path(args, out) -> None:
    g = parse_graph(_read_text(args.graph))
    inst, decode = shortest_path_instance(g, args.s, args.t)
    sol = _run_solver(inst, args)
    _maybe_trace(sol, args.trace)
    print(f"distance {_rounded(decode(sol.x), g.integral)}", file=out)


def cmd_mincut(args, out) -> None:
    g = parse_graph(_read_text(args.graph))
    enc = mincut_encoding(g, args.s, args.t)
    x = np.zeros(0)
    if enc.instance is not None:
        sol = _run_solver(enc.instance, args)
        _maybe_trace(sol, args.trace)
        x = sol.x
        frac = sol.objective + enc.offset
    else:
        frac = enc.offset
    value, side = enc.decode(x)
    print(f"cut {_rounded(value, g.integral)}", file=out)
    print(f"relaxation {frac!r}", file=out)
    print("partition " + " ".join(map(str, side)), file=out)


def cmd_cluster(args, out) -> None:
    ps = parse_points(_read_text(args.points))
    centers = cluster(ps, args.lam)
    for row in centers:
        print(" ".join(repr(float(v)) for v in row), file=out)


def cmd_gen(args, out) -> None:
    rng = np.random.default_rng(args.seed)
    if args.kind == "random":
        inst = random_instance(args.n, args.k, rng)
    else:
        inst = tv_chain_instance(args.n, args.k, rng)
    text = serialize_instance(inst)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        out.write(text)


_COMMANDS = {
    "solve": cmd_solve, "denoise": cmd_denoise, "blend": cmd_blend,
    "shortest-path": cmd_shortest_path, "mincut": cmd_mincut, "cluster": cmd_cluster,
    "gen": cmd_gen,
}

_IO_ERRORS = (OSError, InstanceFormatError, GraphFormatError, PointsFormatError,
              NetpbmError)
_SOLVER_ERRORS = (InconsistentSystemError, SingularMatrixError, np.linalg.LinAlgError,
                  ArithmeticError, RuntimeError)


def run(argv: Sequence[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=err)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        _COMMANDS[args.command](args, out)
    except _IO_ERRORS as exc:
        print(f"gls: {exc}", file=err)
        return EXIT_IO
    except _SOLVER_ERRORS as exc:
        print(f"gls: solver failed: {exc}", file=err)
        return EXIT_SOLVER
    except ValueError as exc:
        # bad argument values that only show up once inputs are read
        print(f"gls: {exc}", file=err)
        return EXIT_USAGE
    return 0


def main() -> None:
    sys.exit(run())
