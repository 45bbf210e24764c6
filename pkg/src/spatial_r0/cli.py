"""Command-line front end.

Exit codes: 0 success, 1 validation failure (bad arguments, model file
errors, failed assumption checks), 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from typing import Optional, Sequence

import numpy as np
import yaml

from . import expr as ex
from .dfe import DfeError, UnsupportedLimitError, dfe_large_limit, dfe_small_limit, solve_dfe
from .grid import Grid
from .limits import (
    LimitError,
    LimitReport,
    averaged_limit,
    envelope_bounds,
    envelopes,
    local_R0_profile,
    normalize_diffusion,
    sweep,
)
from .model import CompartmentModel, check_assumptions
from .modelfile import ModelFileError, load_model_file
from .models import BUILTINS, BuiltinModel, builtin
from .r0 import CooperativityError, PreconditionError, assemble, compute_R0, sign_check
from .sim import SimulationError, dfe_stability_test
from .spectral import SingularOperatorError, SpectralError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2
NUMERICAL_ERRORS = (DfeError, SpectralError, SingularOperatorError, PreconditionError, CooperativityError,
                    SimulationError, LimitError, ex.EvaluationError)
SWEEP_COLUMNS = ("R0", "s_BF", "abs_err_small", "abs_err_large", "env_low", "env_high", "env_ref", "status")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _fmt(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, float) or isinstance(v, np.floating):
        return "%.12e" % v
    return str(v)


def _clean(obj):
    """JSON-safe copy: NaN/inf become strings, numpy scalars become floats."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# ---------------------------------------------------------------- loading


def _parse_sets(items: Sequence[str]) -> dict[str, object]:
    out: dict[str, object] = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects name=value, got {item!r}")
        k, v = item.split("=", 1)
        val = yaml.safe_load(v)
        out[k.strip()] = val if isinstance(val, (int, float, list)) and not isinstance(val, bool) else v
    return out


def load_model(source: str, sets: Sequence[str] = ()) -> tuple[CompartmentModel, Optional[BuiltinModel]]:
    if source.startswith("builtin:"):
        try:
            bm = builtin(source.split(":", 1)[1], _parse_sets(sets))
        except (KeyError, TypeError) as err:
            raise UsageError(str(err).strip("'\"")) from None
        except ValueError as err:
            raise UsageError(str(err)) from None
        return bm.model, bm
    if sets:
        raise UsageError("--set only applies to built-in models")
    return load_model_file(source), None


def _parse_tuple(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"invalid diffusion value {text!r}") from None
    if not all(math.isfinite(v) and v > 0 for v in vals):
        raise UsageError(f"diffusion rates must be positive, got {text!r}")
    return vals


def parse_schedule(text: Optional[str]) -> list[tuple[float, ...]]:
    """Comma-separated diffusion values; ``a:b:c`` gives one value per
    compartment, and ``log:lo:hi:k`` expands to k logarithmic points."""
    if text is None or not text.strip():
        return []
    out: list[tuple[float, ...]] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            raise UsageError("empty entry in diffusion schedule")
        if part.startswith("log:"):
            bits = part.split(":")
            if len(bits) != 4:
                raise UsageError("log schedule is log:lo:hi:count")
            try:
                lo, hi, k = float(bits[1]), float(bits[2]), int(bits[3])
            except ValueError:
                raise UsageError(f"invalid log schedule {part!r}") from None
            if not (lo > 0 and hi > 0 and k >= 1):
                raise UsageError(f"invalid log schedule {part!r}")
            out.extend((float(v),) for v in np.logspace(np.log10(lo), np.log10(hi), k))
        else:
            out.append(_parse_tuple(part))
    return out


def _with_d(model: CompartmentModel, d: Optional[str]) -> CompartmentModel:
    sched = parse_schedule(d)
    if len(sched) > 1:
        raise UsageError("--d takes a single diffusion tuple here")
    if sched:
        return model.with_diffusion(normalize_diffusion(model, sched[0]))
    if any(v is None for v in model.diffusion):
        return model.with_diffusion(normalize_diffusion(model, 1.0))
    return model


def _grid(model: CompartmentModel, n: int) -> Grid:
    if n < 3:
        raise UsageError(f"--grid-n must be at least 3, got {n}")
    return Grid(model.domain[0], model.domain[1], n)


# --------------------------------------------------------------- commands


def cmd_check(args, out) -> int:
    model, _ = load_model(args.model, args.set)
    model = _with_d(model, args.d)
    grid = _grid(model, args.grid_n)
    result: dict = {"model": model.name, "grid_n": grid.N}
    try:
        dfe = solve_dfe(model, grid, tol=args.tol)
    except DfeError as err:
        result.update(ok=False, dfe={"solved": False, "error": str(err)})
        _emit(args, out, result, lambda: [f"model {model.name}: DFE solve FAILED: {err}"])
        return EXIT_VALIDATION
    rep = check_assumptions(model, dfe, seed=args.seed)
    result["dfe"] = {"solved": True, "residual": dfe.residual, "relative_residual": dfe.relative_residual,
                     "iterations": dfe.iterations, "method": dfe.method,
                     "min": float(dfe.fields.min()), "max": float(dfe.fields.max())}
    result.update(rep.to_dict())

    def table():
        lines = [f"model {model.name} on [{model.domain[0]:g}, {model.domain[1]:g}], N={grid.N}",
                 f"DFE: solved by {dfe.method} in {dfe.iterations} iterations, relative residual "
                 f"{dfe.relative_residual:.3e}, range [{dfe.fields.min():.6g}, {dfe.fields.max():.6g}]"]
        for c in rep.checks:
            flag = "PASS" if c.passed else "FAIL"
            extra = f"  worst {c.worst:.3g} at {c.where}" if (not c.passed and c.where) else ""
            lines.append(f"  {flag}  {c.key:<12} {c.description}{extra}")
        lines += [f"  note: {n}" for n in rep.notes]
        lines.append("all checks passed" if rep.ok else f"{len(rep.failures())} check(s) failed")
        return lines

    _emit(args, out, result, table)
    return EXIT_OK if rep.ok else EXIT_VALIDATION


def cmd_r0(args, out) -> int:
    model, bm = load_model(args.model, args.set)
    model = _with_d(model, args.d)
    grid = _grid(model, args.grid_n)
    dfe = solve_dfe(model, grid)
    op = assemble(model, grid, dfe)
    R0 = compute_R0(model, grid, dfe, tol=args.tol, op=op)
    sc = sign_check(model, grid, dfe, tol=args.tol, op=op, R0=R0)
    result = {
        "model": model.name, "grid_n": grid.N, "diffusion": list(model.diffusion),
        "R0": R0.value, "R0_iterations": R0.iterations, "R0_residual": R0.residual,
        "s_BF": sc.s_BF, "s_BF_iterations": sc.s_result.iterations, "s_BF_residual": sc.s_result.residual,
        "sign": sc.status, "dfe_relative_residual": dfe.relative_residual, "dfe_iterations": dfe.iterations,
    }
    if bm is not None:
        result["oracle_small"] = bm.small_oracle(grid)
        result["oracle_large"] = bm.large_oracle(grid)

    def table():
        lines = [f"model {model.name}, N={grid.N}, d=({', '.join('%g' % d for d in model.diffusion)})",
                 f"R0       = {R0.value:.12g}  ({R0.iterations} iterations, residual {R0.residual:.3e})",
                 f"s(B+F)   = {sc.s_BF:.12g}  ({sc.s_result.iterations} iterations, residual {sc.s_result.residual:.3e})",
                 f"sign     : {sc.status}",
                 f"DFE      : relative residual {dfe.relative_residual:.3e}, {dfe.iterations} Newton iterations"]
        if bm is not None:
            lines.append(f"oracles  : small-diffusion {result['oracle_small']:.12g}, "
                         f"large-diffusion {result['oracle_large']:.12g}")
        return lines

    _emit(args, out, result, table)
    return EXIT_OK


def format_sweep(model: CompartmentModel, report: LimitReport) -> str:
    header = [f"d_{nm}" for nm in model.names] + list(SWEEP_COLUMNS)
    lines = ["\t".join(header)]
    for p in report.points:
        row = [_fmt(d) for d in p.diffusion]
        row += [_fmt(p.R0), _fmt(p.s_BF), _fmt(report.abs_err_small(p)), _fmt(report.abs_err_large(p)),
                _fmt(p.env_low), _fmt(p.env_high), p.env_ref or "-", p.status if p.ok else "error"]
        lines.append("\t".join(row))
    lines.append("# summary")
    lines.append(f"# model\t{report.model}")
    lines.append(f"# grid_n\t{report.grid_n}")
    lines.append(f"# eps_fraction\t{_fmt(report.eps)}")
    lines.append(f"# small_limit\t{_fmt(report.small_limit)}")
    lines.append(f"# small_argmax_x\t{_fmt(report.small_argmax)}")
    lines.append(f"# large_limit\t{_fmt(report.large_limit)}")
    lines.append(f"# large_hypothesis\t{report.large_hypothesis or '-'}")
    if report.oracle_small is not None:
        lines.append(f"# oracle_small\t{_fmt(report.oracle_small)}")
        lines.append(f"# oracle_large\t{_fmt(report.oracle_large)}")
    signs = [p.sign for p in report.points if p.ok]
    lines.append(f"# sign_disagreements\t{sum(s == 'DISAGREE' for s in signs)}")
    lines.append(f"# outside_envelope\t{sum(1 for p in report.points if p.ok and math.isfinite(p.env_low) and not p.bracketed)}")
    for p in report.points:
        if not p.ok:
            lines.append(f"# error\t{','.join(_fmt(d) for d in p.diffusion)}\t{p.error}")
    for n in report.notes:
        lines.append(f"# note\t{n}")
    return "\n".join(lines) + "\n"


def cmd_sweep(args, out) -> int:
    model, bm = load_model(args.model, args.set)
    schedule = parse_schedule(args.d)
    if not schedule:
        raise UsageError("sweep needs a non-empty diffusion schedule (--d)")
    try:
        schedule = [normalize_diffusion(model, d) for d in schedule]
    except ValueError as err:
        raise UsageError(str(err)) from None
    grid = _grid(model, args.grid_n)
    frac = 0.05 if args.eps is None else args.eps
    if not 0 <= frac < 1:
        raise UsageError("--eps is a fraction of the smallest reference value, in [0, 1)")
    oracles = (bm.small_oracle(grid), bm.large_oracle(grid)) if bm is not None else None
    report = sweep(model, grid, schedule, tol=args.tol, eps_fraction=frac, jobs=args.jobs, oracles=oracles)
    if args.format == "json":
        text = json.dumps(_clean(_sweep_dict(model, report)), indent=2, sort_keys=True) + "\n"
    else:
        text = format_sweep(model, report)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        out.write(text)
    return EXIT_OK if all(p.ok for p in report.points) else EXIT_NUMERICAL


def _sweep_dict(model, report: LimitReport) -> dict:
    return {
        "model": report.model, "grid_n": report.grid_n, "eps_fraction": report.eps,
        "compartments": list(model.names),
        "points": [{
            "diffusion": list(p.diffusion), "R0": p.R0, "s_BF": p.s_BF,
            "abs_err_small": report.abs_err_small(p), "abs_err_large": report.abs_err_large(p),
            "env_low": p.env_low, "env_high": p.env_high, "env_ref": p.env_ref, "sign": p.sign,
            "status": "ok" if p.ok else "error", "error": p.error,
        } for p in report.points],
        "small_limit": report.small_limit, "small_argmax_x": report.small_argmax,
        "large_limit": report.large_limit, "large_hypothesis": report.large_hypothesis,
        "oracle_small": report.oracle_small, "oracle_large": report.oracle_large, "notes": report.notes,
    }


def cmd_limits(args, out) -> int:
    model, bm = load_model(args.model, args.set)
    grid = _grid(model, args.grid_n)
    frac = 0.05 if args.eps is None else args.eps
    result: dict = {"model": model.name, "grid_n": grid.N, "eps_fraction": frac}
    prof = local_R0_profile(model, grid)
    result["small_limit"] = prof.max
    result["small_argmax_x"] = prof.x_max
    avg = averaged_limit(model, grid)
    result["large_limit"] = avg.value
    result["large_hypothesis"] = avg.hypothesis
    for label, fn in (("small", dfe_small_limit), ("large", dfe_large_limit)):
        try:
            ref = fn(model, grid)
        except UnsupportedLimitError:
            continue
        eps = frac * float(np.min(ref))
        env = envelopes(model, grid, ref, eps)
        low, high = envelope_bounds(env)
        result[f"envelope_{label}"] = {"eps": eps, "low": low, "high": high}
    if bm is not None:
        result["oracle_small"] = bm.small_oracle(grid)
        result["oracle_large"] = bm.large_oracle(grid)

    def table():
        lines = [f"model {model.name}, N={grid.N}",
                 f"small-diffusion limit  max_x r(V^-1 F)(x, c(x)) = {prof.max:.12g} at x = {prof.x_max:.6g}",
                 f"large-diffusion limit  r(V̌^-1 F̌) = {avg.value:.12g}  (hypothesis {avg.hypothesis})"]
        for label in ("small", "large"):
            e = result.get(f"envelope_{label}")
            if e:
                lines.append(f"envelope ({label}, eps={e['eps']:.4g}): [{e['low']:.12g}, {e['high']:.12g}]")
        if bm is not None:
            lines.append(f"oracles: small {result['oracle_small']:.12g}, large {result['oracle_large']:.12g}")
        return lines

    _emit(args, out, result, table)
    return EXIT_OK


def cmd_simulate(args, out) -> int:
    model, _ = load_model(args.model, args.set)
    model = _with_d(model, args.d)
    grid = _grid(model, args.grid_n)
    dfe = solve_dfe(model, grid)
    rep = dfe_stability_test(model, grid, dfe, amplitude=args.amplitude, T=args.T, dt=args.dt, mode=args.mode)
    if args.format == "json":
        text = json.dumps(_clean({
            "model": model.name, "mode": rep.mode, "passed": rep.passed,
            "initial_distance": rep.initial_distance, "final_distance": rep.final_distance,
            "times": rep.times, "distance": rep.distances, "infected_norm": rep.infected_norms,
        }), indent=2, sort_keys=True) + "\n"
    else:
        lines = ["t\tdistance\tinfected_norm"]
        stride = max(1, (len(rep.times) - 1) // args.samples)
        for k in list(range(0, len(rep.times), stride)) + ([len(rep.times) - 1] if (len(rep.times) - 1) % stride else []):
            lines.append(f"{_fmt(rep.times[k])}\t{_fmt(rep.distances[k])}\t{_fmt(rep.infected_norms[k])}")
        lines.append(f"# mode\t{rep.mode}")
        lines.append(f"# passed\t{rep.passed}")
        lines.append(f"# decay_ratio\t{_fmt(rep.decay_ratio)}")
        text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        out.write(text)
    return EXIT_OK


def _emit(args, out, result: dict, table) -> None:
    if args.format == "json":
        out.write(json.dumps(_clean(result), indent=2, sort_keys=True) + "\n")
    else:
        out.write("\n".join(table()) + "\n")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spatial-r0", description="Basic reproduction number of spatial epidemic models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, grid_n=257):
        sp.add_argument("--model", required=True,
                        help=f"model file path or builtin:<name> ({', '.join(BUILTINS)})")
        sp.add_argument("--set", action="append", default=[], metavar="NAME=VALUE",
                        help="override a built-in parameter (repeatable)")
        sp.add_argument("--grid-n", type=int, default=grid_n, help=f"grid nodes (default {grid_n})")
        sp.add_argument("--tol", type=float, default=1e-10, help="solver tolerance (default 1e-10)")
        sp.add_argument("--format", choices=("table", "json"), default="table")
        sp.add_argument("--seed", type=int, default=0, help="seed for sampled checks")

    c = sub.add_parser("check", help="verify structural assumptions and DFE solvability")
    common(c)
    c.add_argument("--d", help="diffusion tuple, e.g. 1 or 1:1:0.5")
    c.set_defaults(func=cmd_check)

    r = sub.add_parser("r0", help="compute R0 and the sign check")
    common(r, 1025)
    r.add_argument("--d", help="diffusion tuple, e.g. 1e-3 or 1e-3:1e-3:1")
    r.set_defaults(func=cmd_r0)

    s = sub.add_parser("sweep", help="R0 along a diffusion schedule")
    common(s, 513)
    s.add_argument("--d", required=True, help="schedule: comma list of tuples, or log:lo:hi:count")
    s.add_argument("--eps", type=float, help="envelope half-width as a fraction of the smallest reference value (default 0.05)")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.add_argument("--out", help="output path (default stdout)")
    s.set_defaults(func=cmd_sweep)

    lm = sub.add_parser("limits", help="small/large-diffusion limits and envelope bounds")
    common(lm, 1025)
    lm.add_argument("--eps", type=float, help="envelope half-width fraction (default 0.05)")
    lm.set_defaults(func=cmd_limits)

    sm = sub.add_parser("simulate", help="perturb the DFE and evolve the nonlinear system")
    common(sm, 129)
    sm.add_argument("--d", help="diffusion tuple")
    sm.add_argument("--T", type=float, default=20.0)
    sm.add_argument("--dt", type=float, default=None, help="time step (default T/1000)")
    sm.add_argument("--amplitude", type=float, default=1e-3)
    sm.add_argument("--mode", choices=("decay", "growth"), default="decay")
    sm.add_argument("--samples", type=int, default=50, help="rows in the printed time series")
    sm.add_argument("--out")
    sm.set_defaults(func=cmd_simulate)
    return p


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = sys.stdout if out is None else out
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be at least 1")
        return args.func(args, out)
    except (UsageError, ModelFileError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except NUMERICAL_ERRORS as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UnsupportedLimitError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION


def main_entry() -> None:  # console-script wrapper
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
