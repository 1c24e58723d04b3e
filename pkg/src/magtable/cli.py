"""Command-line front end.

Exit codes: 0 success, 2 usage or malformed input, 3 numeric/feasibility failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import allocator as alloc
from .calibkit import CalibrationError, calibrate, read_sweep_csv
from .geomkit import DEFAULT_RESOLUTION, accessibility, coil_obstructions, obstruction_from_dict
from .layoutopt import (
    InfeasibleLayoutError,
    LayoutParams,
    NoFeasibleStepError,
    OptimizerConfig,
    descend,
    project_below_plane,
    random_layout,
)
from .magmodel import CoilGeometry, SingularityError, array_field, DEFAULT_MOMENT_PER_AMP
from .serialization import (
    SchemaError,
    array_from_dict,
    array_to_dict,
    control_matrix_from_dict,
    control_matrix_to_dict,
    field_state_to_dict,
    layout_from_dict,
    read_json,
    write_json,
    write_trace_csv,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


def _floats(text: str, n: int | None = None, name: str = "value") -> np.ndarray:
    try:
        vals = np.array([float(t) for t in text.split(",") if t.strip() != ""])
    except ValueError:
        raise UsageError(f"{name}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and vals.size != n:
        raise UsageError(f"{name}: expected {n} values, got {vals.size}")
    return vals


def _vector_arg(args, name: str, n: int = 3) -> np.ndarray | None:
    si = getattr(args, name, None)
    mt = getattr(args, f"{name}_mT", None)
    if si is not None and mt is not None:
        raise UsageError(f"give only one of --{name} and --{name}-mT")
    if mt is not None:
        return _floats(mt, n, f"--{name}-mT") * 1e-3
    if si is not None:
        return _floats(si, n, f"--{name}")
    return None


def _emit(obj, out: str | None) -> None:
    if out:
        write_json(out, obj)
    else:
        json.dump(obj, sys.stdout, indent=2)
        sys.stdout.write("\n")


def _load_matrix_or_array(path: str, at: np.ndarray, amps_per_unit: float | None):
    """Return (control matrix, coil array or None) for either input schema."""
    d = read_json(path)
    if isinstance(d, dict) and "coils" in d:
        array = array_from_dict(d, path)
        return alloc.build_control_matrix(array, at), array
    if not isinstance(d, dict):
        raise SchemaError(f"{path}: expected a JSON object")
    return control_matrix_from_dict(d, path, amps_per_unit), None


def _parse_grid(text: str) -> list[np.ndarray]:
    axes = text.split(",")
    if len(axes) != 3:
        raise UsageError("--grid: expected x0:x1:nx,y0:y1:ny,z0:z1:nz")
    out = []
    for a, name in zip(axes, "xyz"):
        parts = a.split(":")
        if len(parts) == 1:
            out.append(np.array([float(parts[0])]))
            continue
        if len(parts) != 3:
            raise UsageError(f"--grid: bad {name} range {a!r}")
        try:
            lo, hi, num = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError:
            raise UsageError(f"--grid: bad {name} range {a!r}") from None
        if num < 1:
            raise UsageError(f"--grid: {name} count must be >= 1")
        out.append(np.linspace(lo, hi, num))
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_field(args) -> int:
    array = array_from_dict(read_json(args.array), args.array)
    currents = _floats(args.currents, len(array), "--currents")
    if args.grid:
        xs, ys, zs = _parse_grid(args.grid)
        rows = []
        for x in xs:
            for y in ys:
                for z in zs:
                    fs = array_field(array, currents, (x, y, z))
                    rows.append([x, y, z, *fs.b, float(np.linalg.norm(fs.b))])
        fh = open(args.out, "w", newline="") if args.out else sys.stdout
        try:
            w = csv.writer(fh)
            w.writerow(["x", "y", "z", "Bx", "By", "Bz", "|B|"])
            for r in rows:
                w.writerow([repr(float(v)) for v in r])
        finally:
            if args.out:
                fh.close()
        return EXIT_OK
    at = _vector_arg(args, "at")
    at = np.zeros(3) if at is None else at
    fs = array_field(array, currents, at)
    _emit(field_state_to_dict(fs, at), args.out)
    return EXIT_OK


def _allocation_dict(res: alloc.AllocationResult, mode: str, current_limit: float, amps_per_unit) -> dict:
    out = {
        "mode": mode,
        "currents": res.currents.tolist(),
        "achieved": field_state_to_dict(res.achieved),
        "residual": res.residual,
        "saturated": res.saturated,
        "current_limit": current_limit,
        "used_pseudoinverse": res.used_pseudoinverse,
    }
    if amps_per_unit is not None:
        out["amps_per_unit"] = amps_per_unit
        out["currents_A"] = (res.currents * amps_per_unit).tolist()
    return out


def cmd_allocate(args) -> int:
    at = _vector_arg(args, "at")
    at = np.zeros(3) if at is None else at
    b = _vector_arg(args, "b")
    if b is None:
        raise UsageError("one of --b or --b-mT is required")
    cm, array = _load_matrix_or_array(args.matrix, at, args.amps_per_unit)
    limit = args.current_limit if args.current_limit is not None else (array.current_limit if array else 1.0)
    res = alloc.allocate(cm, b, args.mode, limit)
    apu = args.amps_per_unit if array is None else array.amps_per_unit
    _emit(_allocation_dict(res, args.mode, limit, apu), args.out)
    return EXIT_OK


def cmd_maxfield(args) -> int:
    at = _vector_arg(args, "at")
    at = np.zeros(3) if at is None else at
    amps = args.amps_per_unit
    if args.fit_uniform_z_mT is not None:
        if amps is not None:
            raise UsageError("give only one of --amps-per-unit and --fit-uniform-z-mT")
        per_amp, _ = _load_matrix_or_array(args.matrix, at, None)
        amps = alloc.fit_amps_per_unit(per_amp, args.fit_uniform_z_mT * 1e-3)
    cm, array = _load_matrix_or_array(args.matrix, at, amps)
    limit = args.current_limit if args.current_limit is not None else (array.current_limit if array else 1.0)
    table = alloc.max_field_table(cm, limit)
    out = {
        "at_m": cm.at.tolist(),
        "current_limit": limit,
        "amps_per_unit": amps,
        "max_field_T": table,
        "max_field_mT": {m: {a: v * 1e3 for a, v in t.items()} for m, t in table.items()},
        "ratio_nonuniform_to_uniform": {a: table["nonuniform"][a] / table["uniform"][a] for a in "xyz"},
    }
    _emit(out, args.out)
    return EXIT_OK


_CONFIG_FLAGS = {
    "step": float,
    "fd_step": float,
    "stop_tol": float,
    "max_iters": int,
    "eps_field": float,
    "sigma_prox": float,
    "z0": float,
    "table_plane_z": float,
    "penalty_diameter": float,
    "fd_scheme": str,
}


def cmd_optimize(args) -> int:
    overrides = {k: getattr(args, k) for k in _CONFIG_FLAGS if getattr(args, k) is not None}
    if args.random_init is not None:
        if args.seed is None:
            raise UsageError("--seed is required with --random-init")
        if args.initial is not None:
            raise UsageError("give either an initial layout file or --random-init, not both")
        geometry = CoilGeometry()
        mpa = DEFAULT_MOMENT_PER_AMP
        config = OptimizerConfig(moment_per_amp=mpa, **overrides)
        initial = random_layout(args.random_init, args.seed, geometry, config)
        base_kwargs: dict = {}
    else:
        if args.initial is None:
            raise UsageError("an initial layout file (or --random-init N --seed S) is required")
        d = read_json(args.initial)
        array = array_from_dict(d, args.initial)
        initial = layout_from_dict(d, args.initial)
        geometry = array.coils[0].geometry
        mpa = array.coils[0].moment_per_amp
        config = OptimizerConfig(moment_per_amp=mpa, **overrides)
        base_kwargs = {"current_limit": array.current_limit, "amps_per_unit": array.amps_per_unit}
    if args.out is None or args.trace is None:
        raise UsageError("--out and --trace are required")
    start = initial
    if not args.no_project:
        start = project_below_plane(initial, geometry, config)
    final, trace = descend(start, geometry, config)
    final_array = final.to_array(geometry, mpa, **base_kwargs)
    write_json(args.out, array_to_dict(final_array, final))
    write_trace_csv(args.trace, trace)
    summary = {
        "iterations": trace[-1].iter,
        "initial_F": trace[0].F,
        "final_F": trace[-1].F,
        "max_coil_top_m": trace[-1].max_coil_top_m,
        "min_surface_gap_m": trace[-1].min_surface_gap_m,
        "projected": bool(np.any(start.vector != initial.vector)),
        "out": args.out,
        "trace": args.trace,
    }
    json.dump(summary, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


def _conditioning_dict(rep: alloc.ConditioningReport) -> dict:
    return {
        "singular_values": list(rep.singular_values),
        "sigma_min": rep.sigma_min,
        "sigma_max": rep.sigma_max,
        "condition_number": rep.condition_number,
    }


def cmd_analyze(args) -> int:
    at = _vector_arg(args, "at")
    at = np.zeros(3) if at is None else at
    cm, array = _load_matrix_or_array(args.input, at, args.amps_per_unit)
    out: dict = {
        "at_m": cm.at.tolist(),
        "source": cm.source.value,
        "conditioning": {
            "field": _conditioning_dict(alloc.conditioning(cm, alloc.Rows.FIELD_ONLY)),
            "full": _conditioning_dict(alloc.conditioning(cm, alloc.Rows.FULL)),
        },
    }
    obstructions = None
    if args.obstructions is not None:
        raw = read_json(args.obstructions)
        items = raw.get("obstructions") if isinstance(raw, dict) else raw
        if not isinstance(items, list):
            raise SchemaError(f"{args.obstructions}: expected a list of obstructions")
        try:
            obstructions = [obstruction_from_dict(o) for o in items]
        except (KeyError, ValueError, TypeError) as exc:
            raise SchemaError(f"{args.obstructions}: bad obstruction: {exc}") from None
    elif array is not None:
        obstructions = coil_obstructions(array, args.obstruction_radius)
    if obstructions is not None and not args.no_accessibility:
        out["accessibility"] = accessibility(obstructions, at, args.resolution).to_dict()
    else:
        out["accessibility"] = None
    _emit(out, args.out)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    at = _vector_arg(args, "at")
    at = np.zeros(3) if at is None else at
    sweeps = read_sweep_csv(args.sweeps)
    grads = read_sweep_csv(args.gradients)
    cm, fits, gfits = calibrate(sweeps, grads, at, args.amps_per_unit)
    write_json(args.out, control_matrix_to_dict(cm))
    report = {
        "at_m": at.tolist(),
        "amps_per_unit": args.amps_per_unit,
        "coils": [
            {**f.to_dict(), "gradient_T_per_m_A": g.g.tolist(), "gradient_asymmetry": g.asymmetry}
            for f, g in zip(fits, gfits)
        ],
        "saturation_flagged": [k for k, f in enumerate(fits) if f.saturation_onset_A is not None],
    }
    if args.report:
        write_json(args.report, report)
    else:
        _emit(report, None)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_vec(p, name: str, help_si: str) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument(f"--{name}", metavar="X,Y,Z", help=f"{help_si} (SI)")
    g.add_argument(f"--{name}-mT", dest=f"{name}_mT", metavar="X,Y,Z", help=f"{help_si} in mT")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="magtable", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("field", help="field of a coil array at a point or over a grid")
    p.add_argument("array", help="coil array JSON (or fixture:NAME)")
    p.add_argument("--currents", required=True, help="comma-separated normalized currents")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--at", metavar="X,Y,Z", help="evaluation point (m)")
    g.add_argument("--grid", metavar="X0:X1:NX,Y0:Y1:NY,Z0:Z1:NZ", help="grid for CSV output (m)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_field, at_mT=None)

    p = sub.add_parser("allocate", help="coil currents for a desired field")
    p.add_argument("matrix", help="control matrix or coil array JSON")
    _add_vec(p, "b", "desired field (T)")
    p.add_argument("--mode", choices=[m.value for m in alloc.Mode], default="uniform")
    p.add_argument("--at", metavar="X,Y,Z", help="point for coil-array inputs (m)")
    p.add_argument("--amps-per-unit", type=float)
    p.add_argument("--current-limit", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_allocate, at_mT=None)

    p = sub.add_parser("maxfield", help="max field per axis for uniform and non-uniform control")
    p.add_argument("matrix")
    p.add_argument("--at", metavar="X,Y,Z")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--amps-per-unit", type=float)
    g.add_argument("--fit-uniform-z-mT", type=float, help="fit amps_per_unit so the uniform z max equals this")
    p.add_argument("--current-limit", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_maxfield, at_mT=None)

    p = sub.add_parser("optimize", help="gradient-descent layout optimization")
    p.add_argument("initial", nargs="?")
    p.add_argument("--random-init", type=int, metavar="N", help="start from N random coils")
    p.add_argument("--seed", type=int)
    for name, typ in _CONFIG_FLAGS.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ)
    p.add_argument("--no-project", action="store_true", help="do not lower coils above the table plane")
    p.add_argument("--out")
    p.add_argument("--trace")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("analyze", help="conditioning and workspace accessibility")
    p.add_argument("input", help="coil array or control matrix JSON")
    p.add_argument("--at", metavar="X,Y,Z")
    p.add_argument("--amps-per-unit", type=float)
    p.add_argument("--resolution", type=int, default=DEFAULT_RESOLUTION)
    p.add_argument("--obstructions", help="obstruction list JSON (overrides coil cylinders)")
    p.add_argument("--obstruction-radius", type=float, help="cylinder radius for coils (m)")
    p.add_argument("--no-accessibility", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze, at_mT=None)

    p = sub.add_parser("calibrate", help="calibrated control matrix from sweep CSVs")
    p.add_argument("sweeps")
    p.add_argument("gradients")
    p.add_argument("--at", metavar="X,Y,Z")
    p.add_argument("--amps-per-unit", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_calibrate, at_mT=None)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, SchemaError, CalibrationError) as exc:
        print(f"magtable {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SingularityError, alloc.RankDeficiencyError, InfeasibleLayoutError, NoFeasibleStepError,
            np.linalg.LinAlgError) as exc:
        print(f"magtable {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"magtable {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
