"""JSON/CSV schemas shared by the library and the command line.

Every loader raises :class:`SchemaError` with the path of the offending
field, so malformed inputs can be reported precisely.
"""

from __future__ import annotations

import csv
import json
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .allocator import ControlMatrix, Source
from .magmodel import Coil, CoilArray, CoilGeometry, FieldState
from .layoutopt import LayoutParams, TraceRow

FIXTURE_PREFIX = "fixture:"
TRACE_HEADER = ("iter", "F", "step", "max_coil_top_m", "min_surface_gap_m")


class SchemaError(ValueError):
    pass


def fixture_path(name: str) -> Path:
    """Path of a packaged fixture, e.g. ``"design_a"`` or ``"supp_table1.json"``."""
    if not name.endswith(".json"):
        name += ".json"
    path = Path(str(resources.files("magtable") / "fixtures" / name))
    if not path.exists():
        raise SchemaError(f"unknown fixture {name!r}")
    return path


def resolve_path(spec: str | Path) -> Path:
    s = str(spec)
    if s.startswith(FIXTURE_PREFIX):
        return fixture_path(s[len(FIXTURE_PREFIX):])
    return Path(s)


def read_json(spec: str | Path) -> Any:
    path = resolve_path(spec)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise SchemaError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def _get(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise SchemaError(f"{where}: missing field {key!r}")
    return d[key]


def _num(value, where: str) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise SchemaError(f"{where}: expected a number, got {value!r}") from None
    if not np.isfinite(out):
        raise SchemaError(f"{where}: value must be finite")
    return out


def _vec(value, n: int, where: str) -> np.ndarray:
    if not isinstance(value, (list, tuple)) or len(value) != n:
        raise SchemaError(f"{where}: expected a list of {n} numbers")
    return np.array([_num(v, f"{where}[{k}]") for k, v in enumerate(value)])


def _matrix(value, rows: int, where: str, cols: int | None = None) -> np.ndarray:
    if not isinstance(value, list) or len(value) != rows:
        raise SchemaError(f"{where}: expected {rows} rows")
    cols = cols if cols is not None else (len(value[0]) if isinstance(value[0], list) else -1)
    return np.array([_vec(r, cols, f"{where}[{k}]") for k, r in enumerate(value)])


# ---------------------------------------------------------------------------
# Coil arrays
# ---------------------------------------------------------------------------


def array_to_dict(array: CoilArray, layout: LayoutParams | None = None) -> dict:
    out: dict[str, Any] = {
        "coils": [
            {
                "centroid_m": c.centroid.tolist(),
                "axis": c.axis.tolist(),
                "moment_per_amp_Am2": c.moment_per_amp,
                "core_radius_m": c.geometry.core_radius,
                "winding_thickness_m": c.geometry.winding_thickness,
                "length_m": c.geometry.length,
            }
            for c in array.coils
        ],
        "current_limit": array.current_limit,
    }
    if array.amps_per_unit is not None:
        out["amps_per_unit"] = array.amps_per_unit
    if layout is not None:
        out["layout_params"] = layout.vector.tolist()
    return out


def array_from_dict(d: dict, where: str = "array") -> CoilArray:
    coils_raw = _get(d, "coils", where)
    if not isinstance(coils_raw, list) or not coils_raw:
        raise SchemaError(f"{where}.coils: expected a non-empty list")
    coils = []
    for k, c in enumerate(coils_raw):
        w = f"{where}.coils[{k}]"
        try:
            geom = CoilGeometry(
                _num(_get(c, "core_radius_m", w), f"{w}.core_radius_m"),
                _num(_get(c, "winding_thickness_m", w), f"{w}.winding_thickness_m"),
                _num(_get(c, "length_m", w), f"{w}.length_m"),
            )
            coils.append(
                Coil(
                    _vec(_get(c, "centroid_m", w), 3, f"{w}.centroid_m"),
                    _vec(_get(c, "axis", w), 3, f"{w}.axis"),
                    _num(_get(c, "moment_per_amp_Am2", w), f"{w}.moment_per_amp_Am2"),
                    geom,
                )
            )
        except SchemaError:
            raise
        except ValueError as exc:
            raise SchemaError(f"{w}: {exc}") from None
    limit = _num(d.get("current_limit", 1.0), f"{where}.current_limit")
    apu = d.get("amps_per_unit")
    apu = None if apu is None else _num(apu, f"{where}.amps_per_unit")
    try:
        return CoilArray(tuple(coils), limit, apu)
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from None


def layout_from_dict(d: dict, where: str = "array") -> LayoutParams:
    """The ``layout_params`` echo when present, else angles derived from the coil axes."""
    array = array_from_dict(d, where)
    if "layout_params" in d:
        lp = _vec(d["layout_params"], 5 * len(array), f"{where}.layout_params")
        return LayoutParams(lp)
    return LayoutParams.from_array(array)


def load_array(spec: str | Path) -> CoilArray:
    return array_from_dict(read_json(spec), str(spec))


# ---------------------------------------------------------------------------
# Control matrices
# ---------------------------------------------------------------------------


def control_matrix_to_dict(cm: ControlMatrix) -> dict:
    return {
        "at_m": cm.at.tolist(),
        "rows_field_T_per_unit": cm.rows_field.tolist(),
        "rows_gradient_Tpm_per_unit": cm.rows_gradient.tolist(),
        "source": cm.source.value,
    }


def control_matrix_from_dict(d: dict, where: str = "matrix", amps_per_unit: float | None = None) -> ControlMatrix:
    """Load either the SI schema or a raw calibration table in mT/A.

    Raw tables (keys ``rows_field_mT_per_A`` / ``rows_gradient_mT_per_m_A``)
    are converted to T per unit current with ``amps_per_unit`` amperes per
    unit (1 A when omitted).
    """
    if "rows_field_mT_per_A" in d:
        bf = _matrix(_get(d, "rows_field_mT_per_A", where), 3, f"{where}.rows_field_mT_per_A")
        bg = _matrix(_get(d, "rows_gradient_mT_per_m_A", where), 5, f"{where}.rows_gradient_mT_per_m_A", bf.shape[1])
        scale = 1e-3 * (1.0 if amps_per_unit is None else amps_per_unit)
        at = _vec(d.get("at_m", [0.0, 0.0, 0.0]), 3, f"{where}.at_m")
        return ControlMatrix(at, bf * scale, bg * scale, Source.CALIBRATED)
    at = _vec(_get(d, "at_m", where), 3, f"{where}.at_m")
    bf = _matrix(_get(d, "rows_field_T_per_unit", where), 3, f"{where}.rows_field_T_per_unit")
    bg = _matrix(_get(d, "rows_gradient_Tpm_per_unit", where), 5, f"{where}.rows_gradient_Tpm_per_unit", bf.shape[1])
    try:
        source = Source(d.get("source", "dipole"))
    except ValueError:
        raise SchemaError(f"{where}.source: expected 'dipole' or 'calibrated'") from None
    if amps_per_unit is not None:
        bf, bg = bf * amps_per_unit, bg * amps_per_unit
    return ControlMatrix(at, bf, bg, source)


def load_control_matrix(spec: str | Path, amps_per_unit: float | None = None) -> ControlMatrix:
    return control_matrix_from_dict(read_json(spec), str(spec), amps_per_unit)


def load_supp_table1(amps_per_unit: float | None = None) -> ControlMatrix:
    """The shipped calibrated origin matrix, in T per unit current."""
    return load_control_matrix(fixture_path("supp_table1"), amps_per_unit)


def supp_table1_raw() -> tuple[np.ndarray, np.ndarray]:
    """Shipped calibration table exactly as stored (mT/A, mT/(m*A))."""
    d = read_json(fixture_path("supp_table1"))
    return np.array(d["rows_field_mT_per_A"]), np.array(d["rows_gradient_mT_per_m_A"])


# ---------------------------------------------------------------------------
# Field states and traces
# ---------------------------------------------------------------------------


def field_state_to_dict(fs: FieldState, at=None) -> dict:
    out = {"b_T": fs.b.tolist(), "g_Tpm": fs.g.tolist()}
    if at is not None:
        out = {"at_m": list(map(float, at)), **out}
    return out


def field_state_from_dict(d: dict, where: str = "field") -> FieldState:
    return FieldState(_vec(_get(d, "b_T", where), 3, f"{where}.b_T"), _vec(_get(d, "g_Tpm", where), 5, f"{where}.g_Tpm"))


def write_trace_csv(path: str | Path, trace: Iterable[TraceRow]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for row in trace:
            w.writerow([row.iter, repr(row.F), repr(row.step), repr(row.max_coil_top_m), repr(row.min_surface_gap_m)])


def read_trace_csv(path: str | Path) -> list[TraceRow]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            TraceRow(int(r["iter"]), float(r["F"]), float(r["step"]), float(r["max_coil_top_m"]), float(r["min_surface_gap_m"]))
            for r in reader
        ]
