"""Calibration of a control matrix from gaussmeter sweeps.

Per coil, a directional current sweep (0 -> +max -> 0 -> -max -> 0) measured
at the calibration point gives the field-per-amp slope, a hysteresis figure
and the current at which the core starts to saturate.  Gantry displacements
around the calibration point give the gradient per amp by forward
differences, projected onto symmetric traceless matrices.
"""

from __future__ import annotations

import csv
import enum
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import brentq

from .allocator import ControlMatrix, Source
from .magmodel import CoilArray, gradient_vector, unit_field_matrices, dipole_fields

SWEEP_HEADER = ("coil_index", "current_A", "branch", "pos_x_m", "pos_y_m", "pos_z_m", "Bx_T", "By_T", "Bz_T")

LINEAR_TOL = 0.05
SEED_FRACTION = 0.25
DEFAULT_GANTRY_STEP = 0.005


class CalibrationError(ValueError):
    pass


class Branch(str, enum.Enum):
    ASCENDING = "ascending"
    DESCENDING = "descending"


@dataclass(frozen=True)
class SweepRecord:
    coil_index: int
    current: float
    b_measured: NDArray[np.float64]
    branch: Branch = Branch.ASCENDING
    position: NDArray[np.float64] = np.zeros(3)

    def __post_init__(self) -> None:
        b = np.asarray(self.b_measured, dtype=float).reshape(3)
        pos = np.asarray(self.position, dtype=float).reshape(3)
        if not (np.isfinite(self.current) and np.all(np.isfinite(b)) and np.all(np.isfinite(pos))):
            raise CalibrationError(f"non-finite value in sweep record for coil {self.coil_index}")
        if self.coil_index < 0:
            raise CalibrationError("coil_index must be non-negative")
        object.__setattr__(self, "b_measured", b)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "branch", Branch(self.branch))


@dataclass(frozen=True)
class CoilFit:
    slope: NDArray[np.float64]  # T/A
    r_squared: float
    hysteresis_T: float | None
    saturation_onset_A: float | None
    n_linear: int = 0

    def to_dict(self) -> dict:
        return {
            "slope_T_per_A": self.slope.tolist(),
            "r_squared": self.r_squared,
            "hysteresis_T": self.hysteresis_T,
            "saturation_onset_A": self.saturation_onset_A,
            "n_linear_points": self.n_linear,
        }


@dataclass(frozen=True)
class GradientFit:
    g: NDArray[np.float64]  # canonical 5-vector
    asymmetry: float  # relative size of the part removed by projection


# ---------------------------------------------------------------------------
# Field sweeps
# ---------------------------------------------------------------------------


def _through_origin(i: NDArray, b: NDArray) -> NDArray:
    denom = float(i @ i)
    if denom == 0.0:
        raise CalibrationError("all currents are zero; slope is undefined")
    return (i @ b) / denom


def _hysteresis(records: Sequence[SweepRecord]) -> float | None:
    by_branch: dict[Branch, dict[float, list[NDArray]]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        by_branch[r.branch][r.current].append(r.b_measured)
    if len(by_branch) < 2:
        return None
    curves = {}
    for br, pts in by_branch.items():
        cur = np.array(sorted(pts))
        val = np.array([np.mean(pts[c], axis=0) for c in cur])
        curves[br] = (cur, val)
    ca, va = curves[Branch.ASCENDING]
    cd, vd = curves[Branch.DESCENDING]
    lo, hi = max(ca[0], cd[0]), min(ca[-1], cd[-1])
    grid = np.union1d(ca, cd)
    grid = grid[(grid >= lo) & (grid <= hi)]
    if grid.size == 0:
        return None
    ia = np.stack([np.interp(grid, ca, va[:, k]) for k in range(3)], axis=1)
    idd = np.stack([np.interp(grid, cd, vd[:, k]) for k in range(3)], axis=1)
    return float(np.max(np.linalg.norm(ia - idd, axis=1)))


def fit_coil(records: Sequence[SweepRecord]) -> CoilFit:
    """Fit one coil's field-per-amp slope through the origin.

    A provisional fit over the lowest quarter of the current range selects
    the linear region (points within 5% of the fit, compared by vector
    norm); the slope is then refit on that region.  The saturation onset is the smallest |current| whose residual
    from the final fit exceeds 5% of the fitted field.

    Raises:
        CalibrationError: fewer than four distinct currents, no zero-current
            point, or records from more than one coil/position.
    """
    records = list(records)
    if len({r.coil_index for r in records}) > 1:
        raise CalibrationError("fit_coil expects records of a single coil")
    if len({tuple(r.position) for r in records}) > 1:
        raise CalibrationError("fit_coil expects records at a single position")
    currents = np.array([r.current for r in records])
    fields = np.array([r.b_measured for r in records])
    distinct = np.unique(currents)
    if distinct.size < 4:
        raise CalibrationError(f"need at least 4 distinct currents, got {distinct.size}")
    if not np.any(distinct == 0.0):
        raise CalibrationError("the sweep must include a zero-current measurement")

    # Seed on the low-current end: a full-range seed is dragged down by the
    # saturated points and then rejects the genuinely linear ones.
    mag = np.abs(currents)
    seed = mag <= max(SEED_FRACTION * mag.max(), np.min(mag[mag > 0]))
    slope = _through_origin(currents[seed], fields[seed])
    fitted = np.outer(currents, slope)
    resid = np.linalg.norm(fields - fitted, axis=1)
    linear = resid <= LINEAR_TOL * np.linalg.norm(fitted, axis=1)
    if np.count_nonzero(currents[linear]) >= 1:
        slope = _through_origin(currents[linear], fields[linear])
    fitted = np.outer(currents, slope)
    resid = np.linalg.norm(fields - fitted, axis=1)

    sel = linear if np.count_nonzero(currents[linear]) >= 1 else np.ones_like(linear)
    ss_res = float(np.sum(resid[sel] ** 2))
    centered = fields[sel] - fields[sel].mean(axis=0)
    ss_tot = float(np.sum(centered**2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    r2 = float(min(1.0, max(0.0, r2)))

    fnorm = np.linalg.norm(fitted, axis=1)
    exceed = (currents != 0) & (resid > LINEAR_TOL * fnorm)
    onset = float(np.min(np.abs(currents[exceed]))) if exceed.any() else None
    return CoilFit(slope, r2, _hysteresis(records), onset, int(np.count_nonzero(sel)))


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def project_symmetric_traceless(gmat: ArrayLike) -> NDArray[np.float64]:
    """Nearest (Frobenius) symmetric traceless matrix."""
    gmat = np.asarray(gmat, dtype=float)
    s = 0.5 * (gmat + gmat.T)
    return s - np.trace(s) / 3.0 * np.eye(3)


def fit_gradient(
    b0: ArrayLike,
    b_dx: ArrayLike,
    b_dy: ArrayLike,
    b_dz: ArrayLike,
    dx: float = DEFAULT_GANTRY_STEP,
    dy: float = DEFAULT_GANTRY_STEP,
    dz: float = DEFAULT_GANTRY_STEP,
) -> GradientFit:
    """Gradient from fields at ``p0`` and at ``p0`` displaced along x, y and z.

    Column ``j`` of the raw matrix is ``(B(p0 + d_j e_j) - B(p0)) / d_j``.
    """
    steps = (dx, dy, dz)
    if any(s is None or s <= 0 for s in steps):
        raise CalibrationError("displacements must be positive")
    b0 = np.asarray(b0, dtype=float).reshape(3)
    cols = [(np.asarray(b, dtype=float).reshape(3) - b0) / s for b, s in zip((b_dx, b_dy, b_dz), steps)]
    raw = np.stack(cols, axis=1)
    proj = project_symmetric_traceless(raw)
    pn = np.linalg.norm(proj)
    removed = np.linalg.norm(raw - proj)
    asym = float(removed / pn) if pn > 0 else (0.0 if removed == 0 else float("inf"))
    return GradientFit(gradient_vector(proj), asym)


def fit_gradient_records(records: Sequence[SweepRecord], at: ArrayLike) -> GradientFit:
    """Gradient per amp for one coil from gantry records around ``at``.

    Records may be taken at several non-zero currents; each current yields a
    gradient, and the per-amp value is their through-origin least-squares fit.
    """
    at = np.asarray(at, dtype=float).reshape(3)
    by_current: dict[float, dict[int, tuple[NDArray, float]]] = defaultdict(dict)
    for r in records:
        if r.current == 0.0:
            continue
        off = r.position - at
        moved = np.flatnonzero(np.abs(off) > 1e-12)
        if moved.size == 0:
            by_current[r.current][-1] = (r.b_measured, 0.0)
        elif moved.size == 1:
            by_current[r.current][int(moved[0])] = (r.b_measured, float(off[moved[0]]))
        else:
            raise CalibrationError(f"record at {r.position.tolist()} is displaced along more than one axis")
    if not by_current:
        raise CalibrationError("no gradient records with non-zero current")
    gs, cur, asym = [], [], []
    for i, pts in sorted(by_current.items()):
        missing = [ax for ax, k in zip("xyz0", (0, 1, 2, -1)) if k not in pts]
        if missing:
            raise CalibrationError(f"gradient samples at {i} A are missing displacement(s): {', '.join(missing)}")
        fit = fit_gradient(pts[-1][0], pts[0][0], pts[1][0], pts[2][0], pts[0][1], pts[1][1], pts[2][1])
        gs.append(fit.g)
        cur.append(i)
        asym.append(fit.asymmetry)
    cur_arr = np.array(cur)
    g_per_amp = _through_origin(cur_arr, np.array(gs))
    return GradientFit(g_per_amp, float(max(asym)))


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


def assemble_calibrated(
    fits: Sequence[CoilFit],
    gradient_fits: Sequence[ArrayLike | GradientFit],
    at: ArrayLike,
    amps_per_unit: float | None = None,
) -> ControlMatrix:
    """Stack per-coil slopes into a calibrated control matrix.

    Columns are per ampere unless ``amps_per_unit`` is given, in which case
    they are per unit normalized current.
    """
    if len(fits) != len(gradient_fits):
        raise CalibrationError(f"{len(fits)} field fits but {len(gradient_fits)} gradient fits")
    if any(f is None for f in fits) or any(g is None for g in gradient_fits):
        missing = [k for k, (f, g) in enumerate(zip(fits, gradient_fits)) if f is None or g is None]
        raise CalibrationError(f"missing calibration for coil(s) {missing}")
    if len(fits) == 0:
        raise CalibrationError("no coils to assemble")
    scale = 1.0 if amps_per_unit is None else float(amps_per_unit)
    bf = np.stack([f.slope for f in fits], axis=1) * scale
    grads = [g.g if isinstance(g, GradientFit) else np.asarray(g, dtype=float).reshape(5) for g in gradient_fits]
    bg = np.stack(grads, axis=1) * scale
    return ControlMatrix(np.asarray(at, dtype=float), bf, bg, Source.CALIBRATED)


def calibrate(
    sweeps: Iterable[SweepRecord],
    gradients: Iterable[SweepRecord],
    at: ArrayLike,
    amps_per_unit: float | None = None,
) -> tuple[ControlMatrix, list[CoilFit], list[GradientFit]]:
    """Full pipeline from sweep and gantry records to a calibrated matrix."""
    sweeps, gradients = list(sweeps), list(gradients)
    if not sweeps:
        raise CalibrationError("no sweep records")
    n = max(r.coil_index for r in sweeps + gradients) + 1
    fits, gfits = [], []
    for k in range(n):
        sk = [r for r in sweeps if r.coil_index == k]
        gk = [r for r in gradients if r.coil_index == k]
        if not sk or not gk:
            raise CalibrationError(f"missing {'sweep' if not sk else 'gradient'} records for coil {k}")
        fits.append(fit_coil(sk))
        gfits.append(fit_gradient_records(gk, at))
    return assemble_calibrated(fits, gfits, at, amps_per_unit), fits, gfits


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def read_sweep_csv(path: str | Path) -> list[SweepRecord]:
    """Parse sweep or gantry CSV; errors name the offending line and column."""
    path = Path(path)
    if not path.is_file():
        raise CalibrationError(f"{path}: no such file")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise CalibrationError(f"{path}: empty file (expected header {','.join(SWEEP_HEADER)})")
        missing = [c for c in SWEEP_HEADER if c not in reader.fieldnames]
        if missing:
            raise CalibrationError(f"{path}:1: missing column(s) {', '.join(missing)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            try:
                vals = {c: float(row[c]) for c in SWEEP_HEADER if c not in ("coil_index", "branch")}
                idx = int(row["coil_index"])
                branch = Branch(row["branch"].strip().lower())
            except (TypeError, ValueError) as exc:
                bad = next(
                    (c for c in SWEEP_HEADER if not _parses(c, row.get(c))),
                    "?",
                )
                raise CalibrationError(f"{path}:{lineno}: bad value in column {bad!r}: {exc}") from None
            out.append(
                SweepRecord(
                    idx,
                    vals["current_A"],
                    np.array([vals["Bx_T"], vals["By_T"], vals["Bz_T"]]),
                    branch,
                    np.array([vals["pos_x_m"], vals["pos_y_m"], vals["pos_z_m"]]),
                )
            )
    if not out:
        raise CalibrationError(f"{path}: no data rows")
    return out


def _parses(col: str, value) -> bool:
    try:
        if col == "branch":
            Branch(str(value).strip().lower())
        elif col == "coil_index":
            int(value)
        else:
            float(value)
        return True
    except (TypeError, ValueError):
        return False


def write_sweep_csv(path: str | Path, records: Iterable[SweepRecord]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for r in records:
            w.writerow([r.coil_index, repr(r.current), r.branch.value, *map(repr, r.position.tolist()),
                        *map(repr, r.b_measured.tolist())])


# ---------------------------------------------------------------------------
# Synthetic measurements
# ---------------------------------------------------------------------------


def sweep_currents(i_max: float, step: float) -> list[tuple[float, Branch]]:
    """Directional sweep 0 -> +max -> 0 -> -max -> 0 with branch labels."""
    k = int(round(i_max / step))
    up = [j * step for j in range(k + 1)]
    seq = [(c, Branch.ASCENDING) for c in up]
    seq += [(c, Branch.DESCENDING) for c in reversed(up[:-1])]
    seq += [(-c, Branch.DESCENDING) for c in up[1:]]
    seq += [(-c, Branch.ASCENDING) for c in reversed(up[:-1])]
    return seq


def synthesize_sweeps(
    array: CoilArray,
    at: ArrayLike,
    i_max: float = 30.0,
    step: float = 1.0,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
    amps_per_unit: float = 1.0,
) -> list[SweepRecord]:
    """Dipole-model sweeps for every coil, with optional multiplicative noise."""
    rng = rng or np.random.default_rng(0)
    b_unit, _ = unit_field_matrices(array, at)
    at = np.asarray(at, dtype=float)
    out = []
    for k in range(len(array)):
        for cur, br in sweep_currents(i_max, step):
            b = b_unit[:, k] * (cur / amps_per_unit)
            if noise:
                b = b * (1.0 + noise * rng.standard_normal(3))
            out.append(SweepRecord(k, cur, b, br, at))
    return out


def synthesize_gradient_records(
    array: CoilArray,
    at: ArrayLike,
    currents: Sequence[float] = (10.0, 20.0),
    step: float = DEFAULT_GANTRY_STEP,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
    amps_per_unit: float = 1.0,
) -> list[SweepRecord]:
    """Dipole-model gantry samples at ``at`` and ``at + step * e_j``."""
    rng = rng or np.random.default_rng(1)
    at = np.asarray(at, dtype=float)
    offsets = [np.zeros(3), *(step * e for e in np.eye(3))]
    out = []
    for k, coil in enumerate(array.coils):
        for cur in currents:
            for off in offsets:
                p = at + off
                b = dipole_fields(coil.centroid, coil.unit_moment, p)[0] * (cur / amps_per_unit)
                if noise:
                    b = b * (1.0 + noise * rng.standard_normal(3))
                out.append(SweepRecord(k, cur, b, Branch.ASCENDING, p))
    return out


def knee_response(current: ArrayLike, slope: ArrayLike, knee_A: float = 20.0, softness_A: float = 4.0) -> NDArray[np.float64]:
    """Field of a saturating core: linear, then a tanh roll-off.

    The roll-off start is placed so the shortfall from the linear response
    reaches ``LINEAR_TOL`` exactly at ``knee_A``.  Returns shape ``(m, 3)``.
    """
    k = softness_A

    def shortfall(start: float) -> float:
        return (knee_A - start - k * np.tanh((knee_A - start) / k)) / knee_A - LINEAR_TOL

    start = brentq(shortfall, 0.0, knee_A)
    cur = np.atleast_1d(np.asarray(current, dtype=float))
    a = np.abs(cur)
    eff = np.where(a <= start, a, start + k * np.tanh((a - start) / k))
    return np.outer(np.sign(cur) * eff, np.asarray(slope, dtype=float).reshape(3))


def synthesize_knee_sweep(
    slope: ArrayLike,
    knee_A: float = 20.0,
    i_max: float = 30.0,
    step: float = 1.0,
    softness_A: float = 4.0,
    coil_index: int = 0,
    branch_offset: ArrayLike | None = None,
) -> list[SweepRecord]:
    """One coil's directional sweep with a saturation knee.

    ``branch_offset`` (T) is added to every descending-branch sample, which
    models a constant hysteresis gap.
    """
    seq = sweep_currents(i_max, step)
    b = knee_response([c for c, _ in seq], slope, knee_A, softness_A)
    offset = np.zeros(3) if branch_offset is None else np.asarray(branch_offset, dtype=float)
    return [
        SweepRecord(coil_index, c, b[j] + (offset if br is Branch.DESCENDING else 0.0), br)
        for j, (c, br) in enumerate(seq)
    ]
