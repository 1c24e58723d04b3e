"""Control matrices and current allocation.

A control matrix maps the n coil currents to the eight field degrees of
freedom at a point, ``[B; G] = U I``.  Two allocation strategies are
provided:

* uniform: solve ``U I = [B_des; 0]``, producing the field with every
  gradient component held at zero;
* non-uniform: ``I = pinv(B_block) B_des``, the minimum-norm current that
  realizes the field and lets the gradients fall where they may.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .magmodel import CoilArray, FieldState, unit_field_matrices

# Relative singular-value cutoff for rank decisions and pseudoinverses.
RANK_RTOL: float = 1e-12

_AXIS_LABELS = ("Bx", "By", "Bz", "dBx/dx", "dBx/dy", "dBx/dz", "dBy/dy", "dBy/dz")


class Source(str, enum.Enum):
    DIPOLE = "dipole"
    CALIBRATED = "calibrated"


class Mode(str, enum.Enum):
    UNIFORM = "uniform"
    NONUNIFORM = "nonuniform"


class Rows(str, enum.Enum):
    FIELD_ONLY = "field"
    FULL = "full"


class RankDeficiencyError(np.linalg.LinAlgError):
    """The requested block of the control matrix cannot be inverted."""

    def __init__(self, message: str, direction: NDArray[np.float64] | None = None) -> None:
        super().__init__(message)
        self.direction = direction


@dataclass(frozen=True)
class ControlMatrix:
    """Linear map from normalized coil currents to ``[B; G]`` at ``at``."""

    at: NDArray[np.float64]
    rows_field: NDArray[np.float64]
    rows_gradient: NDArray[np.float64]
    source: Source = Source.DIPOLE

    def __post_init__(self) -> None:
        at = np.array(self.at, dtype=float).reshape(3)
        bf = np.array(self.rows_field, dtype=float)
        bg = np.array(self.rows_gradient, dtype=float)
        if bf.ndim != 2 or bf.shape[0] != 3:
            raise ValueError(f"rows_field must be 3 x n, got {bf.shape}")
        if bg.shape != (5, bf.shape[1]):
            raise ValueError(f"rows_gradient must be 5 x {bf.shape[1]}, got {bg.shape}")
        for a in (at, bf, bg):
            a.setflags(write=False)
        object.__setattr__(self, "at", at)
        object.__setattr__(self, "rows_field", bf)
        object.__setattr__(self, "rows_gradient", bg)
        object.__setattr__(self, "source", Source(self.source))

    @property
    def n_coils(self) -> int:
        return self.rows_field.shape[1]

    @property
    def stacked(self) -> NDArray[np.float64]:
        """The full (8, n) matrix ``[B_block; G_block]``."""
        return np.vstack([self.rows_field, self.rows_gradient])

    def scaled(self, k: float) -> "ControlMatrix":
        return ControlMatrix(self.at, self.rows_field * k, self.rows_gradient * k, self.source)

    def field_state(self, currents: ArrayLike) -> FieldState:
        currents = np.asarray(currents, dtype=float).reshape(-1)
        if currents.shape[0] != self.n_coils:
            raise ValueError(f"expected {self.n_coils} currents, got {currents.shape[0]}")
        return FieldState(self.rows_field @ currents, self.rows_gradient @ currents)


@dataclass(frozen=True)
class AllocationResult:
    currents: NDArray[np.float64]
    achieved: FieldState
    residual: float
    saturated: bool
    used_pseudoinverse: bool = False


@dataclass(frozen=True)
class ConditioningReport:
    singular_values: tuple[float, ...]
    sigma_min: float
    sigma_max: float
    condition_number: float


def build_control_matrix(array: CoilArray, p: ArrayLike) -> ControlMatrix:
    """Dipole-model control matrix of ``array`` at point ``p``."""
    b, g = unit_field_matrices(array, p)
    return ControlMatrix(np.asarray(p, dtype=float), b, g, Source.DIPOLE)


def pinv(a: NDArray[np.float64], rtol: float = RANK_RTOL) -> NDArray[np.float64]:
    """SVD pseudoinverse with a relative singular-value cutoff."""
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((a.shape[1], a.shape[0]))
    keep = s > rtol * s[0]
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    return (vt.T * inv_s) @ u.T


def _deficient_direction(a: NDArray[np.float64], labels: tuple[str, ...]) -> tuple[NDArray, str]:
    u, _, _ = np.linalg.svd(a)
    # Last left singular vector: the output-space direction that cannot be produced.
    d = u[:, -1]
    d = d * np.sign(d[np.argmax(np.abs(d))])
    parts = [f"{c:+.3f} {lab}" for c, lab in zip(d, labels) if abs(c) > 1e-3]
    return d, " ".join(parts)


def _result(cm: ControlMatrix, currents: NDArray, target: NDArray, rows: NDArray,
            current_limit: float, used_pinv: bool) -> AllocationResult:
    achieved_vec = rows @ currents
    tnorm = np.linalg.norm(target)
    err = np.linalg.norm(achieved_vec - target)
    residual = float(err / tnorm) if tnorm > 0 else float(err)
    saturated = bool(np.max(np.abs(currents), initial=0.0) > current_limit + 1e-12)
    return AllocationResult(currents, cm.field_state(currents), residual, saturated, used_pinv)


def allocate_uniform(cm: ControlMatrix, b_des: ArrayLike, current_limit: float = 1.0) -> AllocationResult:
    """Currents giving field ``b_des`` with all gradient components zero.

    Square (eight-coil) matrices are solved directly; any other coil count
    falls back to the pseudoinverse of the stacked matrix and sets
    ``used_pseudoinverse``.

    Raises:
        RankDeficiencyError: an eight-coil matrix whose smallest singular
            value is below ``1e-12 * sigma_max``.
    """
    b_des = np.asarray(b_des, dtype=float).reshape(3)
    u = cm.stacked
    target = np.concatenate([b_des, np.zeros(5)])
    if u.shape == (8, 8):
        s = np.linalg.svd(u, compute_uv=False)
        if s[0] == 0.0 or s[-1] < RANK_RTOL * s[0]:
            d, desc = _deficient_direction(u, _AXIS_LABELS)
            raise RankDeficiencyError(f"control matrix is rank deficient along [{desc}]", d)
        currents = np.linalg.solve(u, target)
        return _result(cm, currents, target, u, current_limit, False)
    currents = pinv(u) @ target
    return _result(cm, currents, target, u, current_limit, True)


def allocate_nonuniform(cm: ControlMatrix, b_des: ArrayLike, current_limit: float = 1.0) -> AllocationResult:
    """Minimum-norm currents realizing ``b_des``; gradients are left free."""
    b_des = np.asarray(b_des, dtype=float).reshape(3)
    bf = cm.rows_field
    s = np.linalg.svd(bf, compute_uv=False)
    if s.size < 3 or s[0] == 0.0 or s[2] < RANK_RTOL * s[0]:
        d, desc = _deficient_direction(bf, _AXIS_LABELS[:3])
        raise RankDeficiencyError(f"field block has rank < 3; cannot produce [{desc}]", d)
    currents = pinv(bf) @ b_des
    return _result(cm, currents, b_des, bf, current_limit, False)


def allocate(cm: ControlMatrix, b_des: ArrayLike, mode: Mode | str, current_limit: float = 1.0) -> AllocationResult:
    if Mode(mode) is Mode.UNIFORM:
        return allocate_uniform(cm, b_des, current_limit)
    return allocate_nonuniform(cm, b_des, current_limit)


def max_field(cm: ControlMatrix, direction: ArrayLike, mode: Mode | str, current_limit: float = 1.0) -> float:
    """Largest field magnitude (T) along ``direction`` before any coil hits its limit."""
    direction = np.asarray(direction, dtype=float).reshape(3)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    res = allocate(cm, direction, mode, current_limit)
    peak = np.max(np.abs(res.currents))
    return float(current_limit / peak)


def max_field_table(cm: ControlMatrix, current_limit: float = 1.0) -> dict[str, dict[str, float]]:
    """Max field along x, y, z for both modes, keyed ``{mode: {axis: T}}``."""
    out: dict[str, dict[str, float]] = {}
    for mode in Mode:
        out[mode.value] = {
            ax: max_field(cm, e, mode, current_limit) for ax, e in zip("xyz", np.eye(3))
        }
    return out


def fit_amps_per_unit(
    cm_per_amp: ControlMatrix,
    target: float,
    direction: ArrayLike = (0.0, 0.0, 1.0),
    mode: Mode | str = Mode.UNIFORM,
) -> float:
    """Amperes per unit current that make ``max_field`` along ``direction`` equal ``target`` (T).

    ``cm_per_amp`` must be expressed per ampere; max field scales linearly
    with the current limit, so a single evaluation suffices.
    """
    if target <= 0:
        raise ValueError("target field must be positive")
    per_amp = max_field(cm_per_amp, direction, mode, 1.0)
    return float(target / per_amp)


def conditioning(cm: ControlMatrix, rows: Rows | str = Rows.FIELD_ONLY) -> ConditioningReport:
    """Singular values (descending) and condition number of a row block."""
    a = cm.rows_field if Rows(rows) is Rows.FIELD_ONLY else cm.stacked
    s = np.linalg.svd(a, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        raise ValueError("conditioning of a zero matrix is undefined")
    smin = float(s[-1])
    cn = float(s[0] / smin) if smin > 0 else float("inf")
    return ConditioningReport(tuple(float(v) for v in s), smin, float(s[0]), cn)
