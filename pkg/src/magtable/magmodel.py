"""Point-dipole physics for electromagnets and electromagnet arrays.

Each coil is modelled as a magnetic dipole sitting at the centroid of its
core, with a moment proportional to the (normalized) coil current.  Fields
from several coils superimpose linearly, so everything below reduces to
evaluating per-coil unit maps and multiplying by a current vector.

Gradients are stored as five independent components in the order
``[dBx/dx, dBx/dy, dBx/dz, dBy/dy, dBy/dz]``; the full 3x3 matrix is
symmetric and traceless in a current-free region.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

# Vacuum permeability (T*m/A), pre-2019 exact value.
MU_0: float = 4.0 * np.pi * 1e-7

# Dipole model is not evaluated closer than this to a source (m).
MIN_DISTANCE: float = 1e-3

# Moment per unit normalized current (A*m^2).  Gives 63.8 mT on axis at
# 0.300 m from the centroid, i.e. 120 mm above the face of a 360 mm coil.
DEFAULT_MOMENT_PER_AMP: float = 0.0638 * 0.300**3 / (MU_0 / (2.0 * np.pi))

DEFAULT_GRIP_RADIUS: float = 0.010

# (row, col) of each stored gradient component in the 3x3 matrix.
GRADIENT_INDEX: tuple[tuple[int, int], ...] = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2))


class SingularityError(ValueError):
    """Raised when a field is requested at (or too near) a dipole source."""

    def __init__(self, message: str, coil_index: int | None = None) -> None:
        super().__init__(message)
        self.coil_index = coil_index


def _vec3(value: ArrayLike, name: str) -> NDArray[np.float64]:
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr}")
    return arr


@dataclass(frozen=True)
class CoilGeometry:
    """Cylindrical electromagnet dimensions (m)."""

    core_radius: float = 0.045
    winding_thickness: float = 0.0225
    length: float = 0.360

    def __post_init__(self) -> None:
        if self.core_radius <= 0 or self.length <= 0:
            raise ValueError("core_radius and length must be positive")
        if self.winding_thickness < 0:
            raise ValueError("winding_thickness must be non-negative")

    @property
    def aspect_ratio(self) -> float:
        return self.length / self.core_radius

    @property
    def outer_radius(self) -> float:
        return self.core_radius + self.winding_thickness

    @property
    def core_diameter(self) -> float:
        return 2.0 * self.core_radius


@dataclass(frozen=True)
class Coil:
    """One electromagnet: a dipole at ``centroid`` pointing along ``axis``.

    The axis is normalized on construction.  A negative current reverses the
    moment; ``moment_per_amp`` itself must be positive.
    """

    centroid: NDArray[np.float64]
    axis: NDArray[np.float64]
    moment_per_amp: float = DEFAULT_MOMENT_PER_AMP
    geometry: CoilGeometry = field(default_factory=CoilGeometry)

    def __post_init__(self) -> None:
        centroid = _vec3(self.centroid, "centroid")
        axis = _vec3(self.axis, "axis")
        norm = np.linalg.norm(axis)
        if norm == 0.0:
            raise ValueError("coil axis must be non-zero")
        if self.moment_per_amp <= 0:
            raise ValueError("moment_per_amp must be positive")
        centroid.setflags(write=False)
        axis = axis / norm
        axis.setflags(write=False)
        object.__setattr__(self, "centroid", centroid)
        object.__setattr__(self, "axis", axis)

    @property
    def unit_moment(self) -> NDArray[np.float64]:
        """Dipole moment at unit normalized current (A*m^2)."""
        return self.moment_per_amp * self.axis


@dataclass(frozen=True)
class CoilArray:
    """Ordered coils sharing one workspace frame.

    Coil ``j`` maps to control-matrix column ``j``.  Currents are normalized
    so that ``current_limit`` (default 1.0) is the maximum operating current;
    ``amps_per_unit`` optionally converts normalized current to amperes.
    """

    coils: tuple[Coil, ...]
    current_limit: float = 1.0
    amps_per_unit: float | None = None

    def __post_init__(self) -> None:
        coils = tuple(self.coils)
        if len(coils) < 1:
            raise ValueError("a coil array needs at least one coil")
        if self.current_limit <= 0:
            raise ValueError("current_limit must be positive")
        if self.amps_per_unit is not None and self.amps_per_unit <= 0:
            raise ValueError("amps_per_unit must be positive")
        object.__setattr__(self, "coils", coils)

    def __len__(self) -> int:
        return len(self.coils)

    @property
    def centroids(self) -> NDArray[np.float64]:
        return np.array([c.centroid for c in self.coils])

    @property
    def unit_moments(self) -> NDArray[np.float64]:
        return np.array([c.unit_moment for c in self.coils])

    def scaled(self, factor: float) -> "CoilArray":
        """Same layout with every ``moment_per_amp`` multiplied by ``factor``."""
        coils = tuple(
            Coil(c.centroid, c.axis, c.moment_per_amp * factor, c.geometry) for c in self.coils
        )
        return CoilArray(coils, self.current_limit, self.amps_per_unit)


@dataclass(frozen=True)
class FieldState:
    """Flux density ``b`` (T) and the five stored gradient components ``g`` (T/m)."""

    b: NDArray[np.float64]
    g: NDArray[np.float64]

    def __post_init__(self) -> None:
        b = np.array(self.b, dtype=float).reshape(3)
        g = np.array(self.g, dtype=float).reshape(5)
        b.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "g", g)

    @classmethod
    def zero(cls) -> "FieldState":
        return cls(np.zeros(3), np.zeros(5))

    def gradient_matrix(self) -> NDArray[np.float64]:
        return gradient_matrix(self.g)

    def __add__(self, other: "FieldState") -> "FieldState":
        return FieldState(self.b + other.b, self.g + other.g)

    def __mul__(self, k: float) -> "FieldState":
        return FieldState(self.b * k, self.g * k)

    __rmul__ = __mul__


@dataclass(frozen=True)
class DipoleTool:
    """A small permanent magnet embedded in a tool."""

    position: NDArray[np.float64]
    moment: NDArray[np.float64]

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", _vec3(self.position, "position"))
        object.__setattr__(self, "moment", _vec3(self.moment, "moment"))


def gradient_matrix(g: ArrayLike) -> NDArray[np.float64]:
    """Rebuild the symmetric traceless 3x3 gradient from its 5 stored components."""
    gxx, gxy, gxz, gyy, gyz = np.asarray(g, dtype=float).reshape(5)
    return np.array(
        [
            [gxx, gxy, gxz],
            [gxy, gyy, gyz],
            [gxz, gyz, -gxx - gyy],
        ]
    )


def gradient_vector(gmat: ArrayLike) -> NDArray[np.float64]:
    """Extract the stored 5 components from a 3x3 gradient matrix (no projection)."""
    gmat = np.asarray(gmat, dtype=float)
    return np.array([gmat[i, j] for i, j in GRADIENT_INDEX])


def _separation(sources: NDArray, p: NDArray) -> tuple[NDArray, NDArray]:
    r = p[None, :] - sources
    dist = np.linalg.norm(r, axis=1)
    bad = np.flatnonzero(dist < MIN_DISTANCE)
    if bad.size:
        j = int(bad[0])
        raise SingularityError(
            f"evaluation point {p.tolist()} is {dist[j]:.3g} m from dipole source {j}; "
            f"the dipole model is not valid closer than {MIN_DISTANCE} m",
            coil_index=j,
        )
    return r, dist


def dipole_fields(sources: ArrayLike, moments: ArrayLike, p: ArrayLike) -> NDArray[np.float64]:
    """Fields (n, 3) of n dipoles at one point ``p``."""
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    moments = np.atleast_2d(np.asarray(moments, dtype=float))
    p = _vec3(p, "p")
    r, dist = _separation(sources, p)
    rhat = r / dist[:, None]
    mdotr = np.einsum("ij,ij->i", rhat, moments)
    k = MU_0 / (4.0 * np.pi * dist**3)
    return k[:, None] * (3.0 * rhat * mdotr[:, None] - moments)


def dipole_gradient_matrices(
    sources: ArrayLike, moments: ArrayLike, p: ArrayLike
) -> NDArray[np.float64]:
    """Full 3x3 spatial gradients (n, 3, 3) of n dipoles at ``p``.

    ``out[k, i, j] = dB_i/dx_j`` for source ``k``.
    """
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    moments = np.atleast_2d(np.asarray(moments, dtype=float))
    p = _vec3(p, "p")
    r, dist = _separation(sources, p)
    rhat = r / dist[:, None]
    mdotr = np.einsum("ij,ij->i", rhat, moments)
    k = 3.0 * MU_0 / (4.0 * np.pi * dist**4)
    eye = np.eye(3)
    outer_mr = np.einsum("ki,kj->kij", moments, rhat)
    outer_rr = np.einsum("ki,kj->kij", rhat, rhat)
    gm = (
        outer_mr
        + np.swapaxes(outer_mr, 1, 2)
        + mdotr[:, None, None] * (eye[None] - 5.0 * outer_rr)
    )
    return k[:, None, None] * gm


def dipole_field(source_pos: ArrayLike, moment: ArrayLike, p: ArrayLike) -> NDArray[np.float64]:
    """Flux density (T) at ``p`` of a point dipole ``moment`` at ``source_pos``.

    Raises:
        SingularityError: if ``p`` is within 1 mm of the source.
    """
    return dipole_fields(_vec3(source_pos, "source_pos"), _vec3(moment, "moment"), p)[0]


def dipole_gradient(source_pos: ArrayLike, moment: ArrayLike, p: ArrayLike) -> NDArray[np.float64]:
    """Analytic spatial gradient of :func:`dipole_field`, as the stored 5-vector (T/m)."""
    gmat = dipole_gradient_matrices(_vec3(source_pos, "source_pos"), _vec3(moment, "moment"), p)[0]
    return gradient_vector(gmat)


def unit_field_maps(
    array: CoilArray, p: ArrayLike
) -> list[tuple[NDArray[np.float64], NDArray[np.float64]]]:
    """Per-coil field and gradient at ``p`` for unit normalized current."""
    b, g = unit_field_matrices(array, p)
    return [(b[:, j].copy(), g[:, j].copy()) for j in range(len(array))]


def unit_field_matrices(array: CoilArray, p: ArrayLike) -> tuple[NDArray, NDArray]:
    """Column-stacked unit maps: field block (3, n) and gradient block (5, n)."""
    b = dipole_fields(array.centroids, array.unit_moments, p)
    gm = dipole_gradient_matrices(array.centroids, array.unit_moments, p)
    g = np.stack([gm[:, i, j] for i, j in GRADIENT_INDEX], axis=0)
    return b.T.copy(), g


def array_field(array: CoilArray, currents: ArrayLike, p: ArrayLike) -> FieldState:
    """Superposed field state of the whole array for ``currents`` (normalized)."""
    currents = np.asarray(currents, dtype=float).reshape(-1)
    if currents.shape[0] != len(array):
        raise ValueError(f"expected {len(array)} currents, got {currents.shape[0]}")
    b, g = unit_field_matrices(array, p)
    return FieldState(b @ currents, g @ currents)


def force_on_dipole(tool: DipoleTool, field_state: FieldState) -> NDArray[np.float64]:
    """Force (N) on a tool magnet; ``grad(B . m)`` reduces to ``G m`` in free space."""
    return field_state.gradient_matrix() @ tool.moment


def torque_on_dipole(tool: DipoleTool, field_state: FieldState) -> NDArray[np.float64]:
    """Torque (N*m), ``m x B``."""
    return np.cross(tool.moment, field_state.b)


def grip_force(f_x: float, tau_y: float, r_grip: float = DEFAULT_GRIP_RADIUS) -> float:
    """Grasping force (N) with the jaw torque folded in over the finger length ``r_grip``."""
    if r_grip <= 0:
        raise ValueError(f"r_grip must be positive, got {r_grip}")
    return f_x + tau_y / r_grip


def coil_array_from_positions(
    positions: Sequence[Sequence[float]],
    axes: Sequence[Sequence[float]] | None = None,
    moment_per_amp: float = DEFAULT_MOMENT_PER_AMP,
    geometry: CoilGeometry | None = None,
    **kwargs,
) -> CoilArray:
    """Convenience builder; axes default to +z."""
    geometry = geometry or CoilGeometry()
    if axes is None:
        axes = [(0.0, 0.0, 1.0)] * len(positions)
    coils = tuple(Coil(np.asarray(p), np.asarray(a), moment_per_amp, geometry) for p, a in zip(positions, axes))
    return CoilArray(coils, **kwargs)
