"""Workspace accessibility: the widest obstruction-free cone from a point.

Directions are sampled on a Fibonacci sphere lattice and tested for
occlusion by ray casting.  The accessibility is the apex angle of the
largest spherical cap that contains no occluded sample, found by taking,
for every free direction, the angular distance to the nearest occluded one.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from .magmodel import CoilArray

DEFAULT_RESOLUTION = 100_000
_EPS = 1e-15


class ObstructionKind(str, enum.Enum):
    FINITE_CYLINDER = "cylinder"
    SLAB = "slab"


def _unit(v: ArrayLike) -> NDArray[np.float64]:
    v = np.asarray(v, dtype=float).reshape(3)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero-length direction")
    return v / n


def _interval_quadratic(a, b, c):
    """Parameter interval where ``a t^2 + b t + c <= 0`` (``a >= 0``)."""
    lo = np.full(np.shape(b), -np.inf)
    hi = np.full(np.shape(b), np.inf)
    flat = a < _EPS
    empty = flat & (c > 0)
    disc = b * b - 4 * a * c
    empty |= ~flat & (disc < 0)
    root = np.sqrt(np.where(disc > 0, disc, 0.0))
    a_safe = np.where(flat, 1.0, a)
    lo = np.where(flat, lo, (-b - root) / (2 * a_safe))
    hi = np.where(flat, hi, (-b + root) / (2 * a_safe))
    return lo, hi, empty


def _interval_band(o, d, lower, upper):
    """Parameter interval where ``lower <= o + t d <= upper``."""
    flat = np.abs(d) < _EPS
    inside = (o >= lower) & (o <= upper)
    d_safe = np.where(flat, 1.0, d)
    t0 = (lower - o) / d_safe
    t1 = (upper - o) / d_safe
    lo = np.where(flat, -np.inf, np.minimum(t0, t1))
    hi = np.where(flat, np.inf, np.maximum(t0, t1))
    return lo, hi, flat & ~inside


@dataclass(frozen=True)
class FiniteCylinder:
    """Solid cylinder with flat end caps."""

    centroid: NDArray[np.float64]
    axis: NDArray[np.float64]
    radius: float
    length: float
    kind = ObstructionKind.FINITE_CYLINDER

    def __post_init__(self) -> None:
        if self.radius <= 0 or self.length <= 0:
            raise ValueError("cylinder radius and length must be positive")
        object.__setattr__(self, "centroid", np.asarray(self.centroid, dtype=float).reshape(3))
        object.__setattr__(self, "axis", _unit(self.axis))

    def hits(self, origin: ArrayLike, dirs: ArrayLike) -> NDArray[np.bool_]:
        o = np.asarray(origin, dtype=float).reshape(3) - self.centroid
        d = np.atleast_2d(np.asarray(dirs, dtype=float))
        w = self.axis
        oz = o @ w
        dz = d @ w
        o_perp = o - oz * w
        d_perp = d - dz[:, None] * w
        a = np.einsum("ij,ij->i", d_perp, d_perp)
        b = 2.0 * d_perp @ o_perp
        c = np.full(d.shape[0], o_perp @ o_perp - self.radius**2)
        r_lo, r_hi, r_empty = _interval_quadratic(a, b, c)
        z_lo, z_hi, z_empty = _interval_band(np.full(d.shape[0], oz), dz, -self.length / 2, self.length / 2)
        lo = np.maximum(np.maximum(r_lo, z_lo), 0.0)
        hi = np.minimum(r_hi, z_hi)
        return ~r_empty & ~z_empty & (lo <= hi) & (hi > 0)

    def contains(self, points: ArrayLike) -> NDArray[np.bool_]:
        q = np.atleast_2d(np.asarray(points, dtype=float)) - self.centroid
        along = q @ self.axis
        radial = np.linalg.norm(q - along[:, None] * self.axis, axis=1)
        return (np.abs(along) <= self.length / 2) & (radial <= self.radius)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "centroid_m": self.centroid.tolist(),
            "axis": self.axis.tolist(),
            "radius_m": self.radius,
            "length_m": self.length,
        }


@dataclass(frozen=True)
class Slab:
    """Horizontal band ``z_bottom <= z <= z_top``, optionally with a vertical circular hole."""

    z_top: float
    z_bottom: float
    hole_radius: float | None = None
    hole_center: tuple[float, float] = (0.0, 0.0)
    kind = ObstructionKind.SLAB

    def __post_init__(self) -> None:
        if self.z_top <= self.z_bottom:
            raise ValueError("slab thickness must be positive")
        if self.hole_radius is not None and self.hole_radius <= 0:
            raise ValueError("hole_radius must be positive")

    def hits(self, origin: ArrayLike, dirs: ArrayLike) -> NDArray[np.bool_]:
        o = np.asarray(origin, dtype=float).reshape(3)
        d = np.atleast_2d(np.asarray(dirs, dtype=float))
        s_lo, s_hi, s_empty = _interval_band(np.full(d.shape[0], o[2]), d[:, 2], self.z_bottom, self.z_top)
        s_lo = np.maximum(s_lo, 0.0)
        hit = ~s_empty & (s_lo <= s_hi) & (s_hi > 0)
        if self.hole_radius is None:
            return hit
        ox, oy = o[0] - self.hole_center[0], o[1] - self.hole_center[1]
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = 2.0 * (ox * d[:, 0] + oy * d[:, 1])
        c = np.full(d.shape[0], ox * ox + oy * oy - self.hole_radius**2)
        h_lo, h_hi, h_empty = _interval_quadratic(a, b, c)
        through_hole = ~h_empty & (h_lo <= s_lo) & (s_hi <= h_hi)
        return hit & ~through_hole

    def contains(self, points: ArrayLike) -> NDArray[np.bool_]:
        q = np.atleast_2d(np.asarray(points, dtype=float))
        inside = (q[:, 2] >= self.z_bottom) & (q[:, 2] <= self.z_top)
        if self.hole_radius is not None:
            rr = np.hypot(q[:, 0] - self.hole_center[0], q[:, 1] - self.hole_center[1])
            inside &= rr > self.hole_radius
        return inside

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "z_top_m": self.z_top,
            "z_bottom_m": self.z_bottom,
            "hole_radius_m": self.hole_radius,
            "hole_center_m": list(self.hole_center),
        }


Obstruction = FiniteCylinder | Slab


def obstruction_from_dict(d: dict) -> Obstruction:
    kind = ObstructionKind(d.get("kind", "cylinder"))
    if kind is ObstructionKind.FINITE_CYLINDER:
        return FiniteCylinder(np.asarray(d["centroid_m"]), np.asarray(d["axis"]), float(d["radius_m"]), float(d["length_m"]))
    hole = d.get("hole_radius_m")
    return Slab(float(d["z_top_m"]), float(d["z_bottom_m"]), None if hole is None else float(hole),
                tuple(d.get("hole_center_m", (0.0, 0.0))))


@dataclass(frozen=True)
class AccessibilityReport:
    apex_angle_deg: float
    axis: NDArray[np.float64]
    resolution: int

    def to_dict(self) -> dict:
        return {
            "apex_angle_deg": self.apex_angle_deg,
            "axis": np.asarray(self.axis).tolist(),
            "resolution": self.resolution,
        }


def ray_hits(obstruction: Obstruction, origin: ArrayLike, direction: ArrayLike) -> bool:
    """Whether the open ray ``origin + t * direction, t > 0`` enters the obstruction."""
    return bool(obstruction.hits(origin, np.asarray(direction, dtype=float).reshape(1, 3))[0])


def fibonacci_sphere(n: int) -> NDArray[np.float64]:
    """``n`` near-uniform unit vectors (golden-angle spiral)."""
    i = np.arange(n, dtype=float) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(n)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def lattice_spacing_deg(n: int) -> float:
    """Typical angular spacing of an ``n``-point lattice (degrees)."""
    return float(np.degrees(np.sqrt(4.0 * np.pi / n)))


def coil_obstructions(array: CoilArray, radius: float | None = None) -> list[FiniteCylinder]:
    """One cylinder per coil; the outer (winding) radius unless ``radius`` is given."""
    return [
        FiniteCylinder(c.centroid, c.axis, radius or c.geometry.outer_radius, c.geometry.length)
        for c in array.coils
    ]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MAGTABLE_THREADS", "1")))
    except ValueError:
        return 1


def accessibility(
    obstructions: Iterable[Obstruction],
    origin: ArrayLike = (0.0, 0.0, 0.0),
    resolution: int = DEFAULT_RESOLUTION,
) -> AccessibilityReport:
    """Apex angle (degrees) of the widest cone from ``origin`` missing every obstruction."""
    if resolution < 1000:
        raise ValueError("resolution must be at least 1000 directions")
    obstructions: Sequence[Obstruction] = list(obstructions)
    dirs = fibonacci_sphere(resolution)
    occluded = np.zeros(resolution, dtype=bool)
    for ob in obstructions:
        occluded |= ob.hits(origin, dirs)
    if not occluded.any():
        return AccessibilityReport(360.0, np.array([0.0, 0.0, 1.0]), resolution)
    if occluded.all():
        return AccessibilityReport(0.0, dirs[0], resolution)
    free = dirs[~occluded]
    tree = cKDTree(dirs[occluded])
    chord, _ = tree.query(free, k=1, workers=_threads())
    radius = 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))
    best = int(np.argmax(radius))
    apex = min(360.0, float(np.degrees(2.0 * radius[best])))
    return AccessibilityReport(apex, free[best], resolution)
