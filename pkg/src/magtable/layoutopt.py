"""Gradient-descent optimization of electromagnet placement.

A layout of n coils is a flat vector ``[x.., y.., z.., beta.., gamma..]``
of length ``5n``.  The residual vector stacked from three groups of
functions is driven toward zero in the least-squares sense:

* field terms: scaled inverse of the largest field the array can produce
  along each principal axis at the workspace origin;
* height barriers: ``-log(-h / z0)`` of each coil-top height ``h``;
* proximity penalties: ``sigma / (D_ij - d)`` for every coil pair, with
  ``D_ij`` the minimum axis-to-axis separation.

The objective is half the sum of squares; the Jacobian of the residuals is
obtained by finite differences (central by default, forward on request).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .allocator import RANK_RTOL
from .magmodel import (
    DEFAULT_MOMENT_PER_AMP,
    MIN_DISTANCE,
    MU_0,
    Coil,
    CoilArray,
    CoilGeometry,
)

PARAM_GROUPS = ("x", "y", "z", "beta", "gamma")


class InfeasibleLayoutError(ValueError):
    """A layout violates the height barrier or the proximity constraint."""


class BarrierViolation(InfeasibleLayoutError):
    pass


class CollisionError(InfeasibleLayoutError):
    pass


class JacobianError(InfeasibleLayoutError):
    def __init__(self, message: str, parameter: str) -> None:
        super().__init__(message)
        self.parameter = parameter


class NoFeasibleStepError(RuntimeError):
    pass


def orientation_axis(beta: ArrayLike, gamma: ArrayLike) -> NDArray[np.float64]:
    """Unit axis from azimuth ``beta`` and polar angle ``gamma`` (last dim 3)."""
    beta = np.asarray(beta, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    sg = np.sin(gamma)
    return np.stack([sg * np.cos(beta), sg * np.sin(beta), np.cos(gamma)], axis=-1)


@dataclass(frozen=True)
class LayoutParams:
    """Packed layout vector ``[x1..xn, y1..yn, z1..zn, beta1..betan, gamma1..gamman]``."""

    vector: NDArray[np.float64]

    def __post_init__(self) -> None:
        v = np.array(self.vector, dtype=float).reshape(-1)
        if v.size == 0 or v.size % 5:
            raise ValueError(f"layout vector length must be a positive multiple of 5, got {v.size}")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @classmethod
    def pack(cls, x, y, z, beta, gamma) -> "LayoutParams":
        parts = [np.asarray(a, dtype=float).reshape(-1) for a in (x, y, z, beta, gamma)]
        if len({p.size for p in parts}) != 1:
            raise ValueError("all parameter groups must have the same length")
        return cls(np.concatenate(parts))

    def unpack(self) -> tuple[NDArray, NDArray, NDArray, NDArray, NDArray]:
        return tuple(self.vector.reshape(5, self.n).copy())  # type: ignore[return-value]

    @property
    def n(self) -> int:
        return self.vector.size // 5

    @property
    def positions(self) -> NDArray[np.float64]:
        return self.vector.reshape(5, self.n)[:3].T.copy()

    @property
    def axes(self) -> NDArray[np.float64]:
        v = self.vector.reshape(5, self.n)
        return orientation_axis(v[3], v[4])

    def parameter_name(self, k: int) -> str:
        return f"{PARAM_GROUPS[k // self.n]}_{k % self.n + 1}"

    @classmethod
    def from_array(cls, array: CoilArray) -> "LayoutParams":
        """Angles from coil axes.

        The azimuth of a vertical axis is undefined; it is set to the azimuth
        of the coil centroid so that tilting a symmetric layout stays
        symmetric.
        """
        pos = array.centroids
        ax = np.array([c.axis for c in array.coils])
        gamma = np.arccos(np.clip(ax[:, 2], -1.0, 1.0))
        horiz = np.hypot(ax[:, 0], ax[:, 1])
        beta = np.where(
            horiz > 1e-12,
            np.arctan2(ax[:, 1], ax[:, 0]),
            np.arctan2(pos[:, 1], pos[:, 0]),
        )
        return cls.pack(pos[:, 0], pos[:, 1], pos[:, 2], beta, gamma)

    def to_array(
        self,
        geometry: CoilGeometry | None = None,
        moment_per_amp: float = DEFAULT_MOMENT_PER_AMP,
        **kwargs,
    ) -> CoilArray:
        geometry = geometry or CoilGeometry()
        coils = tuple(
            Coil(p, a, moment_per_amp, geometry) for p, a in zip(self.positions, self.axes)
        )
        return CoilArray(coils, **kwargs)


@dataclass(frozen=True)
class OptimizerConfig:
    step: float = 0.001
    fd_step: float = 0.0001
    stop_tol: float = 1e-9
    max_iters: int = 200_000
    eps_field: float = 0.002
    sigma_prox: float = 0.001
    z0: float = 0.120
    table_plane_z: float = -0.120
    # Diameter used in the height relation and the proximity penalty;
    # None means the core diameter of the geometry.
    penalty_diameter: float | None = None
    moment_per_amp: float = DEFAULT_MOMENT_PER_AMP
    eval_point: tuple[float, float, float] = (0.0, 0.0, 0.0)
    max_halvings: int = 60
    # "central" or "forward".  The field terms take a max over coil currents,
    # which has kinks wherever symmetric coils tie; one-sided differences
    # there bias the gradient and break layout symmetry.
    fd_scheme: str = "central"

    def __post_init__(self) -> None:
        for name in ("step", "fd_step", "stop_tol", "eps_field", "sigma_prox", "z0", "moment_per_amp"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if self.penalty_diameter is not None and self.penalty_diameter <= 0:
            raise ValueError("penalty_diameter must be positive")
        if self.fd_scheme not in ("central", "forward"):
            raise ValueError(f"fd_scheme must be 'central' or 'forward', got {self.fd_scheme!r}")

    def diameter(self, geometry: CoilGeometry) -> float:
        return self.penalty_diameter if self.penalty_diameter is not None else geometry.core_diameter


@dataclass(frozen=True)
class AssociatedVector:
    m_funcs: NDArray[np.float64]
    h_funcs: NDArray[np.float64]
    p_funcs: NDArray[np.float64]
    objective: float

    @property
    def stacked(self) -> NDArray[np.float64]:
        return np.concatenate([self.m_funcs, self.h_funcs, self.p_funcs])

    def __len__(self) -> int:
        return self.m_funcs.size + self.h_funcs.size + self.p_funcs.size


class TraceRow(NamedTuple):
    iter: int
    F: float
    step: float
    max_coil_top_m: float
    min_surface_gap_m: float


def n_associated(n: int) -> int:
    return 3 + n * (n + 1) // 2


def _n_threads() -> int:
    try:
        return max(1, int(os.environ.get("MAGTABLE_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Geometry of the associated functions
# ---------------------------------------------------------------------------


def coil_top_height(z: ArrayLike, gamma: ArrayLike, l: float, d: float) -> NDArray[np.float64] | float:
    """Height of the highest point of a tilted cylinder with centroid height ``z``."""
    if l <= 0 or d <= 0:
        raise ValueError("l and d must be positive")
    h = np.asarray(z, dtype=float) + 0.5 * math.hypot(l, d) * np.sin(
        0.5 * np.pi - (np.asarray(gamma, dtype=float) - math.atan(d / l))
    )
    return float(h) if np.ndim(h) == 0 else h


def _point_segment(q, s, u, half):
    t = np.clip(np.einsum("...i,...i->...", q - s, u), -half, half)
    return np.linalg.norm(q - s - t[..., None] * u, axis=-1)


def segment_distances(si, ui, sj, uj, li, lj) -> NDArray[np.float64]:
    """Minimum distance between finite axis segments, vectorized over ``...``.

    Segments are given by centroid ``s``, unit direction ``u`` and length ``l``.
    The common perpendicular of the two lines is used when its feet land on
    both segments; otherwise the answer is the smallest endpoint-to-segment
    distance, which is exact for the clamped problem.
    """
    si, ui, sj, uj = (np.asarray(a, dtype=float) for a in (si, ui, sj, uj))
    hi = 0.5 * np.asarray(li, dtype=float) * np.ones(si.shape[:-1])
    hj = 0.5 * np.asarray(lj, dtype=float) * np.ones(sj.shape[:-1])
    w = sj - si
    lam = np.cross(ui, uj)
    nlam = np.linalg.norm(lam, axis=-1)
    skew = nlam > 1e-9
    safe = np.where(skew, nlam, 1.0)[..., None]
    lam_hat = lam / safe
    d_line = np.abs(np.einsum("...i,...i->...", lam_hat, w))
    lam_i = np.cross(ui, lam)
    lam_j = np.cross(uj, lam)
    den_i = np.einsum("...i,...i->...", ui, lam_j)
    den_j = np.einsum("...i,...i->...", uj, lam_i)
    den_i = np.where(skew, den_i, 1.0)
    den_j = np.where(skew, den_j, 1.0)
    ti = np.einsum("...i,...i->...", w, lam_j) / den_i
    tj = np.einsum("...i,...i->...", -w, lam_i) / den_j
    on_both = skew & (np.abs(ti) <= hi) & (np.abs(tj) <= hj)

    ends = np.stack(
        [
            _point_segment(si + hi[..., None] * ui, sj, uj, hj),
            _point_segment(si - hi[..., None] * ui, sj, uj, hj),
            _point_segment(sj + hj[..., None] * uj, si, ui, hi),
            _point_segment(sj - hj[..., None] * uj, si, ui, hi),
        ],
        axis=-1,
    ).min(axis=-1)
    return np.where(on_both, d_line, ends)


def cylinder_min_distance(coil_i: Coil, coil_j: Coil, method: str = "exact") -> float:
    """Minimum axis-to-axis separation (m) between two finite coils.

    ``method="endpoints"`` uses coarser fallbacks when a perpendicular foot
    is off its segment (endpoint pairs, or the on-segment foot against the
    other segment's endpoints), which can overestimate the distance.
    """
    si, ui, li = coil_i.centroid, coil_i.axis, coil_i.geometry.length
    sj, uj, lj = coil_j.centroid, coil_j.axis, coil_j.geometry.length
    if method == "exact":
        return float(segment_distances(si, ui, sj, uj, li, lj))
    if method != "endpoints":
        raise ValueError(f"unknown method {method!r}")
    hi, hj = li / 2, lj / 2
    lam = np.cross(ui, uj)
    if np.linalg.norm(lam) < 1e-9:
        return float(segment_distances(si, ui, sj, uj, li, lj))
    w = sj - si
    d_line = abs(lam @ w) / np.linalg.norm(lam)
    lam_i, lam_j = np.cross(ui, lam), np.cross(uj, lam)
    ci = si + (w @ lam_j) / (ui @ lam_j) * ui
    cj = sj + (-w @ lam_i) / (uj @ lam_i) * uj
    on_i = np.linalg.norm(ci - si) <= hi
    on_j = np.linalg.norm(cj - sj) <= hj
    if on_i and on_j:
        return float(d_line)
    if on_i:
        return float(min(np.linalg.norm(ci - (sj + sg * hj * uj)) for sg in (1, -1)))
    if on_j:
        return float(min(np.linalg.norm(cj - (si + sg * hi * ui)) for sg in (1, -1)))
    return float(
        min(
            np.linalg.norm((si + a * hi * ui) - (sj + b * hj * uj))
            for a in (1, -1)
            for b in (1, -1)
        )
    )


# ---------------------------------------------------------------------------
# Batched evaluation
# ---------------------------------------------------------------------------


@dataclass
class _Batch:
    m: NDArray  # (B, 3)
    h: NDArray  # (B, n)
    p: NDArray  # (B, n(n-1)/2)
    tops: NDArray  # (B, n)
    gaps: NDArray  # (B, pairs)
    failure: list[str | None] = field(default_factory=list)

    @property
    def stacked(self) -> NDArray:
        return np.concatenate([self.m, self.h, self.p], axis=1)


def _evaluate(X: NDArray, geometry: CoilGeometry, config: OptimizerConfig) -> _Batch:
    """Evaluate associated functions for a batch of layout vectors (B, 5n).

    Infeasible rows are reported in ``failure`` instead of raising, with the
    corresponding entries set to NaN.
    """
    X = np.atleast_2d(X)
    nb, n5 = X.shape
    n = n5 // 5
    v = X.reshape(nb, 5, n)
    pos = np.moveaxis(v[:, :3], 1, 2)  # (B, n, 3)
    axes = orientation_axis(v[:, 3], v[:, 4])  # (B, n, 3)
    d = config.diameter(geometry)
    l = geometry.length
    failure: list[str | None] = [None] * nb

    # Field terms.
    p0 = np.asarray(config.eval_point, dtype=float)
    r = p0 - pos
    dist = np.linalg.norm(r, axis=-1)
    too_close = (dist < MIN_DISTANCE).any(axis=1)
    dist_safe = np.where(dist < MIN_DISTANCE, 1.0, dist)
    rhat = r / dist_safe[..., None]
    mom = config.moment_per_amp * axes
    mdotr = np.einsum("bki,bki->bk", rhat, mom)
    bfield = (MU_0 / (4 * np.pi * dist_safe**3))[..., None] * (3 * rhat * mdotr[..., None] - mom)
    bblock = np.swapaxes(bfield, 1, 2)  # (B, 3, n)
    u, s, vt = np.linalg.svd(bblock, full_matrices=False)
    deficient = s[:, -1] <= RANK_RTOL * s[:, 0]
    s_inv = np.where(deficient[:, None], np.nan, 1.0 / np.where(s > 0, s, 1.0))
    pinv_b = np.einsum("bji,bj,bkj->bik", vt, s_inv, u)  # (B, n, 3)
    m = config.eps_field * np.max(np.abs(pinv_b), axis=1)

    # Height barriers.
    tops = coil_top_height(v[:, 2], v[:, 4], l, d)
    tops = np.asarray(tops).reshape(nb, n)
    above = (tops >= 0).any(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        h = -np.log(-tops / config.z0)

    # Proximity penalties.
    ii, jj = (np.array(t, dtype=int) for t in zip(*combinations(range(n), 2))) if n > 1 else (
        np.zeros(0, int),
        np.zeros(0, int),
    )
    dij = segment_distances(pos[:, ii], axes[:, ii], pos[:, jj], axes[:, jj], l, l)
    gaps = dij - d
    collide = (gaps <= 0).any(axis=1) if gaps.size else np.zeros(nb, bool)
    with np.errstate(divide="ignore"):
        p = config.sigma_prox / gaps

    for b in range(nb):
        if too_close[b]:
            failure[b] = "a coil centroid coincides with the field evaluation point"
        elif above[b]:
            k = int(np.argmax(tops[b]))
            failure[b] = f"coil {k + 1} top height {tops[b, k]:.6g} m is not below z = 0"
        elif collide[b]:
            k = int(np.argmin(gaps[b]))
            failure[b] = (
                f"coils {ii[k] + 1} and {jj[k] + 1} overlap (axis separation {dij[b, k]:.6g} m "
                f"<= diameter {d:.6g} m)"
            )
        elif deficient[b]:
            failure[b] = "field block at the evaluation point is rank deficient"
    return _Batch(m, h, p, tops, gaps, failure)


def _raise_for(batch: _Batch, row: int = 0) -> None:
    msg = batch.failure[row]
    if msg is None:
        return
    if "top height" in msg:
        raise BarrierViolation(msg)
    if "overlap" in msg:
        raise CollisionError(msg)
    raise InfeasibleLayoutError(msg)


def _as_vector(params: LayoutParams | ArrayLike) -> NDArray[np.float64]:
    if isinstance(params, LayoutParams):
        return params.vector
    return LayoutParams(params).vector


def m_funcs(
    params: LayoutParams,
    geometry: CoilGeometry,
    eval_point: ArrayLike = (0.0, 0.0, 0.0),
    config: OptimizerConfig | None = None,
) -> NDArray[np.float64]:
    """``eps_i * max|pinv(B) e_i|`` for the three principal axes at ``eval_point``."""
    config = replace(config or OptimizerConfig(), eval_point=tuple(np.asarray(eval_point, float)))
    batch = _evaluate(_as_vector(params)[None], geometry, config)
    msg = batch.failure[0]
    if msg is not None and ("rank" in msg or "coincides" in msg):
        raise InfeasibleLayoutError(msg)
    return batch.m[0]


def h_funcs(params: LayoutParams, geometry: CoilGeometry, config: OptimizerConfig | None = None) -> NDArray[np.float64]:
    """Height barriers ``-log(-h/z0)``; zero when a coil top sits at ``-z0``."""
    config = config or OptimizerConfig()
    v = _as_vector(params).reshape(5, -1)
    tops = np.asarray(coil_top_height(v[2], v[4], geometry.length, config.diameter(geometry)))
    if (tops >= 0).any():
        k = int(np.argmax(tops))
        raise BarrierViolation(f"coil {k + 1} top height {tops[k]:.6g} m is not below z = 0")
    return -np.log(-tops / config.z0)


def p_funcs(params: LayoutParams, geometry: CoilGeometry, config: OptimizerConfig | None = None) -> NDArray[np.float64]:
    """Proximity penalties ``sigma / (D_ij - d)`` over pairs ``i < j``."""
    config = config or OptimizerConfig()
    lp = params if isinstance(params, LayoutParams) else LayoutParams(params)
    pos, axes = lp.positions, lp.axes
    d = config.diameter(geometry)
    pairs = list(combinations(range(lp.n), 2))
    out = np.empty(len(pairs))
    for k, (i, j) in enumerate(pairs):
        dij = float(segment_distances(pos[i], axes[i], pos[j], axes[j], geometry.length, geometry.length))
        if dij <= d:
            raise CollisionError(
                f"coils {i + 1} and {j + 1} overlap (axis separation {dij:.6g} m <= diameter {d:.6g} m)"
            )
        out[k] = config.sigma_prox / (dij - d)
    return out


def objective(
    params: LayoutParams, geometry: CoilGeometry, config: OptimizerConfig | None = None
) -> tuple[AssociatedVector, float]:
    config = config or OptimizerConfig()
    batch = _evaluate(_as_vector(params)[None], geometry, config)
    _raise_for(batch)
    g = batch.stacked[0]
    f = 0.5 * float(g @ g)
    return AssociatedVector(batch.m[0], batch.h[0], batch.p[0], f), f


def _evaluate_parallel(X: NDArray, geometry: CoilGeometry, config: OptimizerConfig, threads: int) -> _Batch:
    if threads <= 1 or X.shape[0] < 2 * threads:
        return _evaluate(X, geometry, config)
    chunks = np.array_split(np.arange(X.shape[0]), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda idx: _evaluate(X[idx], geometry, config), chunks))
    return _Batch(
        np.concatenate([p.m for p in parts]),
        np.concatenate([p.h for p in parts]),
        np.concatenate([p.p for p in parts]),
        np.concatenate([p.tops for p in parts]),
        np.concatenate([p.gaps for p in parts]),
        [f for p in parts for f in p.failure],
    )


def _jacobian_from(x: NDArray, g0: NDArray, geometry, config, threads) -> NDArray:
    k = x.size
    h = config.fd_step
    steps = h * np.eye(k)
    central = config.fd_scheme == "central"
    X = np.vstack([x + steps, x - steps]) if central else x + steps
    batch = _evaluate_parallel(X, geometry, config, threads)
    for row, msg in enumerate(batch.failure):
        if msg is not None:
            name = LayoutParams(x).parameter_name(row % k)
            sign = "+" if row < k else "-"
            raise JacobianError(f"perturbation {name} {sign}{h:g} is infeasible: {msg}", name)
    g = batch.stacked
    if central:
        return (g[:k] - g[k:]).T / (2.0 * h)
    return (g - g0[None, :]).T / h


def numerical_jacobian(
    params: LayoutParams,
    geometry: CoilGeometry,
    config: OptimizerConfig | None = None,
    threads: int | None = None,
) -> NDArray[np.float64]:
    """Finite-difference Jacobian (N, 5n) of the stacked associated functions.

    Uses step ``config.fd_step`` with the scheme chosen by ``config.fd_scheme``.
    """
    config = config or OptimizerConfig()
    x = _as_vector(params)
    base = _evaluate(x[None], geometry, config)
    _raise_for(base)
    return _jacobian_from(x, base.stacked[0], geometry, config, threads or _n_threads())


# ---------------------------------------------------------------------------
# Descent
# ---------------------------------------------------------------------------


def project_below_plane(
    params: LayoutParams, geometry: CoilGeometry, config: OptimizerConfig | None = None
) -> LayoutParams:
    """Lower every coil whose top is above the table plane to 1 mm below ``-z0``."""
    config = config or OptimizerConfig()
    x, y, z, beta, gamma = params.unpack()
    tops = np.asarray(coil_top_height(z, gamma, geometry.length, config.diameter(geometry)))
    target = -config.z0 - 0.001
    above = tops > config.table_plane_z
    z = np.where(above, z - (tops - target), z)
    return LayoutParams.pack(x, y, z, beta, gamma)


def _trace_row(it: int, f: float, step: float, batch: _Batch) -> TraceRow:
    gap = float(batch.gaps[0].min()) if batch.gaps.size else float("inf")
    return TraceRow(it, f, step, float(batch.tops[0].max()), gap)


def descend(
    initial: LayoutParams,
    geometry: CoilGeometry | None = None,
    config: OptimizerConfig | None = None,
    threads: int | None = None,
) -> tuple[LayoutParams, list[TraceRow]]:
    """Fixed-step gradient descent with backtracking.

    Each iteration tries ``x - eta * J^T G`` starting from the configured step;
    the step is halved while the candidate is infeasible or raises the
    objective.  Iteration stops once a candidate changes the objective by less
    than ``stop_tol`` (that candidate is not taken) or after ``max_iters``.

    Raises:
        InfeasibleLayoutError: the initial layout violates a barrier.
        NoFeasibleStepError: no acceptable step after ``max_halvings`` halvings.
    """
    geometry = geometry or CoilGeometry()
    config = config or OptimizerConfig()
    threads = threads or _n_threads()
    x = _as_vector(initial).copy()
    batch = _evaluate(x[None], geometry, config)
    _raise_for(batch)
    g = batch.stacked[0]
    f = 0.5 * float(g @ g)
    trace = [_trace_row(0, f, 0.0, batch)]

    for it in range(1, config.max_iters + 1):
        jac = _jacobian_from(x, g, geometry, config, threads)
        grad = jac.T @ g
        eta = config.step
        for _ in range(config.max_halvings + 1):
            cand = x - eta * grad
            cb = _evaluate(cand[None], geometry, config)
            if cb.failure[0] is None:
                gc = cb.stacked[0]
                fc = 0.5 * float(gc @ gc)
                if fc <= f:
                    break
            eta *= 0.5
        else:
            raise NoFeasibleStepError(
                f"no feasible descent step at iteration {it} after {config.max_halvings} halvings"
            )
        if abs(f - fc) < config.stop_tol:
            break
        x, g, f = cand, gc, fc
        trace.append(_trace_row(it, f, eta, cb))
    return LayoutParams(x), trace


def random_layout(
    n: int,
    seed: int,
    geometry: CoilGeometry | None = None,
    config: OptimizerConfig | None = None,
    max_tries: int = 100_000,
) -> LayoutParams:
    """Seeded random feasible layout below the table plane."""
    geometry = geometry or CoilGeometry()
    config = config or OptimizerConfig()
    rng = np.random.default_rng(seed)
    d = config.diameter(geometry)
    for _ in range(max_tries):
        x = rng.uniform(-0.35, 0.35, n)
        y = rng.uniform(-0.35, 0.35, n)
        beta = rng.uniform(0.0, 2 * np.pi, n)
        gamma = rng.uniform(0.0, 0.5 * np.pi, n)
        top = rng.uniform(config.table_plane_z - 0.12, config.table_plane_z - 0.005, n)
        z = top - (np.asarray(coil_top_height(0.0 * top, gamma, geometry.length, d)))
        lp = LayoutParams.pack(x, y, z, beta, gamma)
        if _evaluate(lp.vector[None], geometry, config).failure[0] is None:
            return lp
    raise RuntimeError(f"no feasible random layout found in {max_tries} tries")
