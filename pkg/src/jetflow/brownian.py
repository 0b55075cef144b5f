"""Brownian paths on time grids with Brownian-bridge refinement.

Randomness comes from a counter-based Philox generator keyed by
``(seed, sample_index)``. Refinement generation ``g`` reads its own counter
block, so a sample's increments never depend on how many other samples are
generated alongside it or in which order. Gaussians are produced by
inverse-CDF transform of 53-bit uniforms.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtri

from .errors import GridError

RNG_ID = "philox4x64-10/inverse-cdf"

_MATCH_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing times ``0 = t_0 < ... < t_N = T``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise GridError("a time grid needs at least two points")
        if pts[0] != 0.0:
            raise GridError("a time grid must start at 0")
        if not np.all(np.diff(pts) > 0):
            raise GridError("time grid points must be strictly increasing")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.points)

    @property
    def max_step(self) -> float:
        return float(self.steps.max())

    @property
    def n_steps(self) -> int:
        return self.points.size - 1

    @property
    def T(self) -> float:
        return float(self.points[-1])

    def __len__(self):
        return self.points.size

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    def locate(self, other: "TimeGrid") -> np.ndarray:
        """Indices in ``self`` of every point of ``other``.

        Raises :class:`GridError` unless ``other`` is a subset of ``self``
        (up to a relative tolerance of 1e-12 of ``T``).
        """
        idx = np.searchsorted(self.points, other.points)
        idx = np.clip(idx, 0, self.points.size - 1)
        left = np.clip(idx - 1, 0, None)
        closer = np.abs(self.points[left] - other.points) < np.abs(self.points[idx] - other.points)
        idx = np.where(closer, left, idx)
        tol = _MATCH_RTOL * max(self.T, other.T)
        if np.any(np.abs(self.points[idx] - other.points) > tol):
            raise GridError("grid is not a refinement of the path's grid")
        return idx

    def describe(self) -> dict:
        uniform = np.allclose(self.steps, self.steps[0], rtol=1e-12, atol=0.0)
        return {"T": self.T, "N": self.n_steps, "max_step": self.max_step, "uniform": bool(uniform)}


def uniform_grid(T: float, N: int) -> TimeGrid:
    """``N + 1`` equally spaced points on ``[0, T]``.

    Points are computed as ``T * (i / N)`` so that grids whose step counts
    divide one another share bit-identical points.
    """
    if not T > 0:
        raise GridError("T must be positive")
    if int(N) != N or N < 1:
        raise GridError("N must be a positive integer")
    N = int(N)
    return TimeGrid(T * (np.arange(N + 1) / N))


def _uniforms(seed: int, sample: int, generation: int, count: int) -> np.ndarray:
    bitgen = np.random.Philox(key=[seed, sample], counter=[0, 0, generation, 0])
    raw = bitgen.random_raw(count)
    return ((raw >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53


def standard_normals(seed: int, samples, generation: int, shape) -> np.ndarray:
    """Standard normals of ``shape`` for each sample index, shape ``(P, *shape)``."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    shape = tuple(shape)
    count = int(np.prod(shape))
    out = np.empty((len(samples), count))
    for row, sample in enumerate(samples):
        out[row] = _uniforms(seed, int(sample), generation, count)
    return ndtri(out).reshape((len(samples),) + shape)


@dataclass(frozen=True, eq=False)
class BrownianPath:
    """A k-dimensional Brownian path sampled on a grid.

    ``values`` has shape ``(N + 1, k)`` for a single path, or
    ``(P, N + 1, k)`` for a batch of ``P`` independent paths whose sample
    indices are ``first_sample, ..., first_sample + P - 1``.
    """

    grid: TimeGrid
    values: np.ndarray
    seed: int
    first_sample: int = 0
    generation: int = 0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim not in (2, 3) or vals.shape[-2] != len(self.grid):
            raise GridError("path values do not match the grid length")
        if np.any(vals[..., 0, :] != 0.0):
            raise ValueError("a Brownian path must start at zero")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def batched(self) -> bool:
        return self.values.ndim == 3

    @property
    def n_paths(self) -> int:
        return self.values.shape[0] if self.batched else 1

    @property
    def dim_noise(self) -> int:
        return self.values.shape[-1]

    @property
    def increments(self) -> np.ndarray:
        """``delta W_i`` along the time axis, shape ``(..., N, k)``."""
        return np.diff(self.values, axis=-2)

    @property
    def samples(self) -> np.ndarray:
        return self.first_sample + np.arange(self.n_paths)

    def restrict(self, grid: TimeGrid) -> "BrownianPath":
        """The same path observed only on a coarser ``grid``."""
        idx = self.grid.locate(grid)
        return BrownianPath(grid, self.values[..., idx, :], self.seed, self.first_sample, self.generation)

    def path(self, i: int) -> "BrownianPath":
        """Single path ``i`` of a batch."""
        if not self.batched:
            return self
        return BrownianPath(self.grid, self.values[i], self.seed, self.first_sample + i, self.generation)

    def to_csv(self, filename) -> None:
        """Write columns ``t, W1..Wk`` for a single path."""
        if self.batched:
            raise ValueError("CSV export is defined for single paths only")
        with open(filename, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t"] + [f"W{a + 1}" for a in range(self.dim_noise)])
            for t, w in zip(self.grid.points, self.values):
                writer.writerow([repr(float(t))] + [repr(float(x)) for x in w])


def sample_path(grid: TimeGrid, dim_noise: int, seed: int, n_paths: Optional[int] = None,
                first_sample: int = 0) -> BrownianPath:
    """Sample Brownian path(s) on ``grid``.

    With ``n_paths=None`` a single path for sample ``first_sample`` is
    returned; otherwise a batch. Sample ``i`` of a batch is identical to the
    single path drawn with ``first_sample=i``.
    """
    if dim_noise < 1:
        raise ValueError("dim_noise must be at least 1")
    count = 1 if n_paths is None else int(n_paths)
    samples = first_sample + np.arange(count)
    z = standard_normals(seed, samples, 0, (grid.n_steps, dim_noise))
    dw = z * np.sqrt(grid.steps)[None, :, None]
    values = np.concatenate([np.zeros((count, 1, dim_noise)), np.cumsum(dw, axis=1)], axis=1)
    if n_paths is None:
        values = values[0]
    return BrownianPath(grid, values, seed, first_sample, 0)


def refine(path: BrownianPath, new_grid: TimeGrid) -> BrownianPath:
    """Fill in ``new_grid`` by sampling the Brownian bridge between known points.

    Values at points already on ``path.grid`` are copied unchanged. New
    points are drawn left to right within each old interval, conditional on
    the nearest known values on either side.
    """
    old_idx = new_grid.locate(path.grid)
    if len(new_grid) == len(path.grid):
        return BrownianPath(new_grid, path.values.copy(), path.seed, path.first_sample, path.generation)

    values = path.values if path.batched else path.values[None]
    n_paths, _, k = values.shape
    out = np.full((n_paths, len(new_grid), k), np.nan)
    out[:, old_idx, :] = values

    is_old = np.zeros(len(new_grid), dtype=bool)
    is_old[old_idx] = True
    if not is_old[-1]:
        raise GridError("refinement may not extend the path beyond its final time")
    new_points = np.flatnonzero(~is_old)
    generation = path.generation + 1
    z = standard_normals(path.seed, path.samples, generation, (new_points.size, k))

    # index of the next old point to the right of every grid position
    right_of = np.empty(len(new_grid), dtype=int)
    nxt = len(new_grid) - 1
    for j in range(len(new_grid) - 1, -1, -1):
        if is_old[j]:
            nxt = j
        right_of[j] = nxt

    t = new_grid.points
    for col, j in enumerate(new_points):
        left, right = j - 1, right_of[j]
        span = t[right] - t[left]
        weight = (t[j] - t[left]) / span
        std = np.sqrt((t[j] - t[left]) * (t[right] - t[j]) / span)
        out[:, j, :] = out[:, left, :] + weight * (out[:, right, :] - out[:, left, :]) + std * z[:, col, :]

    if not path.batched:
        out = out[0]
    return BrownianPath(new_grid, out, path.seed, path.first_sample, generation)


def union_grid(grids) -> TimeGrid:
    """Smallest grid containing every point of ``grids`` (which must share ``T``).

    Points closer than the matching tolerance are merged, keeping the first
    in sorted order.
    """
    grids = list(grids)
    if not grids:
        raise GridError("at least one grid is required")
    T = grids[0].T
    if any(abs(g.T - T) > _MATCH_RTOL * T for g in grids):
        raise GridError("grids must share the same final time")
    pts = np.sort(np.concatenate([g.points for g in grids]))
    keep = np.concatenate([[True], np.diff(pts) > _MATCH_RTOL * T])
    pts = pts[keep]
    pts[-1] = T
    return TimeGrid(pts)


def common_path(grids, dim_noise: int, seed: int, first_sample: int = 0) -> list[BrownianPath]:
    """One Brownian sample restricted to each of ``grids``.

    The sample is drawn on the coarsest grid and bridge-refined to the union
    of all grids, so every grid sees the same underlying path even when the
    grids are not nested.
    """
    grids = list(grids)
    base = min(grids, key=len)
    full = refine(sample_path(base, dim_noise, seed, first_sample=first_sample), union_grid(grids))
    return [full.restrict(g) for g in grids]
