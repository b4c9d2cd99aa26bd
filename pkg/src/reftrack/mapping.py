"""Voxel occupancy grid with an exact Euclidean distance transform.

The mapper is fusion-based within an episode: occupancy only accumulates.
``compute_edt`` publishes an immutable snapshot (EdtMap) that planners query
while the grid keeps being written.  Distances use the voxel-center metric:
the distance between two voxels is resolution times the index distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import TrajectoryWindow, _as_points


@dataclass
class VoxelGrid:
    """Dense axis-aligned boolean occupancy grid."""

    origin: np.ndarray
    resolution: float
    dims: tuple
    occupancy: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        if not self.resolution > 0.0:
            raise ValueError("resolution must be positive")
        self.dims = tuple(int(d) for d in self.dims)
        if any(d <= 0 for d in self.dims):
            raise ValueError("dims must be positive")
        if self.occupancy is None:
            self.occupancy = np.zeros(self.dims, dtype=bool)
        elif self.occupancy.shape != self.dims:
            raise ValueError("occupancy shape does not match dims")

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        """Integer voxel indices of world points (may be out of bounds)."""
        return np.floor((np.atleast_2d(points) - self.origin)
                        / self.resolution).astype(int)

    def index_to_center(self, idx: np.ndarray) -> np.ndarray:
        return self.origin + (np.atleast_2d(idx) + 0.5) * self.resolution

    def in_bounds(self, idx: np.ndarray) -> np.ndarray:
        idx = np.atleast_2d(idx)
        ok = np.ones(len(idx), dtype=bool)
        for ax in range(3):
            ok &= (idx[:, ax] >= 0) & (idx[:, ax] < self.dims[ax])
        return ok

    def occupied_centers(self) -> np.ndarray:
        """Centers of all occupied voxels, in voxel-index (lexicographic) order."""
        idx = np.argwhere(self.occupancy)
        if len(idx) == 0:
            return np.zeros((0, 3))
        return self.index_to_center(idx)


@dataclass
class EdtMap:
    """Immutable distance snapshot: per-voxel distance to the nearest
    occupied voxel center, clamped at ``max_distance``."""

    grid: VoxelGrid
    distance: np.ndarray
    max_distance: float
    _occupied_centers: np.ndarray = None

    @property
    def occupied_centers(self) -> np.ndarray:
        if self._occupied_centers is None:
            self._occupied_centers = self.grid.occupied_centers()
        return self._occupied_centers


def insert_points(grid: VoxelGrid, points, sensor_origin,
                  update_range: float) -> VoxelGrid:
    """Mark the voxels containing ``points`` occupied.

    Points farther than ``update_range`` from the sensor, non-finite points
    and points outside the grid are ignored.  Mutates and returns ``grid``.
    """
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return grid
    pts = np.atleast_2d(pts)
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    if len(pts) == 0:
        return grid
    origin = np.asarray(sensor_origin, dtype=float).reshape(3)
    d = np.linalg.norm(pts - origin, axis=1)
    pts = pts[d <= update_range]
    if len(pts) == 0:
        return grid
    idx = grid.world_to_index(pts)
    idx = idx[grid.in_bounds(idx)]
    if len(idx):
        grid.occupancy[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return grid


def compute_edt(grid: VoxelGrid, max_distance: float = 5.0) -> EdtMap:
    """Exact EDT of the grid, clamped at ``max_distance``.

    An all-free grid yields ``max_distance`` everywhere.
    """
    if not grid.occupancy.any():
        dist = np.full(grid.dims, max_distance)
    else:
        dist = ndimage.distance_transform_edt(
            ~grid.occupancy, sampling=grid.resolution)
        np.minimum(dist, max_distance, out=dist)
    snapshot = VoxelGrid(grid.origin.copy(), grid.resolution, grid.dims,
                         grid.occupancy.copy())
    return EdtMap(grid=snapshot, distance=dist, max_distance=max_distance)


def query_distance(edt: EdtMap, p) -> float:
    """Distance at the voxel containing p; max_distance outside the grid."""
    idx = edt.grid.world_to_index(np.asarray(p, dtype=float))
    if not edt.grid.in_bounds(idx)[0]:
        return float(edt.max_distance)
    i, j, k = idx[0]
    return float(edt.distance[i, j, k])


def query_distances(edt: EdtMap, points: np.ndarray) -> np.ndarray:
    """Vectorized query_distance over (N, 3) points."""
    pts = _as_points(points)
    out = np.full(len(pts), edt.max_distance)
    idx = edt.grid.world_to_index(pts)
    ok = edt.grid.in_bounds(idx)
    if ok.any():
        sel = idx[ok]
        out[ok] = edt.distance[sel[:, 0], sel[:, 1], sel[:, 2]]
    return out


def close_in_obstacles(edt: EdtMap, win: TrajectoryWindow,
                       radius: float) -> np.ndarray:
    """Occupied voxel centers within ``radius`` (closed ball) of any window
    point, sorted by distance to the window's first point."""
    if not radius > 0.0:
        raise ValueError("radius must be positive")
    centers = edt.occupied_centers
    if len(centers) == 0:
        return np.zeros((0, 3))
    pts = win.points
    # Cheap bounding-box prefilter before the pairwise distances.
    lo = pts.min(axis=0) - radius
    hi = pts.max(axis=0) + radius
    keep = np.all((centers >= lo) & (centers <= hi), axis=1)
    centers = centers[keep]
    if len(centers) == 0:
        return np.zeros((0, 3))
    diff = centers[:, None, :] - pts[None, :, :]
    dmin = np.sqrt((diff ** 2).sum(axis=2)).min(axis=1)
    centers = centers[dmin <= radius]
    if len(centers) == 0:
        return np.zeros((0, 3))
    d0 = np.linalg.norm(centers - pts[0], axis=1)
    order = np.argsort(d0, kind="stable")
    return centers[order]
