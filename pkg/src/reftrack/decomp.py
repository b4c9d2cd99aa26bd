"""Convex decomposition of free space around trajectory segments.

Each segment gets an H-rep polyhedron {x : A x <= b} that contains both
endpoints, excludes every obstacle point near the segment and stays inside a
local bounding box.  Construction: an ellipsoid seeded on the segment is
shrunk transversally until no obstacle is inside it, then tangent half-spaces
are added at ellipsoid-metric-nearest obstacles until all are cut away.

Everything here is a pure function of its inputs; ``decompose_parallel`` maps
the kernel over segments with input-order assembly, so results are identical
for any worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .mapping import EdtMap

# Violating rows are shifted inward by this much so excluded points violate
# strictly; segment endpoints keep a larger margin by construction.
_EXCLUDE_EPS = 1e-9
# Obstacles closer than this to the segment leave no corridor.
_SEGMENT_EPS = 1e-6
# Along-axis padding of the seed ellipsoid beyond the segment half-length.
_AXIS_PAD = 1e-3


class InfeasibleSegment(Exception):
    """No separating corridor exists for a segment."""

    def __init__(self, message: str, segment_index: int = None):
        super().__init__(message)
        self.segment_index = segment_index


@dataclass
class Polyhedron:
    """H-representation {x : A x <= b} with unit-norm outward rows."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if self.A.shape != (len(self.b), 3):
            raise ValueError("A must be (m, 3) matching b")
        norms = np.linalg.norm(self.A, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("rows of A must have unit norm")

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all(pts @ self.A.T <= self.b + tol, axis=1)

    def violation(self, points) -> np.ndarray:
        """Max over rows of A x - b, per point (<= 0 means inside)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return (pts @ self.A.T - self.b).max(axis=1)

    def dump_csv(self) -> str:
        lines = [f"{a[0]:.17g} {a[1]:.17g} {a[2]:.17g} {bi:.17g}"
                 for a, bi in zip(self.A, self.b)]
        return "\n".join(lines) + "\n"


@dataclass
class CorridorSegment:
    """A segment bundled with its free-space polyhedron."""

    start: np.ndarray
    end: np.ndarray
    polyhedron: Polyhedron
    local_bbox_half_extents: np.ndarray

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float).reshape(3)
        self.end = np.asarray(self.end, dtype=float).reshape(3)
        self.local_bbox_half_extents = np.asarray(
            self.local_bbox_half_extents, dtype=float).reshape(3)
        if not self.polyhedron.contains(np.vstack([self.start, self.end])).all():
            raise ValueError("corridor segment endpoints not inside polyhedron")


def _segment_bbox(a: np.ndarray, b: np.ndarray, bbox_half: np.ndarray):
    """Axis-aligned box around the segment: center and half extents."""
    mid = 0.5 * (a + b)
    half = np.asarray(bbox_half, dtype=float) + 0.5 * np.abs(b - a)
    return mid, half


def _point_segment_distance(points: np.ndarray, a: np.ndarray,
                            b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def _local_frame(axis: np.ndarray) -> np.ndarray:
    """Rows: orthonormal basis with the first row along ``axis``."""
    helper = np.zeros(3)
    helper[np.argmin(np.abs(axis))] = 1.0
    n1 = np.cross(axis, helper)
    n1 /= np.linalg.norm(n1)
    n2 = np.cross(axis, n1)
    return np.vstack([axis, n1, n2])


def decompose_segment(a, b_pt, obstacles, bbox_half=(2.0, 2.0, 1.0)) -> Polyhedron:
    """Free-space polyhedron around the segment a--b_pt.

    ``obstacles`` are obstacle points (typically occupied voxel centers);
    only those inside the local bounding box constrain the result.  Ties for
    the nearest obstacle go to the earliest input index.

    Raises InfeasibleSegment when an obstacle lies within ~1e-6 m of the
    segment (no separating corridor) or the corridor degenerates.
    """
    a = np.asarray(a, dtype=float).reshape(3)
    b_pt = np.asarray(b_pt, dtype=float).reshape(3)
    bbox_half = np.asarray(bbox_half, dtype=float).reshape(3)
    mid, half = _segment_bbox(a, b_pt, bbox_half)

    box_A = np.vstack([np.eye(3), -np.eye(3)])
    box_b = np.concatenate([mid + half, -(mid - half)])

    obs = np.asarray(obstacles, dtype=float).reshape(-1, 3)
    if len(obs):
        inside = np.all(obs @ box_A.T <= box_b, axis=1)
        obs = obs[inside]

    rows_A, rows_b = [], []
    if len(obs):
        seg_d = _point_segment_distance(obs, a, b_pt)
        if seg_d.min() < _SEGMENT_EPS:
            raise InfeasibleSegment(
                f"obstacle within {_SEGMENT_EPS} m of segment")

        length = float(np.linalg.norm(b_pt - a))
        if length < 1e-12:
            basis = np.eye(3)
            scale = np.ones(3)
        else:
            basis = _local_frame((b_pt - a) / length)
            sx = 0.5 * length + _AXIS_PAD
            q = (obs - mid) @ basis.T
            span = np.abs(q[:, 0]) < sx
            s_yz = sx
            if span.any():
                r2 = q[span, 1] ** 2 + q[span, 2] ** 2
                shrink = np.sqrt(r2 / (1.0 - (q[span, 0] / sx) ** 2))
                s_yz = min(s_yz, float(shrink.min()))
            if s_yz < 1e-9:
                raise InfeasibleSegment("corridor degenerates on the segment axis")
            scale = np.array([sx, s_yz, s_yz])

        scaled = ((obs - mid) @ basis.T) / scale
        remaining = np.arange(len(obs))
        while len(remaining):
            norms = (scaled[remaining] ** 2).sum(axis=1)
            pick = remaining[int(np.argmin(norms))]
            o_tilde = scaled[pick]
            w = basis.T @ (o_tilde / scale)
            w_norm = float(np.linalg.norm(w))
            if w_norm < 1e-15:
                raise InfeasibleSegment("obstacle coincides with segment midpoint")
            n = w / w_norm
            b_row = float(n @ obs[pick]) - _EXCLUDE_EPS
            rows_A.append(n)
            rows_b.append(b_row)
            keep = obs[remaining] @ n <= b_row
            remaining = remaining[keep]

    A = np.vstack(rows_A + [box_A]) if rows_A else box_A
    b = np.concatenate([np.asarray(rows_b), box_b]) if rows_b else box_b
    ends = np.vstack([a, b_pt])
    if np.any(ends @ A.T >= b):
        raise InfeasibleSegment("segment endpoints not strictly inside corridor")
    return Polyhedron(A, b)


def decompose_parallel(segments, edt: EdtMap, bbox_half=(2.0, 2.0, 1.0),
                       workers: int = None) -> list:
    """One polyhedron per (start, end) segment, in input order.

    Obstacle points are the occupied voxel centers of ``edt``.  Output is
    bit-identical for any ``workers`` value; an InfeasibleSegment from the
    lowest failing segment index is re-raised.
    """
    segments = list(segments)
    if not segments:
        raise ValueError("segments must be nonempty")
    centers = edt.occupied_centers

    def run(seg):
        return decompose_segment(seg[0], seg[1], centers, bbox_half)

    if workers is None:
        workers = min(len(segments), os.cpu_count() or 1)
    results = [None] * len(segments)
    errors = [None] * len(segments)

    def guarded(i_seg):
        i, seg = i_seg
        try:
            results[i] = run(seg)
        except InfeasibleSegment as exc:
            errors[i] = exc

    if workers <= 1 or len(segments) == 1:
        for item in enumerate(segments):
            guarded(item)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(guarded, enumerate(segments)))

    for i, err in enumerate(errors):
        if err is not None:
            raise InfeasibleSegment(str(err), segment_index=i)
    return results
