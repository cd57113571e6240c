"""2D geometry primitives: oriented rectangles, SAT overlap, ray casting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OrientedRect:
    """Rectangle with center, full length/width, and rotation angle."""

    center: tuple[float, float]
    length: float
    width: float
    angle: float

    def corners(self) -> np.ndarray:
        """Corner coordinates, shape (4, 2), counter-clockwise."""
        c, s = np.cos(self.angle), np.sin(self.angle)
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.asarray(self.center)

    def axes(self) -> np.ndarray:
        """The two unit edge normals, shape (2, 2)."""
        c, s = np.cos(self.angle), np.sin(self.angle)
        return np.array([[c, s], [-s, c]])

    def edges(self) -> np.ndarray:
        """Edge segments, shape (4, 2, 2) as (start, end) pairs."""
        pts = self.corners()
        return np.stack([np.stack([pts[i], pts[(i + 1) % 4]]) for i in range(4)])


def rects_intersect(a: OrientedRect, b: OrientedRect) -> bool:
    """Separating-axis overlap test for two oriented rectangles.

    Touching rectangles (zero-width overlap) count as intersecting.
    """
    ca, cb = a.corners(), b.corners()
    for axis in np.vstack([a.axes(), b.axes()]):
        pa = ca @ axis
        pb = cb @ axis
        if pa.max() < pb.min() or pb.max() < pa.min():
            return False
    return True


def point_in_rect(point: np.ndarray, rect: OrientedRect) -> bool:
    d = np.asarray(point, dtype=float) - np.asarray(rect.center)
    ax = rect.axes()
    return (abs(d @ ax[0]) <= rect.length / 2.0) and (abs(d @ ax[1]) <= rect.width / 2.0)


def _cross2(a: np.ndarray, b: np.ndarray) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def segments_intersect(p0, p1, q0, q1) -> bool:
    """Whether segment p0-p1 intersects segment q0-q1 (inclusive)."""
    p0, p1, q0, q1 = (np.asarray(v, dtype=float) for v in (p0, p1, q0, q1))
    d1 = p1 - p0
    d2 = q1 - q0
    denom = _cross2(d1, d2)
    rel = q0 - p0
    if denom == 0.0:
        if _cross2(rel, d1) != 0.0:
            return False
        # Collinear: check 1D interval overlap along the dominant axis.
        axis = int(np.argmax(np.abs(d1))) if np.any(d1) else int(np.argmax(np.abs(d2)))
        lo1, hi1 = sorted((p0[axis], p1[axis]))
        lo2, hi2 = sorted((q0[axis], q1[axis]))
        return hi1 >= lo2 and hi2 >= lo1
    t = _cross2(rel, d2) / denom
    u = _cross2(rel, d1) / denom
    return 0.0 <= t <= 1.0 and 0.0 <= u <= 1.0


def rect_segment_intersect(rect: OrientedRect, p0, p1) -> bool:
    """Whether a segment touches or enters an oriented rectangle."""
    if point_in_rect(np.asarray(p0), rect) or point_in_rect(np.asarray(p1), rect):
        return True
    for e0, e1 in rect.edges():
        if segments_intersect(p0, p1, e0, e1):
            return True
    return False


def corners_batch(
    centers: np.ndarray, lengths: np.ndarray, widths: np.ndarray, angles: np.ndarray
) -> np.ndarray:
    """Corners of many oriented rectangles at once, shape (N, 4, 2).

    Corner order matches OrientedRect.corners().
    """
    c, s = np.cos(angles), np.sin(angles)
    hl, hw = lengths / 2.0, widths / 2.0
    sx = np.array([1.0, -1.0, -1.0, 1.0])
    sy = np.array([1.0, 1.0, -1.0, -1.0])
    lx = sx[None, :] * hl[:, None]
    ly = sy[None, :] * hw[:, None]
    x = centers[:, 0, None] + c[:, None] * lx - s[:, None] * ly
    y = centers[:, 1, None] + s[:, None] * lx + c[:, None] * ly
    return np.stack([x, y], axis=-1)


def axes_batch(angles: np.ndarray) -> np.ndarray:
    """Edge normals of many oriented rectangles, shape (N, 2, 2)."""
    c, s = np.cos(angles), np.sin(angles)
    return np.stack([np.stack([c, s], axis=-1), np.stack([-s, c], axis=-1)], axis=1)


def edges_from_corners(corners: np.ndarray) -> np.ndarray:
    """(N, 4, 2) corners -> (N, 4, 2, 2) edge segments."""
    return np.stack([corners, np.roll(corners, -1, axis=1)], axis=2)


def overlap_matrix(corners: np.ndarray, axes: np.ndarray) -> np.ndarray:
    """Pairwise SAT overlap for a batch of oriented rectangles.

    corners: (N, 4, 2), axes: (N, 2, 2). Returns a symmetric (N, N) bool
    matrix with a False diagonal. Touching counts as overlap, matching
    rects_intersect.
    """
    n = corners.shape[0]
    if n == 0:
        return np.zeros((0, 0), dtype=bool)
    # proj[o, k, i, c]: corner c of rect i projected on axis k of rect o.
    proj = np.einsum("icd,okd->okic", corners, axes)
    mins = proj.min(axis=3)  # (o, k, i)
    maxs = proj.max(axis=3)
    sep = (maxs[:, :, :, None] < mins[:, :, None, :]) | (maxs[:, :, None, :] < mins[:, :, :, None])
    sep_on_owner = sep.any(axis=1)  # (o, i, j): pair (i, j) separated on an axis of o
    idx = np.arange(n)
    sep_own = sep_on_owner[idx, idx, :]  # (i, j) on an axis of i
    separated = sep_own | sep_own.T
    overlap = ~separated
    overlap[idx, idx] = False
    return overlap


def segments_cross_batch(segs_a: np.ndarray, segs_b: np.ndarray) -> np.ndarray:
    """Proper-crossing test between two segment batches, shape (nA, nB).

    Exactly parallel pairs never register, mirroring the ray caster.
    """
    a0 = segs_a[:, 0, :][:, None, :]
    da = (segs_a[:, 1, :] - segs_a[:, 0, :])[:, None, :]
    b0 = segs_b[None, :, 0, :]
    db = (segs_b[:, 1, :] - segs_b[:, 0, :])[None, :, :]
    rel = b0 - a0
    denom = da[..., 0] * db[..., 1] - da[..., 1] * db[..., 0]
    t_num = rel[..., 0] * db[..., 1] - rel[..., 1] * db[..., 0]
    u_num = rel[..., 0] * da[..., 1] - rel[..., 1] * da[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = t_num / denom
        u = u_num / denom
    return (denom != 0.0) & (t >= 0.0) & (t <= 1.0) & (u >= 0.0) & (u <= 1.0)


def ray_segments_distances(origin: np.ndarray, directions: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """Nearest hit distance per ray against a batch of segments.

    origin: (2,) ray origin shared by all rays.
    directions: (R, 2) unit ray directions.
    segments: (S, 2, 2) segments as (start, end).
    Returns (R,) distances, inf where a ray hits nothing. Rays exactly
    parallel to a segment never register a hit against it.
    """
    directions = np.atleast_2d(directions)
    if segments.size == 0:
        return np.full(directions.shape[0], np.inf)
    p0 = segments[:, 0, :]  # (S,2)
    e = segments[:, 1, :] - p0  # (S,2)
    rel = p0 - origin  # (S,2)
    # denom[r,s] = cross(dir_r, e_s)
    denom = directions[:, 0, None] * e[None, :, 1] - directions[:, 1, None] * e[None, :, 0]
    cross_rel_e = rel[:, 0] * e[:, 1] - rel[:, 1] * e[:, 0]  # (S,)
    cross_rel_d = rel[None, :, 0] * directions[:, 1, None] - rel[None, :, 1] * directions[:, 0, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = cross_rel_e[None, :] / denom  # ray parameter
        u = cross_rel_d / denom  # segment parameter
    valid = (denom != 0.0) & (t >= 0.0) & (u >= 0.0) & (u <= 1.0)
    t = np.where(valid, t, np.inf)
    return t.min(axis=1)
