"""Windows, point patterns, and polyline arithmetic.

Polylines are (V, 2) float arrays of vertices. Arc-length positions measure
distance along the polyline from its first vertex.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyPattern, OutsideWindow


@dataclass(frozen=True)
class WindowRect:
    """Axis-aligned rectangular observation window (closed)."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError("window must have positive width and height")

    @property
    def area(self):
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    @property
    def width(self):
        return self.xmax - self.xmin

    @property
    def height(self):
        return self.ymax - self.ymin

    def contains(self, xy):
        """Vectorized containment test; xy is (2,) or (n, 2)."""
        xy = np.asarray(xy, dtype=float)
        x, y = xy[..., 0], xy[..., 1]
        return (
            (x >= self.xmin) & (x <= self.xmax) & (y >= self.ymin) & (y <= self.ymax)
        )

    def sample(self, rng, n=None):
        """Uniform draw(s) from the window."""
        size = None if n is None else (n, 2)
        u = rng.uniform(0.0, 1.0, size=(2,) if n is None else size)
        out = np.empty_like(u)
        out[..., 0] = self.xmin + u[..., 0] * self.width
        out[..., 1] = self.ymin + u[..., 1] * self.height
        return out


@dataclass
class PointPattern:
    """Observed planar points plus their observation window."""

    points: np.ndarray
    window: WindowRect

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise EmptyPattern("points must be an (m, 2) array")
        if not np.all(np.isfinite(pts)):
            raise EmptyPattern("points must be finite")
        self.points = pts

    def __len__(self):
        return len(self.points)


def require_inside(window, xy):
    """Raise OutsideWindow unless xy lies in the (closed) window."""
    if not bool(np.all(window.contains(xy))):
        raise OutsideWindow(f"point {np.asarray(xy).tolist()} outside window")


def arc_lengths(vertices):
    """Cumulative arc length at each vertex of a polyline; arc[0] = 0."""
    v = np.asarray(vertices, dtype=float)
    if len(v) == 1:
        return np.zeros(1)
    seg = np.hypot(*(v[1:] - v[:-1]).T)
    return np.concatenate([[0.0], np.cumsum(seg)])


def point_at_arc(vertices, arcs, s):
    """Point(s) on the polyline at arc-length position(s) s.

    arcs is the cumulative arc array for vertices. s may be scalar or an
    array; values are clipped to [0, total length].
    """
    v = np.asarray(vertices, dtype=float)
    s = np.clip(np.asarray(s, dtype=float), 0.0, arcs[-1])
    if len(v) == 1:
        return np.broadcast_to(v[0], s.shape + (2,)).copy()
    idx = np.clip(np.searchsorted(arcs, s, side="right") - 1, 0, len(v) - 2)
    seg_len = arcs[idx + 1] - arcs[idx]
    t = np.where(seg_len > 0, (s - arcs[idx]) / np.where(seg_len > 0, seg_len, 1.0), 0.0)
    return v[idx] + t[..., None] * (v[idx + 1] - v[idx])


def project_to_polyline(vertices, points):
    """Squared distance from each point to its nearest point on the polyline.

    points is (n, 2); returns (n,) squared distances. Works for single-vertex
    polylines (distance to the lone vertex).
    """
    v = np.asarray(vertices, dtype=float)
    p = np.atleast_2d(np.asarray(points, dtype=float))
    if len(v) == 1:
        d = p - v[0]
        return np.einsum("ij,ij->i", d, d)
    a = v[:-1]  # (S, 2)
    ab = v[1:] - a
    ab2 = np.einsum("ij,ij->i", ab, ab)
    ab2 = np.where(ab2 > 0, ab2, 1.0)
    # (n, S) projection parameter, clamped to the segment
    ap = p[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("nsj,sj->ns", ap, ab) / ab2[None, :], 0.0, 1.0)
    diff = ap - t[..., None] * ab[None, :, :]
    d2 = np.einsum("nsj,nsj->ns", diff, diff)
    return d2.min(axis=1)


def anchor_cells(arcs):
    """Arc-length cell boundaries around each polyline vertex.

    Cell c covers the arc positions nearer to vertex c than to its neighbours:
    boundaries are the midpoints between consecutive vertex arc positions,
    closed by 0 and the total length. Returns an array of V+1 boundaries;
    cells partition [0, L].
    """
    if len(arcs) == 1:
        return np.array([0.0, 0.0])
    mids = 0.5 * (arcs[:-1] + arcs[1:])
    return np.concatenate([[0.0], mids, [arcs[-1]]])


def cell_index(boundaries, s):
    """Index of the cell containing arc position(s) s."""
    n_cells = len(boundaries) - 1
    idx = np.searchsorted(boundaries, s, side="right") - 1
    return np.clip(idx, 0, n_cells - 1)
