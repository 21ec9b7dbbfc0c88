"""Orientation-field estimation and fibre tracing.

The field is estimated in two stages. Each data point first gets a local
anisotropy tensor built from its neighbours: the unit vector toward neighbour
i, damped by a Gaussian in the separation (scale sigma_fo) and weighted by the
neighbour's signal probability eps_i, contributes its outer product. The
point tensors are then smoothed onto a regular grid with an eps-weighted
Gaussian kernel (scale h_fo) under the log-Euclidean metric, and each grid
node keeps the dominant-eigenvector orientation in [0, pi), an isotropy flag,
and the eigenvalue ratio.

Fibres are streamline segments of the field: two branches integrated from a
reference point with a fixed step, looking the orientation up at the nearest
grid node and keeping direction continuity (never turning by 90 degrees or
more in one step).
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import tensors
from .errors import EmptyPattern, OutsideWindow, SingularStart
from .geometry import WindowRect, arc_lengths

KERNEL_CUTOFF = 4.0  # kernel support radius in units of h_fo


def local_tensors(points, eps, sigma_fo):
    """Per-point anisotropy tensors T0(y_j), shape (m, 3).

    T0(y_j) = sum_{i != j} eps_i * vt_i vt_i^T with
    vt_i = exp(-|v|^2 / (2 sigma_fo^2)) * v/|v|, v = y_i - y_j.
    Coincident point pairs contribute nothing. Tensors with a zero eigenvalue
    (1e-12 relative to trace) are replaced by the identity.
    """
    pts = np.asarray(points, dtype=float)
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (len(pts),))
    m = len(pts)
    if m < 2:
        raise EmptyPattern("need at least 2 points for local tensors")
    diff = pts[None, :, :] - pts[:, None, :]  # diff[j, i] = y_i - y_j
    d2 = np.einsum("jik,jik->ji", diff, diff)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.exp(-d2 / (2.0 * sigma_fo**2)) / np.sqrt(d2)
    scale[d2 == 0.0] = 0.0  # the diagonal, plus exactly coincident pairs
    vt = diff * scale[..., None]
    w = eps[None, :]
    t = np.stack(
        [
            (w * vt[..., 0] * vt[..., 0]).sum(axis=1),
            (w * vt[..., 0] * vt[..., 1]).sum(axis=1),
            (w * vt[..., 1] * vt[..., 1]).sum(axis=1),
        ],
        axis=-1,
    )
    lam1, lam2, _, _ = tensors.eig2(t)
    floor = tensors.EIG_FLOOR_REL * np.abs(lam1 + lam2)
    degenerate = (lam2 <= floor) | (lam2 <= 0.0)
    t[degenerate] = (1.0, 0.0, 1.0)
    return t


@dataclass
class OrientationGrid:
    """Orientation field sampled on a regular grid covering a window.

    theta/singular/anisotropy are (ny, nx) arrays indexed [iy, ix]; node
    (ix, iy) sits at (xmin + ix*spacing, ymin + iy*spacing).
    """

    window: WindowRect
    spacing: float
    theta: np.ndarray
    singular: np.ndarray
    anisotropy: np.ndarray

    @property
    def nx(self):
        return self.theta.shape[1]

    @property
    def ny(self):
        return self.theta.shape[0]

    def node_coords(self):
        """(ny, nx) arrays of node x and y coordinates."""
        xs = self.window.xmin + self.spacing * np.arange(self.nx)
        ys = self.window.ymin + self.spacing * np.arange(self.ny)
        return np.meshgrid(xs, ys)

    def _node_index(self, xy):
        tx = (xy[0] - self.window.xmin) / self.spacing
        ty = (xy[1] - self.window.ymin) / self.spacing
        # nearest node, ties toward the lower index
        ix = math.floor(tx)
        if tx - ix > 0.5:
            ix += 1
        iy = math.floor(ty)
        if ty - iy > 0.5:
            iy += 1
        return min(max(ix, 0), self.nx - 1), min(max(iy, 0), self.ny - 1)

    def orientation_at(self, xy):
        """(theta, singular) at the grid node nearest to xy.

        Raises OutsideWindow if xy is not in the (closed) window.
        """
        if not (
            self.window.xmin <= xy[0] <= self.window.xmax
            and self.window.ymin <= xy[1] <= self.window.ymax
        ):
            raise OutsideWindow(f"query point {tuple(xy)} outside window")
        ix, iy = self._node_index(xy)
        return float(self.theta[iy, ix]), bool(self.singular[iy, ix])

    @classmethod
    def from_function(cls, window, spacing, fn):
        """Sample an analytic orientation function theta(x, y) onto a grid."""
        nx = grid_axis_count(window.width, spacing)
        ny = grid_axis_count(window.height, spacing)
        xs = window.xmin + spacing * np.arange(nx)
        ys = window.ymin + spacing * np.arange(ny)
        xx, yy = np.meshgrid(xs, ys)
        theta = np.mod(np.asarray(fn(xx, yy), dtype=float), np.pi)
        return cls(
            window=window,
            spacing=spacing,
            theta=theta,
            singular=np.zeros_like(theta, dtype=bool),
            anisotropy=np.full_like(theta, np.inf),
        )

    def to_csv(self, path):
        """Write the grid as CSV with header ix,iy,x,y,theta,singular,anisotropy."""
        xs = self.window.xmin + self.spacing * np.arange(self.nx)
        ys = self.window.ymin + self.spacing * np.arange(self.ny)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ix", "iy", "x", "y", "theta", "singular", "anisotropy"])
            for iy in range(self.ny):
                for ix in range(self.nx):
                    w.writerow(
                        [
                            ix,
                            iy,
                            repr(float(xs[ix])),
                            repr(float(ys[iy])),
                            repr(float(self.theta[iy, ix])),
                            int(self.singular[iy, ix]),
                            repr(float(self.anisotropy[iy, ix])),
                        ]
                    )


@dataclass
class AnalyticOrientationField:
    """Orientation field given by a closed-form function (for synthesis/tests)."""

    window: WindowRect
    fn: object  # callable (x, y) -> theta, vectorized

    def orientation_at(self, xy):
        if not bool(np.all(self.window.contains(np.asarray(xy)))):
            raise OutsideWindow(f"query point {tuple(xy)} outside window")
        return float(np.mod(self.fn(xy[0], xy[1]), np.pi)), False


def constant_field(window, theta0):
    return AnalyticOrientationField(window, lambda x, y: np.broadcast_to(theta0, np.shape(x)))


def circular_field(window, cx, cy):
    """Orientations tangent to circles around (cx, cy)."""
    return AnalyticOrientationField(
        window, lambda x, y: np.arctan2(y - cy, x - cx) + 0.5 * np.pi
    )


def ridge_wave_field(window, amplitude, period):
    """Field whose integral curves are y = y0 + amplitude*sin(2 pi x/period)."""
    k = 2.0 * np.pi / period
    return AnalyticOrientationField(
        window, lambda x, y: np.arctan(amplitude * k * np.cos(k * np.asarray(x)))
    )


def grid_axis_count(extent, spacing):
    """Number of nodes needed to cover an axis extent (no extra margin)."""
    n = int(math.ceil(extent / spacing - 1e-12)) + 1
    return max(n, 2)


def estimate_field(points, eps, sigma_fo, h_fo, window, spacing):
    """Estimate the orientation field on a regular grid.

    Per node x: T(x) = exp( sum_i eps_i f(|x-y_i|) log T0(y_i) / sum_i ... )
    with f a Gaussian kernel of scale h_fo truncated at 4*h_fo (relative
    contribution beyond is < e^-8). Nodes where every weight is truncated or
    all eps vanish are flagged singular with an isotropic placeholder.
    """
    pts = np.asarray(points, dtype=float)
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (len(pts),))
    if sigma_fo <= 0 or h_fo <= 0 or spacing <= 0:
        raise ValueError("sigma_fo, h_fo and spacing must be positive")
    t0 = local_tensors(pts, eps, sigma_fo)
    log_t0 = np.zeros_like(t0)
    identity = (t0[:, 0] == 1.0) & (t0[:, 1] == 0.0) & (t0[:, 2] == 1.0)
    if not np.all(identity):
        log_t0[~identity] = tensors.tensor_log(t0[~identity])

    nx = grid_axis_count(window.width, spacing)
    ny = grid_axis_count(window.height, spacing)
    xs = window.xmin + spacing * np.arange(nx)
    ys = window.ymin + spacing * np.arange(ny)
    cutoff2 = (KERNEL_CUTOFF * h_fo) ** 2

    # chunk the nodes to bound the (nodes x points) working set
    chunk = max(1, int(2_000_000 / max(len(pts), 1)))
    coords = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)
    n_nodes = len(coords)
    mean_logs = np.zeros((n_nodes, 3))
    dead = np.zeros(n_nodes, dtype=bool)
    for lo in range(0, n_nodes, chunk):
        block = coords[lo : lo + chunk]
        d2 = (
            (block[:, None, 0] - pts[None, :, 0]) ** 2
            + (block[:, None, 1] - pts[None, :, 1]) ** 2
        )
        w = eps[None, :] * np.exp(-d2 / (2.0 * h_fo**2))
        w[d2 > cutoff2] = 0.0
        wsum = w.sum(axis=1)
        ok = wsum > tensors.WEIGHT_FLOOR
        dead[lo : lo + chunk] = ~ok
        denom = np.where(ok, wsum, 1.0)
        mean_logs[lo : lo + chunk] = (w @ log_t0) / denom[:, None]

    lam1, lam2, th, _ = tensors.eig2(mean_logs)
    e1, e2 = np.exp(lam1), np.exp(lam2)
    iso = (e1 - e2) <= tensors.TOL_EIG_REL * (e1 + e2)
    flat_theta = np.where(iso, 0.0, th)
    flat_aniso = np.where(iso, 1.0, e1 / e2)
    flat_sing = iso | dead
    flat_theta[dead] = 0.0
    flat_aniso[dead] = 1.0

    theta = flat_theta.reshape(ny, nx)
    singular = flat_sing.reshape(ny, nx)
    aniso = flat_aniso.reshape(ny, nx)
    return OrientationGrid(
        window=window, spacing=spacing, theta=theta, singular=singular, anisotropy=aniso
    )


@dataclass
class Fibre:
    """A traced fibre: streamline segment through omega with arm lengths l1, l2.

    vertices runs from the far end of the l2 arm, through omega, to the far
    end of the l1 arm. arcs holds cumulative arc length per vertex; omega_arc
    is omega's arc position; l_total = arcs[-1] (realized length, below
    l1 + l2 when a branch was truncated at the window or a singular cell).
    """

    omega: np.ndarray
    l1: float
    l2: float
    vertices: np.ndarray
    arcs: np.ndarray
    omega_arc: float
    truncated: bool

    @property
    def l_total(self):
        return float(self.arcs[-1])

    def endpoints(self):
        return self.vertices[0].copy(), self.vertices[-1].copy()


def _exit_parameter(window, pos, direction, h):
    """Largest t in [0, h] with pos + t*direction still inside the window."""
    t_max = h
    for axis, (lo, hi) in enumerate(
        ((window.xmin, window.xmax), (window.ymin, window.ymax))
    ):
        d = direction[axis]
        if d > 0:
            t_max = min(t_max, (hi - pos[axis]) / d)
        elif d < 0:
            t_max = min(t_max, (lo - pos[axis]) / d)
    return max(t_max, 0.0)


def _trace_branch(field, window, omega, sign, length, step):
    """One branch: vertices after omega (exclusive), realized length, truncated."""
    verts = []
    pos = np.array(omega, dtype=float)
    theta0, singular0 = field.orientation_at(pos)
    if singular0:
        raise SingularStart("fibre reference point sits on a singular cell")
    prev_dir = sign * np.array([math.cos(theta0), math.sin(theta0)])
    remaining = float(length)
    realized = 0.0
    truncated = False
    while remaining > 1e-12:
        theta, singular = field.orientation_at(pos)
        if singular:
            truncated = True
            break
        d = np.array([math.cos(theta), math.sin(theta)])
        if float(d @ prev_dir) < 0.0:
            d = -d
        h = min(step, remaining)
        t_exit = _exit_parameter(window, pos, d, h)
        if t_exit < h:
            if t_exit > 1e-12:
                pos = pos + t_exit * d
                # the exit step lands on the boundary; pin it there exactly
                pos[0] = min(max(pos[0], window.xmin), window.xmax)
                pos[1] = min(max(pos[1], window.ymin), window.ymax)
                verts.append(pos.copy())
                realized += t_exit
            truncated = True
            break
        pos = pos + h * d
        verts.append(pos.copy())
        realized += h
        remaining -= h
        prev_dir = d
    return verts, realized, truncated


def trace_fibre(field, omega, l1, l2, step):
    """Trace the fibre with reference point omega and arm lengths (l1, l2).

    Branch one follows the +theta unit vector at omega, branch two -theta;
    each keeps direction continuity (turn < 90 degrees per step) and stops
    early at the window boundary (clipping the final step to it) or on
    entering a singular cell. Raises SingularStart when omega itself sits on
    a singular cell, OutsideWindow when omega is not in the window.
    """
    window = field.window
    if not bool(np.all(window.contains(np.asarray(omega, dtype=float)))):
        raise OutsideWindow("fibre reference point outside window")
    if l1 < 0 or l2 < 0:
        raise ValueError("arm lengths must be nonnegative")
    if step <= 0:
        raise ValueError("step must be positive")
    omega = np.asarray(omega, dtype=float)
    fwd, _, trunc1 = _trace_branch(field, window, omega, +1.0, l1, step)
    bwd, _, trunc2 = _trace_branch(field, window, omega, -1.0, l2, step)
    vertices = np.array(bwd[::-1] + [omega] + fwd, dtype=float)
    arcs = arc_lengths(vertices)
    return Fibre(
        omega=omega.copy(),
        l1=float(l1),
        l2=float(l2),
        vertices=vertices,
        arcs=arcs,
        omega_arc=float(arcs[len(bwd)]),
        truncated=bool(trunc1 or trunc2),
    )
