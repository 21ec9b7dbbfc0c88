"""Convergence checks and posterior summaries for recorded traces.

Everything here is a pure function of the trace: Geweke and stationarity
z-statistics, HPD intervals, per-k posterior summaries, point co-occurrence
and its single-linkage clustering, and smoothed fibre-density rasters.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.ndimage import gaussian_filter
from scipy.spatial.distance import squareform

from .errors import TooShort, ZeroVariance
from .geometry import arc_lengths, point_at_arc

SUMMARY_STATS = ("n_noise", "dispersion_p95", "total_length")


def _batch_se2(segment):
    """Squared standard error of the mean from non-overlapping batch means."""
    n_batches = min(20, len(segment))
    if n_batches < 2:
        return 0.0
    means = np.array([b.mean() for b in np.array_split(segment, n_batches)])
    return float(np.var(means, ddof=1) / n_batches)


def geweke(series):
    """Mean-difference z between the first tenth and the last half of a series."""
    x = np.asarray(series, dtype=float)
    n = len(x)
    if n < 40:
        raise TooShort(f"geweke needs at least 40 samples, got {n}")
    first = x[: n // 10]
    last = x[n - n // 2 :]
    num = float(first.mean() - last.mean())
    den = math.sqrt(_batch_se2(first) + _batch_se2(last))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.copysign(math.inf, num)
    return num / den


def z_m_statistic(products, beta, r_add):
    """Stationarity z for the per-event (total death rate x waiting time) stream.

    At stationarity the products average beta/(2 beta + r_add); the statistic
    is the studentized deviation of their sample mean from that value.
    """
    x = np.asarray(products, dtype=float)
    m = len(x)
    if m < 100:
        raise TooShort(f"z_m needs at least 100 products, got {m}")
    target = beta / (2.0 * beta + r_add)
    mean = float(x.mean())
    sd = float(x.std(ddof=1))
    if sd == 0.0:
        if abs(mean - target) <= 1e-12 * max(1.0, abs(target)):
            return 0.0
        raise ZeroVariance("constant products away from the stationary value")
    return (mean - target) / (sd / math.sqrt(m))


def _hpd_sorted(x, level):
    n = len(x)
    w = min(n, max(1, math.ceil(level * n - 1e-9)))
    widths = x[w - 1 :] - x[: n - w + 1]
    i = int(np.argmin(widths))  # argmin takes the first (leftmost) tie
    return float(x[i]), float(x[i + w - 1])


def _hpd(samples, level):
    return _hpd_sorted(np.sort(np.asarray(samples, dtype=float)), level)


def hpd_interval(samples, level):
    """Shortest contiguous interval of sorted samples holding ceil(level*n) points."""
    x = np.asarray(samples, dtype=float)
    if len(x) < 10:
        raise TooShort(f"hpd_interval needs at least 10 samples, got {len(x)}")
    if not 0.0 < level <= 1.0:
        raise ValueError(f"level must be in (0, 1], got {level}")
    return _hpd(x, level)


@dataclass(frozen=True)
class StatSummary:
    mean: float
    hpd50: tuple
    hpd95: tuple


@dataclass(frozen=True)
class SummaryByK:
    """Posterior summary conditioned on one fibre count."""

    k: int
    prob: float
    stats: dict  # stat name -> StatSummary, or None when no record has it


def summarize(trace):
    """Per observed k: probability plus mean/HPD of the recorded statistics."""
    if not trace:
        raise TooShort("summarize needs a non-empty trace")
    n = len(trace)
    out = []
    for k in sorted({r.k for r in trace}):
        recs = [r for r in trace if r.k == k]
        stats = {}
        for name in SUMMARY_STATS:
            vals = [getattr(r, name) for r in recs]
            vals = [v for v in vals if v is not None]
            if not vals:
                stats[name] = None
                continue
            arr = np.asarray(vals, dtype=float)
            stats[name] = StatSummary(
                mean=float(arr.mean()),
                hpd50=_hpd(arr, 0.50),
                hpd95=_hpd(arr, 0.95),
            )
        out.append(SummaryByK(k=int(k), prob=len(recs) / n, stats=stats))
    return out


def cooccurrence(trace, n_points):
    """(i, j) entry: fraction of records in which points i and j share a fibre.

    The diagonal is each point's signal fraction.
    """
    if not trace:
        raise TooShort("cooccurrence needs a non-empty trace")
    mat = np.zeros((n_points, n_points))
    for r in trace:
        x = np.asarray(r.x)
        for j in np.unique(x[x >= 0]):
            idx = np.flatnonzero(x == j)
            mat[np.ix_(idx, idx)] += 1.0
    mat /= len(trace)
    return mat


def cluster_points(cooc, threshold=0.5):
    """Noise/cluster labels from a co-occurrence matrix.

    Points signal in fewer than ``threshold`` of the records get label -1; the
    rest are single-linkage clustered on distance (1 - cooc) with merge cutoff
    (1 - threshold). Labels are numbered by first occurrence.
    """
    cooc = np.asarray(cooc, dtype=float)
    n = len(cooc)
    labels = np.full(n, -1, dtype=int)
    keep = np.flatnonzero(np.diag(cooc) >= threshold)
    if len(keep) == 1:
        labels[keep[0]] = 0
        return labels
    if len(keep) == 0:
        return labels
    dist = 1.0 - cooc[np.ix_(keep, keep)]
    dist = np.maximum(0.5 * (dist + dist.T), 0.0)
    np.fill_diagonal(dist, 0.0)
    merge_tree = linkage(squareform(dist, checks=False), method="single")
    raw = fcluster(merge_tree, t=1.0 - threshold, criterion="distance")
    remap = {}
    for r in raw:
        if r not in remap:
            remap[r] = len(remap)
    labels[keep] = np.array([remap[r] for r in raw])
    return labels


def density_raster(trace, window, bandwidth, spacing):
    """Smoothed mean fibre-length density on a raster of cell size ``spacing``.

    Each polyline deposits arc-length mass at samples taken every spacing/2
    along the curve; deposits are binned to nearest cells, averaged over
    records, and blurred with a Gaussian of standard deviation ``bandwidth``
    (in window units). Rows follow increasing y from the window's ymin.
    """
    if not trace:
        raise TooShort("density_raster needs a non-empty trace")
    nx = max(1, int(math.ceil(window.width / spacing - 1e-12)))
    ny = max(1, int(math.ceil(window.height / spacing - 1e-12)))
    img = np.zeros((ny, nx))
    for r in trace:
        for poly in r.polylines:
            poly = np.asarray(poly, dtype=float)
            if len(poly) < 2:
                continue
            arcs = arc_lengths(poly)
            total = arcs[-1]
            if total <= 0.0:
                continue
            n_samples = max(1, int(math.ceil(total / (0.5 * spacing))))
            s = (np.arange(n_samples) + 0.5) * (total / n_samples)
            pts = point_at_arc(poly, arcs, s)
            ix = np.clip(
                ((pts[:, 0] - window.xmin) / spacing).astype(int), 0, nx - 1
            )
            iy = np.clip(
                ((pts[:, 1] - window.ymin) / spacing).astype(int), 0, ny - 1
            )
            np.add.at(img, (iy, ix), total / n_samples)
    img /= len(trace)
    if bandwidth > 0.0:
        img = gaussian_filter(img, sigma=bandwidth / spacing, mode="constant")
    return img
