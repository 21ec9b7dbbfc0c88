"""File formats: points CSV, trace JSONL, summary/label CSVs, PGM rasters.

All writers are byte-deterministic: floats use Python's shortest-roundtrip
repr, rows follow fixed orders, and nothing embeds timestamps or hostnames.
"""

import json
import math

import numpy as np

from .diagnostics import SUMMARY_STATS
from .errors import DataError
from .sampler import TraceRecord

EARTH_RADIUS_KM = 6371.0

_LATLON_HEADERS = {
    ("lat", "lon"),
    ("lon", "lat"),
    ("latitude", "longitude"),
    ("longitude", "latitude"),
}


def _fmt(x):
    return repr(float(x))


# --- points ------------------------------------------------------------------


def write_points_csv(path, points):
    points = np.asarray(points, dtype=float)
    with open(path, "w") as f:
        f.write("x,y\n")
        for x, y in points:
            f.write(f"{_fmt(x)},{_fmt(y)}\n")


def _project_latlon(lat, lon):
    """Local equirectangular projection to km, centered on the mean location."""
    lat0 = float(np.mean(lat))
    lon0 = float(np.mean(lon))
    rad = math.pi / 180.0
    x = EARTH_RADIUS_KM * math.cos(lat0 * rad) * (lon - lon0) * rad
    y = EARTH_RADIUS_KM * (lat - lat0) * rad
    return np.column_stack([x, y])


def read_points_csv(path):
    """Read a two-column points CSV; the first bad line is reported.

    Accepts the native ``x,y`` header, or ``lat,lon`` style headers which are
    projected to kilometres around the mean location (the window in the
    configuration must then be stated in the same local km coordinates).
    """
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    header = tuple(c.strip().lower() for c in lines[0].split(","))
    if header == ("x", "y"):
        latlon = False
    elif header in _LATLON_HEADERS:
        latlon = True
    else:
        raise DataError(f"{path}:1: expected header 'x,y' (or lat/lon), got {lines[0]!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected two comma-separated values")
        try:
            a, b = float(parts[0]), float(parts[1])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric value") from None
        if not (math.isfinite(a) and math.isfinite(b)):
            raise DataError(f"{path}:{lineno}: non-finite value")
        rows.append((a, b))
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    if latlon:
        lat_col = header.index("lat") if "lat" in header else header.index("latitude")
        lat = arr[:, lat_col]
        lon = arr[:, 1 - lat_col]
        return _project_latlon(lat, lon)
    return arr


# --- traces -------------------------------------------------------------------


def write_trace_jsonl(path, records):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec.to_json_dict(), sort_keys=True))
            f.write("\n")


def read_trace_jsonl(path):
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(TraceRecord.from_json_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: corrupt trace record ({e})") from None
    if not records:
        raise DataError(f"{path}: empty trace")
    return records


# --- summaries ------------------------------------------------------------------


def write_summary_csv(path, summaries):
    """One row per (k, statistic): k,prob,stat,mean,hpd50_lo,hpd50_hi,hpd95_lo,hpd95_hi."""
    with open(path, "w") as f:
        f.write("k,prob,stat,mean,hpd50_lo,hpd50_hi,hpd95_lo,hpd95_hi\n")
        for s in summaries:
            for name in SUMMARY_STATS:
                st = s.stats[name]
                if st is None:
                    cells = [""] * 5
                else:
                    cells = [
                        _fmt(st.mean),
                        _fmt(st.hpd50[0]),
                        _fmt(st.hpd50[1]),
                        _fmt(st.hpd95[0]),
                        _fmt(st.hpd95[1]),
                    ]
                f.write(",".join([str(s.k), _fmt(s.prob), name] + cells) + "\n")


def write_labels_csv(path, labels):
    with open(path, "w") as f:
        f.write("point,label\n")
        for i, lab in enumerate(labels):
            f.write(f"{i},{int(lab)}\n")


def write_truth_json(path, truth):
    with open(path, "w") as f:
        json.dump(truth.to_json_dict(), f, sort_keys=True, indent=1)
        f.write("\n")


# --- rasters -------------------------------------------------------------------


def write_pgm(path, img, maxval=65535):
    """ASCII PGM (P2), rows from the window's top (largest y) downward."""
    img = np.asarray(img, dtype=float)
    ny, nx = img.shape
    top = img[::-1]
    peak = float(top.max())
    if peak > 0.0:
        scaled = np.rint(top / peak * maxval).astype(int)
    else:
        scaled = np.zeros_like(top, dtype=int)
    with open(path, "w") as f:
        f.write(f"P2\n{nx} {ny}\n{maxval}\n")
        for row in scaled:
            f.write(" ".join(str(v) for v in row) + "\n")


def write_raster_csv(path, img):
    """Raster as CSV, same row order as the PGM (from the top of the window)."""
    img = np.asarray(img, dtype=float)
    with open(path, "w") as f:
        for row in img[::-1]:
            f.write(",".join(_fmt(v) for v in row) + "\n")


# --- config echo ---------------------------------------------------------------


def write_config_echo(path, cfg, key_order):
    """Resolved configuration as flat key = value lines (fixed key order)."""
    with open(path, "w") as f:
        for key in key_order:
            if key not in cfg or cfg[key] is None:
                continue
            val = cfg[key]
            if isinstance(val, float):
                text = _fmt(val)
            elif isinstance(val, tuple):
                text = ";".join(",".join(_fmt(x) for x in item) for item in val)
            else:
                text = str(val)
            f.write(f"{key} = {text}\n")
