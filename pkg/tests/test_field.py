import csv

import numpy as np
import numpy.testing as npt
import pytest

from fibrefield.errors import EmptyPattern, OutsideWindow, SingularStart
from fibrefield.field import (
    OrientationGrid,
    circular_field,
    constant_field,
    estimate_field,
    grid_axis_count,
    local_tensors,
    ridge_wave_field,
    trace_fibre,
)
from fibrefield.geometry import WindowRect


BIG = WindowRect(-50.0, -50.0, 50.0, 50.0)


# --- tracing ------------------------------------------------------------------


def test_constant_field_endpoints_exact():
    fld = constant_field(BIG, 0.0)
    f = trace_fibre(fld, np.array([0.0, 0.0]), 2.0, 3.0, step=1.0)
    start, end = f.endpoints()
    npt.assert_allclose(start, [-3.0, 0.0], atol=1e-9)
    npt.assert_allclose(end, [2.0, 0.0], atol=1e-9)
    assert abs(f.l_total - 5.0) < 1e-9
    assert abs(f.omega_arc - 3.0) < 1e-9
    assert not f.truncated


def test_constant_field_diagonal_with_step_remainder():
    theta = np.pi / 3
    fld = constant_field(BIG, theta)
    f = trace_fibre(fld, np.array([1.0, -2.0]), 2.5, 0.0, step=1.0)
    d = np.array([np.cos(theta), np.sin(theta)])
    npt.assert_allclose(f.endpoints()[1], [1.0, -2.0] + 2.5 * d, atol=1e-9)
    assert abs(f.l_total - 2.5) < 1e-9


def test_trace_clips_to_window_boundary():
    fld = constant_field(BIG, 0.0)
    f = trace_fibre(fld, np.array([48.0, 0.0]), 10.0, 0.0, step=1.0)
    assert f.truncated
    npt.assert_allclose(f.endpoints()[1], [50.0, 0.0], atol=1e-9)
    assert abs(f.l_total - 2.0) < 1e-9


def test_circular_field_endpoints_near_analytic():
    # streamlines of the circular field are circles around the center
    radius, step = 25.0, 0.01
    arm = np.pi * radius / 4.0
    fld = circular_field(BIG, 0.0, 0.0)
    f = trace_fibre(fld, np.array([radius, 0.0]), arm, arm, step=step)
    phi = arm / radius
    want_fwd = radius * np.array([np.cos(phi), np.sin(phi)])
    want_bwd = radius * np.array([np.cos(-phi), np.sin(-phi)])
    start, end = f.endpoints()
    assert np.hypot(*(end - want_fwd)) <= 2.0 * step
    assert np.hypot(*(start - want_bwd)) <= 2.0 * step
    assert abs(f.l_total - 2.0 * arm) < 1e-9


def test_ridge_wave_streamline_follows_sine():
    # integral curves are y = y0 + A sin(2 pi x / P)
    win = WindowRect(0.0, 0.0, 200.0, 150.0)
    fld = ridge_wave_field(win, 12.0, 120.0)
    f = trace_fibre(fld, np.array([100.0, 60.0]), 78.5, 78.5, step=0.05)
    x = f.vertices[:, 0]
    offset = 60.0 - 12.0 * np.sin(2 * np.pi * 100.0 / 120.0)
    want_y = offset + 12.0 * np.sin(2 * np.pi * x / 120.0)
    assert np.max(np.abs(f.vertices[:, 1] - want_y)) < 0.2


def test_trace_rejects_bad_arguments():
    fld = constant_field(BIG, 0.0)
    with pytest.raises(OutsideWindow):
        trace_fibre(fld, np.array([60.0, 0.0]), 1.0, 1.0, step=1.0)
    with pytest.raises(ValueError):
        trace_fibre(fld, np.array([0.0, 0.0]), -1.0, 1.0, step=1.0)
    with pytest.raises(ValueError):
        trace_fibre(fld, np.array([0.0, 0.0]), 1.0, 1.0, step=0.0)


def singular_wall_grid():
    win = WindowRect(0.0, 0.0, 10.0, 10.0)
    grid = OrientationGrid.from_function(win, 1.0, lambda x, y: np.zeros_like(x))
    grid.singular[:, 6:] = True  # everything x >= 5.5 snaps to a singular node
    return grid


def test_trace_stops_on_singular_cell():
    grid = singular_wall_grid()
    f = trace_fibre(grid, np.array([2.0, 5.0]), 10.0, 0.0, step=1.0)
    assert f.truncated
    assert f.l_total < 10.0
    with pytest.raises(SingularStart):
        trace_fibre(grid, np.array([8.0, 5.0]), 1.0, 1.0, step=1.0)


# --- grids ----------------------------------------------------------------------


def test_grid_axis_count():
    assert grid_axis_count(200.0, 1.0) == 201
    assert grid_axis_count(3.0, 2.0) == 3
    assert grid_axis_count(0.5, 1.0) == 2  # never fewer than 2 nodes
    assert grid_axis_count(2.0, 1.0) == 3  # exact multiples don't overshoot


def test_grid_node_snapping():
    win = WindowRect(0.0, 0.0, 4.0, 4.0)
    grid = OrientationGrid.from_function(win, 1.0, lambda x, y: 0.001 * (x + 10 * y))
    theta, singular = grid.orientation_at((1.4, 2.6))
    assert not singular
    assert abs(theta - 0.001 * (1 + 30)) < 1e-12
    # ties round toward the lower node index
    theta, _ = grid.orientation_at((1.5, 2.5))
    assert abs(theta - 0.001 * (1 + 20)) < 1e-12
    with pytest.raises(OutsideWindow):
        grid.orientation_at((4.1, 0.0))


def test_grid_to_csv(tmp_path):
    win = WindowRect(0.0, 0.0, 2.0, 1.0)
    grid = OrientationGrid.from_function(win, 1.0, lambda x, y: np.full_like(x, 0.25))
    path = tmp_path / "field.csv"
    grid.to_csv(path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["ix", "iy", "x", "y", "theta", "singular", "anisotropy"]
    assert len(rows) == 1 + grid.nx * grid.ny
    assert rows[1][:2] == ["0", "0"]
    assert float(rows[1][4]) == 0.25


# --- estimation -------------------------------------------------------------------


def near_line_points():
    x = np.arange(2.0, 40.0, 2.0)
    y = 15.0 + 0.3 * np.where(np.arange(len(x)) % 2 == 0, 1.0, -1.0)
    return np.column_stack([x, y])


def test_local_tensors_validation_and_orientation():
    pts = near_line_points()
    with pytest.raises(EmptyPattern):
        local_tensors(pts[:1], 0.5, 6.0)
    t = local_tensors(pts, 0.9, 6.0)
    assert t.shape == (len(pts), 3)
    # dominant axis of every point tensor hugs the horizontal
    from fibrefield.tensors import eig2

    _, _, theta, iso = eig2(t)
    dev = np.minimum(theta, np.pi - theta)
    assert not iso.any()
    assert dev.max() < 0.2


def test_local_tensors_coincident_pair_degenerates_to_identity():
    pts = np.array([[1.0, 1.0], [1.0, 1.0], [5.0, 1.0]])
    t = local_tensors(pts, 1.0, 2.0)
    # the twin points see only the third point: a rank-one tensor, replaced
    npt.assert_array_equal(t[0], [1.0, 0.0, 1.0])
    npt.assert_array_equal(t[1], [1.0, 0.0, 1.0])


def test_estimate_field_recovers_line_orientation():
    win = WindowRect(0.0, 0.0, 40.0, 40.0)
    pts = near_line_points()
    grid = estimate_field(pts, 0.9, sigma_fo=6.0, h_fo=4.0, window=win, spacing=2.0)
    on_line = grid.theta[grid.singular == False]  # noqa: E712
    iy = int(round(15.0 / 2.0))
    for ix in range(5, 16):
        assert not grid.singular[iy, ix]
        dev = min(grid.theta[iy, ix], np.pi - grid.theta[iy, ix])
        assert dev < 0.15
        assert grid.anisotropy[iy, ix] > 1.0
    # nodes beyond the 4*h_fo kernel cutoff carry the singular flag
    assert grid.singular[-1, 0]
    assert grid.theta[-1, 0] == 0.0
    assert grid.anisotropy[-1, 0] == 1.0
    assert len(on_line) > 0


def test_estimate_field_rejects_bad_scales():
    pts = near_line_points()
    win = WindowRect(0.0, 0.0, 40.0, 40.0)
    with pytest.raises(ValueError):
        estimate_field(pts, 0.5, sigma_fo=0.0, h_fo=4.0, window=win, spacing=2.0)
    with pytest.raises(ValueError):
        estimate_field(pts, 0.5, sigma_fo=6.0, h_fo=4.0, window=win, spacing=-1.0)


def test_estimate_field_deterministic():
    win = WindowRect(0.0, 0.0, 40.0, 40.0)
    pts = near_line_points()
    a = estimate_field(pts, 0.7, 6.0, 4.0, win, 2.0)
    b = estimate_field(pts, 0.7, 6.0, 4.0, win, 2.0)
    npt.assert_array_equal(a.theta, b.theta)
    npt.assert_array_equal(a.singular, b.singular)
    npt.assert_array_equal(a.anisotropy, b.anisotropy)
