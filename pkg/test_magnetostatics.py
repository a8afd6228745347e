"""
Test Biot-Savart oracle, rasterization, sheet model, inversion and depth fit
"""
import numpy as np
import pytest

from errors import (CutoffError, InvalidArgumentError, NotWireLikeError, OutOfPlaneError,
                    SourceOnGridError, StandoffError)
from maps_io import CurrentDensityMap, FieldMap, GridGeometry
from magnetostatics import (MU0, CurrentTrace, InversionConfig, Polyline, biot_savart_polyline, divergence,
                            estimate_depth, field_consistency, invert_bz, rasterize_trace, sheet_forward)
from magnetostatics import _extend_axis, _soften_border

I = 100e-6


def straight_wire(x, current=I, along="y"):
    if along == "y":
        return CurrentTrace((Polyline([[x, -0.1, 0.0], [x, 0.1, 0.0]], current),))
    return CurrentTrace((Polyline([[-0.1, x, 0.0], [0.1, x, 0.0]], current),))


def test_on_axis_field_of_long_wire():
    grid = GridGeometry(64, 8, 1e-6, 10e-6)
    field = biot_savart_polyline(straight_wire(32e-6), grid)
    b = field.stack()[4, 32]
    assert np.linalg.norm(b) == pytest.approx(MU0 * I / (2 * np.pi * 10e-6), rel=1e-3)
    assert np.linalg.norm(b) == pytest.approx(2.000e-6, rel=1e-3)


def test_bz_extrema_at_plus_minus_standoff():
    grid = GridGeometry(64, 8, 1e-6, 10e-6)
    bz = biot_savart_polyline(straight_wire(32e-6), grid).bz.data[4]
    assert np.argmax(bz) == 22 and np.argmin(bz) == 42
    assert bz[22] == pytest.approx(1.000e-6, rel=1e-2)
    assert bz[42] == pytest.approx(-1.000e-6, rel=1e-2)


def test_reversed_current_negates_field():
    grid = GridGeometry(16, 16, 2e-6, 5e-6)
    trace = CurrentTrace((Polyline([[3e-6, 1e-6, 0.0], [20e-6, 9e-6, 0.0], [25e-6, 30e-6, 0.0]], I),))
    forward = biot_savart_polyline(trace, grid).stack()
    backward = biot_savart_polyline(trace.scaled(-1.0), grid).stack()
    assert np.array_equal(forward, -backward)


def test_superposition():
    grid = GridGeometry(16, 12, 2e-6, 6e-6)
    a = straight_wire(5e-6)
    b = CurrentTrace((Polyline([[0.0, 7e-6, 0.0], [40e-6, 9e-6, 0.0]], -3e-5),))
    both = CurrentTrace(a.segments + b.segments)
    summed = biot_savart_polyline(a, grid).stack() + biot_savart_polyline(b, grid).stack()
    combined = biot_savart_polyline(both, grid).stack()
    assert np.max(np.abs(combined - summed)) <= 1e-12 * np.max(np.abs(combined))


def test_source_on_grid():
    grid = GridGeometry(8, 8, 1e-6, 0.0)
    with pytest.raises(SourceOnGridError):
        biot_savart_polyline(straight_wire(3e-6), grid)


def test_trace_json_round_trip(tmp_path):
    trace = CurrentTrace((Polyline([[0, 0, 0], [1e-5, 0, 0]], 1e-4), Polyline([[0, 0, 0], [0, 2e-5, 0]], -5e-5)))
    path = tmp_path / "trace.json"
    trace.save(path)
    loaded = CurrentTrace.load(path)
    assert loaded.to_dict() == trace.to_dict()
    with pytest.raises(InvalidArgumentError):
        CurrentTrace.from_json("{not json")


def test_invalid_polylines():
    with pytest.raises(InvalidArgumentError):
        Polyline([[0, 0, 0]], 1e-4)
    with pytest.raises(InvalidArgumentError):
        Polyline([[0, 0, 0], [1, 0, 0]], 0.0)
    with pytest.raises(InvalidArgumentError):
        CurrentTrace.from_dict({"segments": [{"points": [[0, 0, 0], [1, 0, 0]]}]})


def test_rasterize_axis_aligned_wire():
    grid = GridGeometry(20, 12, 1e-6)
    j = rasterize_trace(straight_wire(5e-6, along="x"), grid, 0.0)
    assert np.allclose(j.jx.data[5], I / 1e-6, rtol=5e-3)
    others = np.delete(j.jx.data, 5, axis=0)
    assert np.max(np.abs(others)) < 1e-9 * I / 1e-6
    assert np.all(j.jy.data == 0.0)


def test_rasterize_diagonal_wire_carries_full_current():
    pitch = 1e-6
    grid = GridGeometry(40, 40, pitch)
    trace = CurrentTrace((Polyline([[-3e-6, -2e-6, 0.0], [45e-6, 30e-6, 0.0]], I),))
    j = rasterize_trace(trace, grid, 0.0)
    for col in range(3, 37):
        assert np.sum(j.jx.data[:, col]) * pitch == pytest.approx(I, rel=1e-2)


def test_rasterized_loop_is_divergence_free_away_from_corners():
    pitch = 1e-6
    grid = GridGeometry(50, 40, pitch)
    corners = np.array([[10, 10], [40, 10], [40, 30], [10, 30], [10, 10]]) * pitch
    trace = CurrentTrace((Polyline(np.column_stack([corners, np.zeros(5)]), I),))
    j = rasterize_trace(trace, grid, 0.0)
    div = divergence(j).data
    scale = j.magnitude().max() / pitch
    assert abs(div.mean()) <= 1e-12 * scale
    rows, cols = np.indices(grid.shape)
    near_corner = np.zeros(grid.shape, dtype=bool)
    for x, y in corners[:4] / pitch:
        near_corner |= np.hypot(cols - x, rows - y) <= 2.5
    assert np.max(np.abs(div[~near_corner])) < 1e-2 * scale


def test_rasterize_out_of_plane():
    grid = GridGeometry(8, 8, 1e-6)
    trace = CurrentTrace((Polyline([[0, 0, 0], [5e-6, 5e-6, 1e-6]], I),))
    with pytest.raises(OutOfPlaneError):
        rasterize_trace(trace, grid, 0.0)


def test_forward_of_zero_current_is_zero():
    grid = GridGeometry(16, 16, 1e-6)
    j = CurrentDensityMap.from_arrays(grid, np.zeros((16, 16)), np.zeros((16, 16)), 0.0)
    assert np.all(sheet_forward(j, 5e-6).stack() == 0.0)


def test_forward_contracts_with_distance():
    grid = GridGeometry(64, 64, 2e-6)
    j = rasterize_trace(CurrentTrace((Polyline([[10e-6, 20e-6, 0], [100e-6, 90e-6, 0]], I),)), grid, 0.0)
    near = sheet_forward(j, 8e-6).stack()
    far = sheet_forward(j, 16e-6).stack()
    for k in range(3):
        assert np.linalg.norm(far[..., k]) <= np.linalg.norm(near[..., k])


def test_forward_requires_positive_distance():
    grid = GridGeometry(8, 8, 1e-6)
    j = CurrentDensityMap.from_arrays(grid, np.ones((8, 8)), np.zeros((8, 8)), 3e-6)
    with pytest.raises(StandoffError):
        sheet_forward(j, 3e-6)


def test_forward_matches_oracle_for_wire():
    pitch = 2e-6
    grid = GridGeometry(96, 96, pitch, 8e-6)
    # exactly the extent the rasterizer keeps, one pixel past each edge
    wire = CurrentTrace((Polyline([[48 * pitch, -pitch, 0.0], [48 * pitch, 96 * pitch, 0.0]], I),))
    oracle = biot_savart_polyline(wire, grid).bz.data
    sheet = sheet_forward(rasterize_trace(wire, grid, 0.0), grid.standoff).bz.data
    interior = (slice(24, 72), slice(24, 72))
    assert np.max(np.abs(sheet[interior] - oracle[interior])) <= 0.05 * np.max(np.abs(oracle))


def test_field_consistency_of_own_forward_is_zero():
    grid = GridGeometry(32, 32, 1e-6)
    j = rasterize_trace(straight_wire(16e-6), grid, 0.0)
    field = sheet_forward(j, 4e-6)
    residuals = field_consistency(field, j)
    assert residuals["bx"] == pytest.approx(0.0, abs=1e-12)
    assert residuals["by"] == pytest.approx(0.0, abs=1e-12)


def test_invert_zero_field():
    grid = GridGeometry(32, 32, 1e-6, 4e-6)
    j = invert_bz(FieldMap(grid, np.zeros((32, 32)), "T", "Bz"), 0.0)
    assert np.all(j.jx.data == 0.0) and np.all(j.jy.data == 0.0)


def test_inversion_is_divergence_free():
    pitch = 1e-6
    grid = GridGeometry(64, 48, pitch)
    trace = CurrentTrace((Polyline([[5e-6, -1e-5, 0], [30e-6, 20e-6, 0], [30e-6, 60e-6, 0]], I),))
    bz = sheet_forward(rasterize_trace(trace, grid, 0.0), 4e-6).bz
    j = invert_bz(bz, 0.0)
    assert np.max(np.abs(divergence(j).data)) <= 1e-6 * j.magnitude().max() / pitch
    assert j.metadata["window"] == "hann" and j.metadata["pad_factor"] == 2


def test_power_ground_pair_resolved():
    pitch = 1e-6
    grid = GridGeometry(64, 64, pitch)
    pair = CurrentTrace(straight_wire(27e-6).segments + straight_wire(37e-6, -I).segments)
    bz = sheet_forward(rasterize_trace(pair, grid, 0.0), 3e-6).bz
    j = invert_bz(bz, 0.0, InversionConfig(cutoff_wavenumber="nyquist"))
    profile = j.jy.data[16:48].mean(axis=0)
    assert abs(int(np.argmax(profile)) - 27) <= 1
    assert abs(int(np.argmin(profile)) - 37) <= 1


def test_padding_continues_the_border():
    data = np.outer(np.ones(4), np.linspace(1.0, 2.0, 32))
    assert _extend_axis(data, 32, axis=1) is data
    extended = _extend_axis(data, 64, axis=1)
    assert extended.shape == (4, 64)
    assert np.array_equal(extended[:, :32], data)
    pad = extended[0, 32:]
    assert np.all(pad > 0.0) and np.all(pad < 2.0)
    # no jump at the border or across the periodic wrap
    assert np.max(np.abs(np.diff(np.append(extended[0], extended[0, 0])))) <= 0.3
    tall = _extend_axis(data.T, 80, axis=0)
    assert tall.shape == (80, 4)
    assert np.allclose(tall[32:, 0], _extend_axis(data, 80, axis=1)[0, 32:])


def test_border_softening_keeps_smooth_fields_and_damps_noise():
    rows, cols = np.indices((64, 64))
    smooth = np.sin(rows / 40.0) + np.cos(cols / 50.0)
    assert np.allclose(_soften_border(smooth), smooth, atol=0.05)
    noise = np.random.default_rng(2).normal(0.0, 1.0, size=(64, 64))
    softened = _soften_border(noise)
    assert np.std(softened[:2, 8:56]) < 0.6 * np.std(noise[:2, 8:56])
    assert np.array_equal(softened[8:56, 8:56], noise[8:56, 8:56])


def test_cutoff_above_nyquist():
    grid = GridGeometry(16, 16, 1e-6, 4e-6)
    bz = FieldMap(grid, np.zeros((16, 16)), "T", "Bz")
    with pytest.raises(CutoffError):
        invert_bz(bz, 0.0, InversionConfig(cutoff_wavenumber=2 * np.pi / 1e-6))
    with pytest.raises(StandoffError):
        invert_bz(bz, 4e-6)


def test_divergence_of_linear_field():
    pitch = 2e-6
    grid = GridGeometry(10, 8, pitch)
    xs, _ = grid.coordinates()
    constant = CurrentDensityMap.from_arrays(grid, np.full((8, 10), 3.0), np.zeros((8, 10)), 0.0)
    assert np.allclose(divergence(constant).data, 0.0)
    linear = CurrentDensityMap.from_arrays(grid, 5.0 * xs, np.zeros((8, 10)), 0.0)
    div = divergence(linear)
    assert div.unit == "A/m^2"
    assert np.allclose(div.data[1:-1, 1:-1], 5.0)


def test_depth_of_wire_along_x():
    grid = GridGeometry(96, 96, 2e-6, 30e-6)
    bz = biot_savart_polyline(straight_wire(90e-6, along="x"), grid).bz
    estimate = estimate_depth(bz)
    assert estimate.axis == "y"
    assert estimate.distance_m == pytest.approx(30e-6, rel=2e-2)
    assert estimate.current_a == pytest.approx(I, rel=2e-2)
    assert estimate.position_m == pytest.approx(90e-6, abs=2e-6)


def test_depth_of_noise_is_rejected():
    grid = GridGeometry(64, 64, 4e-6, 50e-6)
    noise = np.random.default_rng(4).normal(0.0, 1e-7, size=(64, 64))
    with pytest.raises(NotWireLikeError):
        estimate_depth(FieldMap(grid, noise, "T", "Bz"))
