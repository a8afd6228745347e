"""
End-to-end acceptance checks on synthetic devices and the shipped scenarios
"""
import json
from pathlib import Path

import numpy as np
import pytest

from cli import Scenario, main
from fault_analysis import (ComparisonConfig, IVCurve, LockInSeries, TraceConfig, classify_iv, compare_paths,
                            lockin_demodulate, trace_current)
from fault_analysis.paths import TERMINATED
from magnetostatics import (CurrentTrace, InversionConfig, Polyline, biot_savart_polyline, estimate_depth,
                            invert_bz, rasterize_trace, sheet_forward)
from maps_io import CurrentDensityMap, GridGeometry
from nv_model import LineShapeParams, NVFrame, synthesize_odmr
from odmr_inversion import reconstruct_map

SCENARIOS = Path(__file__).parent / "scenarios"
I = 100e-6
# sqrt(3) * (0.9, 0.7, -0.5) mT keeps all eight resonances apart; a bias along (1,1,1) merges three axes
BIAS = np.sqrt(3.0) * np.array([0.9e-3, 0.7e-3, -0.5e-3])


def long_wire_y(x):
    return CurrentTrace((Polyline([[x, -0.1, 0.0], [x, 0.1, 0.0]], I),))


def gaussian_stream_current(size=128, sigma=8.0, pitch=1e-6):
    grid = GridGeometry(size, size, pitch)
    rows, cols = np.indices(grid.shape).astype(np.float64)
    c = size / 2.0
    g = 1e-4 * np.exp(-((rows - c) ** 2 + (cols - c) ** 2) / (2 * sigma ** 2))
    # J = (dg/dy, -dg/dx) with y along rows
    jx = -(rows - c) / (sigma ** 2 * pitch) * g
    jy = (cols - c) / (sigma ** 2 * pitch) * g
    return CurrentDensityMap.from_arrays(grid, jx, jy, 0.0)


def relative_error(recovered: CurrentDensityMap, truth: CurrentDensityMap) -> float:
    diff = np.hypot(recovered.jx.data - truth.jx.data, recovered.jy.data - truth.jy.data)
    return float(np.linalg.norm(diff) / np.linalg.norm(truth.magnitude()))


def test_odmr_round_trip_over_wire_field():
    grid = GridGeometry(64, 64, 4e-6, 50e-6)
    field = biot_savart_polyline(long_wire_y(32 * 4e-6), grid)
    freqs = np.linspace(2.870e9 - 80e6, 2.870e9 + 80e6, 201)
    frame = NVFrame(bias_field=BIAS)
    cube = synthesize_odmr(field, frame, freqs, LineShapeParams())
    recovered, mask = reconstruct_map(cube, frame)
    assert np.all(mask.data == 1.0)
    error = np.max(np.abs(recovered.stack() - field.stack()))
    assert error <= 0.1e-6


def test_inversion_round_trip_noiseless():
    truth = gaussian_stream_current()
    bz = sheet_forward(truth, 4e-6).bz
    recovered = invert_bz(bz, 0.0, InversionConfig(pad_factor=2))
    assert relative_error(recovered, truth) <= 0.02


def test_inversion_round_trip_with_noise():
    truth = gaussian_stream_current()
    bz = sheet_forward(truth, 4e-6).bz
    sigma = 0.01 * np.max(np.abs(bz.data))
    errors = []
    for seed in range(20):
        noisy = bz.with_data(bz.data + np.random.default_rng(seed).normal(0.0, sigma, size=bz.data.shape))
        errors.append(relative_error(invert_bz(noisy, 0.0), truth))
    assert np.median(errors) <= 0.10


def test_sheet_model_agrees_with_oracle():
    pitch = 10e-6
    grid = GridGeometry(256, 256, pitch, 20e-6)
    wire = long_wire_y(128 * pitch)
    oracle = biot_savart_polyline(wire, grid).bz.data
    sheet = sheet_forward(rasterize_trace(wire, grid, 0.0), grid.standoff).bz.data
    interior = (slice(64, 192), slice(64, 192))
    assert np.max(np.abs(sheet[interior] - oracle[interior])) <= 0.05 * np.max(np.abs(oracle))


def scenario_current(name: str) -> CurrentDensityMap:
    scenario = Scenario.load(SCENARIOS / f"{name}.json")
    bz = biot_savart_polyline(scenario.trace(), scenario.grid).bz
    return invert_bz(bz, scenario.depth, InversionConfig(cutoff_wavenumber="nyquist"))


def test_missing_branch_in_short_package():
    reference = scenario_current("two_branch_kgd")
    device = scenario_current("single_path_short")
    seed = Scenario.load(SCENARIOS / "two_branch_kgd.json").seed_px
    config = ComparisonConfig(trace=TraceConfig(stop_fraction=0.25))

    report = compare_paths(reference, device, seed, config)
    assert report.kind == "MissingBranch"
    assert np.hypot(report.location_px[0] - 24, report.location_px[1] - 32) <= 2.0

    # the short carries the whole current down the branch both devices share
    shared = (slice(28, 41), slice(29, 36))
    assert device.magnitude()[shared].max() > reference.magnitude()[shared].max()

    path = trace_current(device, seed, config.trace)
    assert path.reason == TERMINATED
    assert np.hypot(path.points[-1][0] - 44, path.points[-1][1] - 32) <= 2.0


def wire_bz(noise_fraction=0.0, seed=0):
    pitch = 4e-6
    grid = GridGeometry(128, 128, pitch, 50e-6)
    bz = biot_savart_polyline(long_wire_y(64 * pitch), grid).bz
    if noise_fraction:
        sigma = noise_fraction * np.max(np.abs(bz.data))
        bz = bz.with_data(bz.data + np.random.default_rng(seed).normal(0.0, sigma, size=bz.data.shape))
    return bz


def test_depth_noiseless():
    estimate = estimate_depth(wire_bz())
    assert estimate.distance_m == pytest.approx(50e-6, rel=0.02)
    assert estimate.depth_m == pytest.approx(0.0, abs=1e-6)
    assert estimate.current_a == pytest.approx(I, rel=0.02)


def test_depth_with_noise():
    errors = [abs(estimate_depth(wire_bz(0.05, seed)).distance_m - 50e-6) / 50e-6 for seed in range(100)]
    assert np.percentile(errors, 95) <= 0.10


def test_lockin_whole_period_exactness():
    fs, f = 1000.0, 25.0
    t = np.arange(400) / fs
    frames = (5.0 * np.sin(2 * np.pi * f * t + 0.3))[:, None, None] * np.ones((1, 4, 4))
    amplitude, phase = lockin_demodulate(LockInSeries(GridGeometry(4, 4, 1e-5), frames, fs, f))
    assert np.allclose(amplitude.data, 5.0, rtol=1e-9, atol=0)
    assert np.allclose(phase.data, 0.3, rtol=1e-9, atol=0)
    dc, _ = lockin_demodulate(LockInSeries(GridGeometry(4, 4, 1e-5), np.full((400, 4, 4), 3.0), fs, f))
    assert np.max(dc.data) <= 1e-12


def test_iv_classes():
    v = np.linspace(0.0, 0.7, 15)
    ohmic = classify_iv(IVCurve(v, v / 33.0))
    assert ohmic.kind == "ShortSuspected"
    assert ohmic.resistance_ohm == pytest.approx(33.0, rel=1e-9)
    assert classify_iv(IVCurve(v, 1e-14 * np.expm1(v / 0.02585))).kind == "Nominal"
    assert classify_iv(IVCurve(v, 1e-11 * v)).kind == "Open"


def run_pipeline(workdir: Path, scenario: Path):
    workdir.mkdir()
    steps = [
        ["simulate", "--scenario", scenario, "--out", workdir / "b.qfm"],
        ["synth-odmr", "--in", workdir / "b.qfm", "--scenario", scenario, "--seed", 7, "--out", workdir / "c.qdcb"],
        ["fit", "--in", workdir / "c.qdcb", "--scenario", scenario, "--workers", 2, "--out", workdir / "f.qfm"],
        ["invert", "--in", workdir / "f.qfm", "--out", workdir / "j.qfm"],
        ["trace", "--in", workdir / "j.qfm", "--seed-px", 4, 6, "--out", workdir / "path.json"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0
    return {p.name: p.read_bytes() for p in sorted(workdir.iterdir())}


def test_cli_pipeline_is_byte_identical(tmp_path):
    trace = {"segments": [{"points": [[24e-6, -1e-3, 0.0], [24e-6, 1e-3, 0.0]], "current_a": I}]}
    (tmp_path / "trace.json").write_text(json.dumps(trace))
    scenario = tmp_path / "scenario.json"
    scenario.write_text(json.dumps({
        "grid": {"width": 12, "height": 10, "pitch": 4e-6},
        "standoff": 1.2e-5,
        "trace": "trace.json",
        "bias_field_t": BIAS.tolist(),
        "line_shape": {"contrast": 0.02, "linewidth_fwhm_hz": 8e6, "photon_noise_sigma": 1e-5},
    }))
    first = run_pipeline(tmp_path / "run1", scenario)
    second = run_pipeline(tmp_path / "run2", scenario)
    assert first.keys() == second.keys()
    for name in first:
        assert first[name] == second[name], name
