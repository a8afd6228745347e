"""
qdm-fa command line

Every stage of the failure-analysis workflow is a subcommand that reads and
writes plain files, so an evidence chain can be archived and replayed:

    simulate -> synth-odmr -> fit -> diff -> invert -> trace / compare -> render
    iv, lockin -> hotspot -> correlate

Domain errors exit 1 with one JSON line on stderr: {"error": code, "message": text}.
Usage errors exit 2.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import InvalidArgumentError, QDMError
from fault_analysis import (AnomalyReport, ComparisonConfig, Hotspot, IVCurve, LockInSeries, TraceConfig,
                            classify_iv, compare_paths, correlate_hotspot, detect_hotspot,
                            lockin_demodulate, trace_current)
from magnetostatics import (CurrentTrace, InversionConfig, biot_savart_polyline, estimate_depth,
                            invert_bz, rasterize_trace, sheet_forward)
from maps_io import (FieldMap, GridGeometry, VectorFieldMap, atomic_write, current_from_channels, read_qdcb,
                     read_qfm, render_pgm, subtract, vector_from_channels, write_qdcb, write_qfm)
from nv_model import LineShapeParams, NVFrame, synthesize_odmr
from odmr_inversion import FitConfig, reconstruct_map

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Scenario:
    """One measurement setup: grid, source, NV bias and ODMR sweep"""
    grid: GridGeometry
    depth: float
    trace_path: Path
    bias_field_t: Tuple[float, float, float]
    line_shape: LineShapeParams = field(default_factory=LineShapeParams)
    sweep: Tuple[float, float, int] = (2.79e9, 2.95e9, 201)
    seed_px: Optional[Tuple[float, float]] = None
    sign_margin_factor: float = 10.0
    expected_signal_t: float = 1e-5

    def __post_init__(self):
        start, stop, points = self.sweep
        if not stop > start or int(points) < 8:
            raise InvalidArgumentError("sweep needs stop > start and at least 8 points")
        if self.grid.standoff <= self.depth:
            raise InvalidArgumentError("scenario standoff must exceed the sheet depth")

    @property
    def standoff(self) -> float:
        return self.grid.standoff

    def frequencies(self) -> np.ndarray:
        start, stop, points = self.sweep
        return np.linspace(start, stop, int(points))

    def trace(self) -> CurrentTrace:
        return CurrentTrace.load(self.trace_path)

    def frame(self) -> NVFrame:
        return NVFrame(bias_field=np.array(self.bias_field_t), sign_margin_factor=self.sign_margin_factor,
                       expected_signal_t=self.expected_signal_t)

    @classmethod
    def from_dict(cls, data: Dict, base: Path = Path(".")) -> "Scenario":
        try:
            grid = data["grid"]
            sweep = data.get("sweep", {})
            return cls(
                grid=GridGeometry(grid["width"], grid["height"], grid["pitch"], data["standoff"]),
                depth=float(data.get("depth", 0.0)),
                trace_path=base / data["trace"],
                bias_field_t=tuple(float(v) for v in data["bias_field_t"]),
                line_shape=LineShapeParams.from_dict(data.get("line_shape", {})),
                sweep=(float(sweep.get("start_hz", 2.79e9)), float(sweep.get("stop_hz", 2.95e9)),
                       int(sweep.get("points", 201))),
                seed_px=tuple(data["seed_px"]) if "seed_px" in data else None,
                sign_margin_factor=float(data.get("sign_margin_factor", 10.0)),
                expected_signal_t=float(data.get("expected_signal_t", 1e-5)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidArgumentError(f"malformed scenario: {e}")

    @classmethod
    def load(cls, path) -> "Scenario":
        path = Path(path)
        with open(path, "r") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise InvalidArgumentError(f"{path} is not valid JSON: {e}")
        return cls.from_dict(data, path.parent)


def _emit_json(payload, out: Optional[str]):
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out:
        atomic_write(out, text.encode())
    else:
        sys.stdout.write(text)


def _load_json(path: str):
    with open(path, "r") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise InvalidArgumentError(f"{path} is not valid JSON: {e}")


def _read_vector(path: str) -> VectorFieldMap:
    return vector_from_channels(read_qfm(path))


def _read_channel(path: str, name: str):
    channels = read_qfm(path)
    if name not in channels:
        raise InvalidArgumentError(f"{path} has no channel {name!r}; found {list(channels)}")
    return channels[name]


def _cutoff(text: str):
    if text in ("auto", "nyquist"):
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"cutoff must be a number, 'auto' or 'nyquist', got {text!r}")


# ---------------------------------------------------------------- subcommands

def cmd_simulate(args):
    scenario = Scenario.load(args.scenario)
    field_map = biot_savart_polyline(scenario.trace(), scenario.grid)
    write_qfm(field_map, args.out)
    logger.info(f"Simulated field written to {args.out}")


def cmd_rasterize(args):
    scenario = Scenario.load(args.scenario)
    j = rasterize_trace(scenario.trace(), scenario.grid, scenario.depth)
    write_qfm(j, args.out)


def cmd_forward(args):
    j = current_from_channels(read_qfm(args.input))
    write_qfm(sheet_forward(j, args.standoff, args.pad), args.out)


def cmd_synth_odmr(args):
    scenario = Scenario.load(args.scenario)
    field_map = _read_vector(args.input)
    shape = LineShapeParams(scenario.line_shape.contrast, scenario.line_shape.linewidth_fwhm_hz,
                            scenario.line_shape.photon_noise_sigma, args.seed)
    cube = synthesize_odmr(field_map, scenario.frame(), scenario.frequencies(), shape)
    write_qdcb(cube, args.out)


def cmd_fit(args):
    scenario = Scenario.load(args.scenario)
    cube = read_qdcb(args.input)
    field_map, mask = reconstruct_map(cube, scenario.frame(), shape=scenario.line_shape,
                                      config=FitConfig(), workers=args.workers)
    # the camera cube carries no standoff; the scenario does
    geometry = field_map.geometry.with_standoff(scenario.standoff)
    channels = [(name, FieldMap(geometry, fmap.data, fmap.unit, name))
                for name, fmap in field_map.channels() + [("mask", mask)]]
    write_qfm(channels, args.out)
    logger.info(f"Fitted field map written to {args.out}")


def cmd_diff(args):
    write_qfm(subtract(_read_vector(args.on), _read_vector(args.off)), args.out)


def cmd_invert(args):
    bz = _read_channel(args.input, "Bz")
    config = InversionConfig(cutoff_wavenumber=args.cutoff, pad_factor=args.pad)
    j = invert_bz(bz, args.depth, config)
    write_qfm(j, args.out)
    _emit_json(j.metadata, args.out + ".json")


def cmd_depth(args):
    estimate = estimate_depth(_read_channel(args.input, "Bz"))
    _emit_json(estimate.to_dict(), args.out)


def _trace_config(args) -> TraceConfig:
    return TraceConfig(step=args.step, max_steps=args.max_steps, stop_fraction=args.stop_fraction)


def cmd_trace(args):
    j = current_from_channels(read_qfm(args.input))
    _emit_json(trace_current(j, args.seed_px, _trace_config(args)).to_dict(), args.out)


def cmd_compare(args):
    j_ref = current_from_channels(read_qfm(args.ref))
    j_dut = current_from_channels(read_qfm(args.dut))
    report = compare_paths(j_ref, j_dut, args.seed_px, ComparisonConfig(trace=_trace_config(args)))
    _emit_json(report.to_dict(), args.out)


def cmd_iv(args):
    _emit_json(classify_iv(IVCurve.from_csv(args.csv), args.r2_threshold, args.open_floor).to_dict(), args.out)


def cmd_lockin(args):
    series = LockInSeries.from_channels(read_qfm(args.input), args.sample_rate, args.drive_frequency)
    amplitude, phase = lockin_demodulate(series)
    write_qfm([("amplitude", amplitude), ("phase", phase)], args.out)


def cmd_hotspot(args):
    hotspots = detect_hotspot(_read_channel(args.input, args.channel), args.sigma)
    _emit_json([h.to_dict() for h in hotspots], args.out)


def cmd_render(args):
    render_pgm(_read_channel(args.input, args.channel), args.low, args.high, args.out)


def cmd_correlate(args):
    report = AnomalyReport.from_dict(_load_json(args.report))
    hotspots = [Hotspot.from_dict(h) for h in _load_json(args.hotspots)]
    _emit_json(correlate_hotspot(report, hotspots, args.tolerance_px).to_dict(), args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qdm-fa", description="QDM failure-analysis toolkit (SI units throughout)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="scenario -> field QFM (Biot-Savart oracle)")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("rasterize", help="scenario trace -> J QFM")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("forward", help="J QFM -> field QFM (Fourier sheet model)")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--standoff", type=float, required=True, help="sensor plane z (m)")
    p.add_argument("--pad", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("synth-odmr", help="field QFM + scenario -> QDCB")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int, required=True, help="photon-noise seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_odmr)

    p = sub.add_parser("fit", help="QDCB -> field QFM with mask channel")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--workers", type=int, default=None, help="process count (default QDM_FIT_WORKERS)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("diff", help="current-on minus current-off field QFM")
    p.add_argument("--on", required=True)
    p.add_argument("--off", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("invert", help="field QFM -> J QFM (+ <out>.json filter metadata)")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--depth", type=float, default=0.0, help="sheet z (m)")
    p.add_argument("--cutoff", type=_cutoff, default="auto", help="rad/m, 'auto' or 'nyquist'")
    p.add_argument("--pad", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("depth", help="field QFM -> straight-wire depth JSON")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_depth)

    for name, helptext in (("trace", "J QFM + seed -> path JSON"), ("compare", "ref/dut J QFM + seed -> report JSON")):
        p = sub.add_parser(name, help=helptext)
        if name == "trace":
            p.add_argument("--in", dest="input", required=True)
            p.set_defaults(func=cmd_trace)
        else:
            p.add_argument("--ref", required=True)
            p.add_argument("--dut", required=True)
            p.set_defaults(func=cmd_compare)
        p.add_argument("--seed-px", type=float, nargs=2, required=True, metavar=("ROW", "COL"))
        p.add_argument("--step", type=float, default=0.5)
        p.add_argument("--max-steps", type=int, default=10000)
        p.add_argument("--stop-fraction", type=float, default=0.05)
        p.add_argument("--out")

    p = sub.add_parser("iv", help="voltage_v,current_a CSV -> classification JSON")
    p.add_argument("--csv", required=True)
    p.add_argument("--r2-threshold", type=float, default=0.999)
    p.add_argument("--open-floor", type=float, default=1e-9)
    p.add_argument("--out")
    p.set_defaults(func=cmd_iv)

    p = sub.add_parser("lockin", help="frame-stack QFM -> amplitude/phase QFM")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--sample-rate", type=float, required=True)
    p.add_argument("--drive-frequency", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lockin)

    p = sub.add_parser("hotspot", help="QFM channel -> hotspot list JSON")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--channel", default="amplitude")
    p.add_argument("--sigma", type=float, default=5.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_hotspot)

    p = sub.add_parser("render", help="QFM channel -> 16-bit PGM")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--channel", required=True)
    p.add_argument("--low", type=float)
    p.add_argument("--high", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("correlate", help="anomaly report + hotspot list -> match JSON")
    p.add_argument("--report", required=True)
    p.add_argument("--hotspots", required=True)
    p.add_argument("--tolerance-px", type=float, default=3.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_correlate)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        args.func(args)
    except QDMError as e:
        sys.stderr.write(json.dumps({"error": e.code, "message": str(e)}) + "\n")
        return 1
    except OSError as e:
        sys.stderr.write(json.dumps({"error": "IOError", "message": str(e)}) + "\n")
        return 1
    return 0
