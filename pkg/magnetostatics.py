"""
Magnetostatics

Current sources and the fields they make:
- real-space Biot-Savart of straight polyline segments (the reference oracle)
- rasterization of polylines into a sheet current density
- Fourier propagation of a thin current sheet to the sensor plane
- stream-function inversion of B_z back to a divergence-free sheet current
- straight-wire depth fit of a B_z map

Coordinates: pixel (row i, col j) sits at x = j * pitch, y = i * pitch.
Sheets lie at z = depth, the sensor plane at z = standoff, d = standoff - depth.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import least_squares

from errors import (CutoffError, GridMismatchError, InvalidArgumentError, NoConvergence,
                    NotWireLikeError, OutOfPlaneError, SourceOnGridError, StandoffError)
from maps_io import CurrentDensityMap, FieldMap, GridGeometry, VectorFieldMap, atomic_write

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PhysicalConstants:
    mu0: float = 4e-7 * np.pi  # T*m/A


MU0 = PhysicalConstants().mu0

TAPER_PIXELS = 8
BORDER_SMOOTHING_PIXELS = 2.0
EXTENSION_PIXELS = 16
BORDER_FRAME_PIXELS = 4
SAMPLES_PER_PIXEL = 16


# ---------------------------------------------------------------- sources

@dataclass(frozen=True, eq=False)
class Polyline:
    """Connected straight segments carrying one current; positive flows in point order"""
    points: np.ndarray
    current_a: float

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
            raise InvalidArgumentError(f"polyline needs at least two 3D points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("polyline coordinates must be finite")
        if not np.isfinite(self.current_a) or self.current_a == 0:
            raise InvalidArgumentError("polyline current must be finite and non-zero")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "current_a", float(self.current_a))

    def to_dict(self) -> Dict:
        return {"points": self.points.tolist(), "current_a": self.current_a}


@dataclass(frozen=True, eq=False)
class CurrentTrace:
    segments: Tuple[Polyline, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    def scaled(self, factor: float) -> "CurrentTrace":
        return CurrentTrace(tuple(Polyline(p.points, p.current_a * factor) for p in self.segments))

    def to_dict(self) -> Dict:
        return {"segments": [p.to_dict() for p in self.segments]}

    @classmethod
    def from_dict(cls, data: Dict) -> "CurrentTrace":
        try:
            return cls(tuple(Polyline(s["points"], s["current_a"]) for s in data["segments"]))
        except (KeyError, TypeError) as e:
            raise InvalidArgumentError(f"malformed current trace: {e}")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CurrentTrace":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise InvalidArgumentError(f"current trace is not valid JSON: {e}")

    def save(self, path: Union[str, Path]):
        atomic_write(path, self.to_json().encode())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CurrentTrace":
        with open(path, "r") as f:
            return cls.from_json(f.read())


@dataclass(frozen=True)
class InversionConfig:
    window: str = "hann"
    cutoff_wavenumber: Union[float, str] = "auto"  # rad/m, "auto" or "nyquist"
    pad_factor: int = 2
    assume_divergence_free: bool = True

    def __post_init__(self):
        if self.window != "hann":
            raise InvalidArgumentError(f"unsupported window {self.window!r}")
        if int(self.pad_factor) < 1:
            raise InvalidArgumentError("pad_factor must be at least 1")
        if not self.assume_divergence_free:
            raise InvalidArgumentError("only the divergence-free stream-function reconstruction is available")
        if isinstance(self.cutoff_wavenumber, str):
            if self.cutoff_wavenumber not in ("auto", "nyquist"):
                raise InvalidArgumentError(f"cutoff must be a number, 'auto' or 'nyquist'")
        elif not np.isfinite(self.cutoff_wavenumber) or self.cutoff_wavenumber <= 0:
            raise CutoffError(f"cutoff wavenumber must be positive, got {self.cutoff_wavenumber}")


@dataclass(frozen=True)
class DepthEstimate:
    distance_m: float   # sensor-to-wire distance d
    depth_m: float      # standoff - d
    position_m: float   # wire offset along the profile axis
    current_a: float
    residual: float     # rms(residual) / rms(profile)
    axis: str           # profile axis, "x" for a wire running along y

    def to_dict(self) -> Dict:
        return {"distance_m": self.distance_m, "depth_m": self.depth_m, "position_m": self.position_m,
                "current_a": self.current_a, "residual": self.residual, "axis": self.axis}


# ---------------------------------------------------------------- real-space oracle

def _plane_points(geometry: GridGeometry) -> np.ndarray:
    xs, ys = geometry.coordinates()
    return np.stack([xs, ys, np.full_like(xs, geometry.standoff)], axis=-1)


def biot_savart_polyline(trace: CurrentTrace, geometry: GridGeometry) -> VectorFieldMap:
    """Exact finite-segment field of every polyline, evaluated on the plane z = standoff"""
    points = _plane_points(geometry)
    total = np.zeros(points.shape)
    min_distance = geometry.pitch / 100.0

    for line in trace.segments:
        prefactor = MU0 * line.current_a / (4.0 * np.pi)
        for a, b in zip(line.points[:-1], line.points[1:]):
            ab = b - a
            length_sq = float(ab @ ab)
            if length_sq == 0.0:
                continue
            r1 = points - a
            r2 = points - b
            t = np.clip((r1 @ ab) / length_sq, 0.0, 1.0)
            closest = np.linalg.norm(r1 - t[..., None] * ab, axis=-1)
            if closest.min() <= min_distance:
                raise SourceOnGridError(f"segment {a.tolist()} -> {b.tolist()} passes through the evaluation plane")
            n1 = np.linalg.norm(r1, axis=-1)
            n2 = np.linalg.norm(r2, axis=-1)
            scale = (n1 + n2) / (n1 * n2 * (n1 * n2 + np.einsum("...k,...k->...", r1, r2)))
            total += prefactor * np.cross(r1, r2) * scale[..., None]

    return VectorFieldMap.from_array(geometry, total)


# ---------------------------------------------------------------- rasterization

def _clip_segment(p0: np.ndarray, p1: np.ndarray, lo: np.ndarray,
                  hi: np.ndarray) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Liang-Barsky clip of p0->p1 against the box [lo, hi]"""
    d = p1 - p0
    t0, t1 = 0.0, 1.0
    for axis in range(2):
        for p, q in ((-d[axis], p0[axis] - lo[axis]), (d[axis], hi[axis] - p0[axis])):
            if p == 0:
                if q < 0:
                    return None
                continue
            r = q / p
            if p < 0:
                t0 = max(t0, r)
            else:
                t1 = min(t1, r)
    if t0 >= t1:
        return None
    return p0 + t0 * d, p0 + t1 * d


def _deposit(target: np.ndarray, rows: np.ndarray, cols: np.ndarray, values: np.ndarray):
    """Bilinear (tent) splat of values at fractional pixel positions, dropping off-grid weight"""
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    fr = rows - r0
    fc = cols - c0
    height, width = target.shape
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            inside = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
            np.add.at(target, (rr[inside], cc[inside]), (wr * wc * values)[inside])


def rasterize_trace(trace: CurrentTrace, geometry: GridGeometry, depth: float) -> CurrentDensityMap:
    """
    Anti-aliased sheet current density of an in-plane trace.

    Each segment is clipped one pixel beyond the grid, sampled at no more
    than pitch/16 and splatted with bilinear weights, so a cut across the
    wire collects the full current.
    """
    pitch = geometry.pitch
    jx = np.zeros(geometry.shape)
    jy = np.zeros(geometry.shape)
    lo = np.array([-1.0, -1.0])
    hi = np.array([geometry.width, geometry.height], dtype=np.float64)

    for line in trace.segments:
        offset = np.abs(line.points[:, 2] - depth).max()
        if offset > pitch / 10.0:
            raise OutOfPlaneError(f"trace point lies {offset:.3e} m off the sheet plane z = {depth:.3e} m")
        pixels = line.points[:, :2] / pitch  # (col, row)
        for a, b in zip(pixels[:-1], pixels[1:]):
            clipped = _clip_segment(a, b, lo, hi)
            if clipped is None:
                continue
            start, end = clipped
            delta = end - start
            length = float(np.hypot(*delta))
            if length == 0.0:
                continue
            # whole-pixel lengths keep sample cells on the pixel lattice
            n = max(1, int(np.ceil(length * SAMPLES_PER_PIXEL - 1e-9)))
            t = (np.arange(n) + 0.5) / n
            cols = start[0] + t * delta[0]
            rows = start[1] + t * delta[1]
            # I * dl / pitch^2 with dl = length * pitch / n
            weight = np.full(n, line.current_a * length / (n * pitch))
            _deposit(jx, rows, cols, weight * delta[0] / length)
            _deposit(jy, rows, cols, weight * delta[1] / length)

    return CurrentDensityMap.from_arrays(geometry, jx, jy, depth)


# ---------------------------------------------------------------- Fourier sheet model

def _wavenumbers(shape: Tuple[int, int], pitch: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    ky = 2.0 * np.pi * np.fft.fftfreq(shape[0], pitch)
    kx = 2.0 * np.pi * np.fft.fftfreq(shape[1], pitch)
    KX, KY = np.meshgrid(kx, ky)
    return KX, KY, np.hypot(KX, KY)


def _pad(data: np.ndarray, factor: int) -> np.ndarray:
    padded = np.zeros((data.shape[0] * factor, data.shape[1] * factor))
    padded[:data.shape[0], :data.shape[1]] = data
    return padded


def sheet_forward(j: CurrentDensityMap, standoff: float, pad_factor: int = 2) -> VectorFieldMap:
    """Field of a thin current sheet on the plane z = standoff, computed mode by mode"""
    d = standoff - j.depth
    if d <= 0:
        raise StandoffError(f"standoff {standoff:.3e} m must exceed sheet depth {j.depth:.3e} m")
    if pad_factor < 1:
        raise InvalidArgumentError("pad_factor must be at least 1")

    geometry = j.geometry
    height, width = geometry.shape
    jx_hat = np.fft.fft2(_pad(j.jx.data, pad_factor))
    jy_hat = np.fft.fft2(_pad(j.jy.data, pad_factor))
    KX, KY, K = _wavenumbers(jx_hat.shape, geometry.pitch)

    decay = 0.5 * MU0 * np.exp(-K * d)
    safe_k = np.where(K == 0, 1.0, K)
    bx_hat = decay * jy_hat
    by_hat = -decay * jx_hat
    bz_hat = decay * (1j * KX * jy_hat - 1j * KY * jx_hat) / safe_k
    for b_hat in (bx_hat, by_hat, bz_hat):
        b_hat[0, 0] = 0.0

    components = [np.real(np.fft.ifft2(b_hat))[:height, :width] for b_hat in (bx_hat, by_hat, bz_hat)]
    return VectorFieldMap.from_array(geometry.with_standoff(standoff), np.stack(components, axis=-1))


def _edge_taper(n: int, ramp: int) -> np.ndarray:
    ramp = min(ramp, n // 4)
    taper = np.ones(n)
    if ramp > 0:
        rise = 0.5 * (1.0 - np.cos(np.pi * (np.arange(ramp) + 0.5) / ramp))
        taper[:ramp] = rise
        taper[n - ramp:] = rise[::-1]
    return taper


def _soften_border(data: np.ndarray, ramp: int = TAPER_PIXELS) -> np.ndarray:
    """Hann-ramp the outer pixels into a copy smoothed along the border; smooth fields pass, noise is damped"""
    softened = data
    for axis in (0, 1):
        taper = _edge_taper(data.shape[axis], ramp)
        taper = taper[:, None] if axis == 0 else taper[None, :]
        along = gaussian_filter1d(softened, BORDER_SMOOTHING_PIXELS, axis=1 - axis, mode="nearest")
        softened = taper * softened + (1.0 - taper) * along
    return softened


def _extend_axis(data: np.ndarray, size: int, axis: int) -> np.ndarray:
    """
    Grow data to size samples along axis.

    The padding holds exponentially decaying copies of both edges, rolled
    off with a half cosine so the sum is continuous across the periodic wrap.
    """
    n = data.shape[axis]
    gap = size - n
    if gap <= 0:
        return data
    decay = min(float(EXTENSION_PIXELS), max(gap / 4.0, 1.0))
    distance = np.arange(1, gap + 1, dtype=np.float64)

    def profile(s: np.ndarray) -> np.ndarray:
        return np.exp(-s / decay) * 0.5 * (1.0 + np.cos(np.pi * s / (gap + 1)))

    shape = [1, 1]
    shape[axis] = gap
    extension = (np.take(data, [n - 1], axis=axis) * profile(distance).reshape(shape)
                 + np.take(data, [0], axis=axis) * profile(gap + 1 - distance).reshape(shape))
    return np.concatenate([data, extension], axis=axis)


def _prepare_for_transform(data: np.ndarray, pad_factor: int) -> np.ndarray:
    height, width = data.shape
    if pad_factor == 1:
        # no room to continue the map, so the ramp has to reach zero inside it
        return data * np.outer(_edge_taper(height, TAPER_PIXELS), _edge_taper(width, TAPER_PIXELS))
    extended = _extend_axis(_soften_border(data), width * pad_factor, axis=1)
    return _extend_axis(extended, height * pad_factor, axis=0)


def border_noise(data: np.ndarray, frame: int = BORDER_FRAME_PIXELS) -> float:
    """Robust noise sigma from second differences in the border frame"""
    height, width = data.shape
    frame = max(1, min(frame, height // 2, width // 2))
    diffs = []
    if width >= 3:
        strips = np.concatenate([data[:frame], data[height - frame:]])
        diffs.append(np.diff(strips, n=2, axis=1).ravel())
    if height >= 3:
        strips = np.concatenate([data[:, :frame], data[:, width - frame:]], axis=1)
        diffs.append(np.diff(strips, n=2, axis=0).ravel())
    if not diffs:
        return 0.0
    d2 = np.concatenate(diffs)
    # second difference of white noise has variance 6 sigma^2
    return float(1.4826 * np.median(np.abs(d2 - np.median(d2))) / np.sqrt(6.0))


def choose_cutoff(bz: FieldMap, d: float, config: InversionConfig) -> float:
    nyquist = np.pi / bz.pitch
    if config.cutoff_wavenumber == "nyquist":
        return nyquist
    if config.cutoff_wavenumber != "auto":
        cutoff = float(config.cutoff_wavenumber)
        if cutoff > nyquist:
            raise CutoffError(f"cutoff {cutoff:.4e} rad/m above Nyquist {nyquist:.4e} rad/m")
        return cutoff
    peak = float(np.max(np.abs(bz.data)))
    noise = border_noise(bz.data)
    if peak == 0.0 or noise <= 0.0 or noise >= peak:
        return nyquist
    return float(min(nyquist, np.log(peak / noise) / d))


def invert_bz(bz: FieldMap, depth: float, config: InversionConfig = InversionConfig()) -> CurrentDensityMap:
    """
    Sheet current at z = depth that produces the measured B_z.

    The stream function g is recovered from B_z with the e^{+kd} kernel,
    low-passed by a Hann window, then differentiated as
    J_x = dg/dy, J_y = -dg/dx, which makes the result divergence-free.
    The padding continues the map past its border instead of cutting its
    tails to zero, so the near-DC modes are not biased by the crop.
    """
    d = bz.standoff - depth
    if d <= 0:
        raise StandoffError(f"standoff {bz.standoff:.3e} m must exceed sheet depth {depth:.3e} m")
    cutoff = choose_cutoff(bz, d, config)
    pad_factor = int(config.pad_factor)

    height, width = bz.geometry.shape
    bz_hat = np.fft.fft2(_prepare_for_transform(bz.data, pad_factor))
    _, _, K = _wavenumbers(bz_hat.shape, bz.pitch)

    passband = K < cutoff
    window = np.where(passband, 0.5 * (1.0 + np.cos(np.pi * K / cutoff)), 0.0)
    gain = np.zeros_like(K)
    kk = K[passband & (K > 0)]
    gain[passband & (K > 0)] = 2.0 * np.exp(kk * d) / (MU0 * kk)
    g_hat = bz_hat * gain * window
    g_hat[0, 0] = 0.0

    g = np.real(np.fft.ifft2(g_hat))[:height, :width]
    dg_dy, dg_dx = _gradients(g, bz.pitch)
    logger.info(f"Inverted B_z at d = {d:.3e} m with cutoff {cutoff:.4e} rad/m")

    metadata = {"cutoff_wavenumber": cutoff, "window": config.window, "pad_factor": pad_factor,
                "depth": float(depth), "standoff": bz.standoff}
    return CurrentDensityMap.from_arrays(bz.geometry, dg_dy, -dg_dx, depth, metadata)


def _gradients(data: np.ndarray, pitch: float) -> Tuple[np.ndarray, np.ndarray]:
    """(d/dy, d/dx) by central differences, one-sided at borders; zero along length-1 axes"""
    d_dy = np.gradient(data, pitch, axis=0) if data.shape[0] > 1 else np.zeros_like(data)
    d_dx = np.gradient(data, pitch, axis=1) if data.shape[1] > 1 else np.zeros_like(data)
    return d_dy, d_dx


def divergence(j: CurrentDensityMap) -> FieldMap:
    _, djx_dx = _gradients(j.jx.data, j.geometry.pitch)
    djy_dy, _ = _gradients(j.jy.data, j.geometry.pitch)
    return FieldMap(j.geometry, djx_dx + djy_dy, "A/m^2", "divJ")


def field_consistency(measured: VectorFieldMap, j: CurrentDensityMap) -> Dict[str, float]:
    """Relative L2 mismatch of measured B_x, B_y against those predicted from j"""
    if not (measured.geometry.width == j.geometry.width and measured.geometry.height == j.geometry.height
            and measured.geometry.pitch == j.geometry.pitch):
        raise GridMismatchError("field map and current map are not co-registered")
    predicted = sheet_forward(j, measured.geometry.standoff)
    result = {}
    for name, meas, pred in (("bx", measured.bx.data, predicted.bx.data), ("by", measured.by.data, predicted.by.data)):
        scale = np.linalg.norm(meas) or np.linalg.norm(pred) or 1.0
        result[name] = float(np.linalg.norm(pred - meas) / scale)
    return result


# ---------------------------------------------------------------- depth

def _wire_profile(u: np.ndarray, params: np.ndarray) -> np.ndarray:
    x0, d, amplitude = params
    s = u - x0
    return -amplitude * s / (s * s + d * d)


def estimate_depth(bz: FieldMap, max_residual: float = 0.3, starts: int = 5) -> DepthEstimate:
    """
    Fit the straight-wire B_z profile -mu0 I (x - x0) / (2 pi ((x - x0)^2 + d^2))
    to the averaged cross-section of the map, multi-started over depths
    log-spaced in [pitch, 50 pitch]. Everything is fitted in pixel units.
    """
    along_y = bz.data.mean(axis=0)   # profile across x, wire running along y
    along_x = bz.data.mean(axis=1)   # profile across y, wire running along x
    if np.ptp(along_y) >= np.ptp(along_x):
        profile, axis, sign = along_y, "x", 1.0
    else:
        # a wire along +x gives B_z = +mu0 I (y - y0) / ...
        profile, axis, sign = along_x, "y", -1.0

    u = np.arange(profile.size, dtype=np.float64)
    scale = float(np.sqrt(np.mean(profile ** 2)))
    if scale == 0.0:
        raise NotWireLikeError("map is identically zero")
    x0_guess = 0.5 * (np.argmax(profile) + np.argmin(profile))
    swing = float(profile.max() - profile.min())
    if np.argmax(profile) > np.argmin(profile):
        swing = -swing

    best = None
    for d0 in np.logspace(0.0, np.log10(50.0), starts):
        try:
            fit = least_squares(lambda p: (_wire_profile(u, p) - profile) / scale,
                                x0=[x0_guess, d0, swing * d0],
                                bounds=([-np.inf, 1e-3, -np.inf], [np.inf, np.inf, np.inf]))
        except (ValueError, np.linalg.LinAlgError) as e:
            logger.debug(f"depth start {d0:.2f} px failed: {e}")
            continue
        if fit.success and (best is None or fit.cost < best.cost):
            best = fit
    if best is None:
        raise NoConvergence("no depth fit converged")

    residual = float(np.sqrt(np.mean(best.fun ** 2)))
    if residual > max_residual:
        raise NotWireLikeError(f"relative residual {residual:.3f} exceeds {max_residual}")

    x0, d, amplitude = best.x
    pitch = bz.pitch
    distance = float(d * pitch)
    current = float(sign * amplitude * 2.0 * np.pi * pitch / MU0)
    logger.info(f"Wire fit: d = {distance:.3e} m, I = {current:.3e} A, residual {residual:.3f}")
    return DepthEstimate(distance, bz.standoff - distance, float(x0 * pitch), current, residual, axis)
