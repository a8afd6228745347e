"""
Current-path tracing and reference vs device-under-test comparison

Paths live in pixel coordinates (row, col); (row, col) -> (x, y) is
(col * pitch, row * pitch). The downstream end of a path is where the
current goes; a path that ends inside the grid because |J| collapsed is
the signature of a short.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from errors import GridMismatchError, InvalidArgumentError, InvalidSeedError
from maps_io import CurrentDensityMap, GridGeometry

logger = logging.getLogger(__name__)

TERMINATED = "Terminated"
LEFT_GRID = "LeftGrid"
STEP_BUDGET = "StepBudget"
LOOP = "Loop"

KIND_NONE = "None"
KIND_TERMINATION = "Termination"
KIND_KINK = "Kink"
KIND_MISSING_BRANCH = "MissingBranch"


@dataclass(frozen=True)
class TraceConfig:
    step: float = 0.5          # pixels
    max_steps: int = 10000     # per direction
    stop_fraction: float = 0.05

    def __post_init__(self):
        if self.step <= 0 or self.max_steps < 1:
            raise InvalidArgumentError("trace step and budget must be positive")
        if not 0 < self.stop_fraction < 1:
            raise InvalidArgumentError("stop_fraction must be in (0, 1)")


@dataclass(frozen=True)
class ComparisonConfig:
    trace: TraceConfig = field(default_factory=TraceConfig)
    branch_fraction: float = 0.25   # |J| above this share of the map max counts as a conductor
    min_component_px: int = 4
    attach_px: float = 4.0
    separation_px: float = 2.0
    kink_angle_deg: float = 30.0
    kink_steps: int = 3


@dataclass(frozen=True, eq=False)
class TracedPath:
    points: np.ndarray      # (n, 2) rows of (row, col) in flow order
    reason: str             # downstream end
    start_reason: str       # upstream end
    seed_index: int
    pitch: float

    def points_m(self) -> np.ndarray:
        return np.column_stack([self.points[:, 1], self.points[:, 0]]) * self.pitch

    def downstream(self) -> np.ndarray:
        return self.points[self.seed_index:]

    def arc_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.downstream(), axis=0), axis=1)))

    def to_dict(self) -> Dict:
        return {"points_px": self.points.tolist(), "points_m": self.points_m().tolist(),
                "reason": self.reason, "start_reason": self.start_reason, "seed_index": self.seed_index}


@dataclass(frozen=True, eq=False)
class AnomalyReport:
    kind: str
    location_px: Tuple[float, float]
    location_m: Tuple[float, float]
    confidence: float
    peak_differential_a_per_m: float
    ref_path: np.ndarray
    dut_path: np.ndarray
    termination_reason: str
    separation_px: Optional[Tuple[float, float]] = None

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind,
            "location_px": [float(v) for v in self.location_px],
            "location_m": [float(v) for v in self.location_m],
            "confidence": self.confidence,
            "peak_differential_a_per_m": self.peak_differential_a_per_m,
            "ref_path": np.asarray(self.ref_path).tolist(),
            "dut_path": np.asarray(self.dut_path).tolist(),
            "termination_reason": self.termination_reason,
            "separation_px": None if self.separation_px is None else [float(v) for v in self.separation_px],
        }

    @staticmethod
    def from_dict(data: Dict) -> "AnomalyReport":
        try:
            row, col = data["location_px"]
            x, y = data["location_m"]
            separation = data.get("separation_px")
            return AnomalyReport(
                str(data["kind"]),
                (float(row), float(col)),
                (float(x), float(y)),
                float(data["confidence"]),
                float(data["peak_differential_a_per_m"]),
                np.array(data.get("ref_path", []), dtype=np.float64),
                np.array(data.get("dut_path", []), dtype=np.float64),
                str(data.get("termination_reason", "")),
                None if separation is None else (float(separation[0]), float(separation[1])),
            )
        except (AttributeError, KeyError, TypeError, ValueError) as e:
            raise InvalidArgumentError(f"malformed anomaly report: {e}")


class _FlowField:
    """Bilinear samples of J and |J| at fractional pixel positions"""

    def __init__(self, j: CurrentDensityMap):
        self.jx = j.jx.data
        self.jy = j.jy.data
        self.magnitude = j.magnitude()
        self.peak = float(self.magnitude.max())

    @staticmethod
    def _sample(grid: np.ndarray, p: np.ndarray) -> float:
        return float(ndimage.map_coordinates(grid, [[p[0]], [p[1]]], order=1, mode="nearest")[0])

    def strength(self, p: np.ndarray) -> float:
        return self._sample(self.magnitude, p)

    def direction(self, p: np.ndarray, sign: float) -> np.ndarray:
        """Unit (d_row, d_col) along the current, zero where J vanishes"""
        v = np.array([self._sample(self.jy, p), self._sample(self.jx, p)])
        norm = np.hypot(*v)
        return sign * v / norm if norm > 0 else np.zeros(2)


def _segment_distance(point: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else min(1.0, max(0.0, float((point - a) @ ab) / denom))
    return float(np.linalg.norm(point - (a + t * ab)))


def _integrate(flow: _FlowField, geometry: GridGeometry, seed: np.ndarray, sign: float,
               config: TraceConfig, threshold: float) -> Tuple[List[np.ndarray], str]:
    h = config.step
    points = [seed]
    p = seed
    departed = False
    for _ in range(config.max_steps):
        k1 = flow.direction(p, sign)
        if not k1.any():
            return points, TERMINATED
        k2 = flow.direction(p + 0.5 * h * k1, sign)
        k3 = flow.direction(p + 0.5 * h * k2, sign)
        k4 = flow.direction(p + h * k3, sign)
        new = p + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not geometry.contains(new[0], new[1]):
            return points, LEFT_GRID
        if departed and _segment_distance(seed, p, new) < 0.5 * h:
            points.append(new)
            return points, LOOP
        points.append(new)
        if flow.strength(new) < threshold:
            return points, TERMINATED
        if not departed and np.linalg.norm(new - seed) > 2.0 * h:
            departed = True
        p = new
    return points, STEP_BUDGET


def trace_current(j: CurrentDensityMap, seed: Sequence[float], config: TraceConfig = TraceConfig()) -> TracedPath:
    """
    Streamline of J/|J| through seed (row, col), integrated both ways with
    RK4 on bilinear samples. Each end stops when |J| drops below
    stop_fraction * max|J| (the final point is kept), when the next step
    would leave the grid, on the step budget, or when the path closes on
    the seed.
    """
    flow = _FlowField(j)
    geometry = j.geometry
    seed = np.array(seed, dtype=np.float64)
    threshold = config.stop_fraction * flow.peak
    if not geometry.contains(seed[0], seed[1]):
        raise InvalidSeedError(f"seed {seed.tolist()} lies outside the grid")
    if flow.peak == 0 or flow.strength(seed) < threshold:
        raise InvalidSeedError(f"|J| at seed {seed.tolist()} is below {config.stop_fraction} of the map maximum")

    forward, reason = _integrate(flow, geometry, seed, 1.0, config, threshold)
    if reason == LOOP:
        backward, start_reason = [seed], LOOP
    else:
        backward, start_reason = _integrate(flow, geometry, seed, -1.0, config, threshold)
    points = np.array(backward[::-1] + forward[1:])
    logger.debug(f"Traced {len(points)} points from {seed.tolist()}: {start_reason} -> {reason}")
    return TracedPath(points, reason, start_reason, len(backward) - 1, geometry.pitch)


# ---------------------------------------------------------------- comparison

def _nearest_on_path(points: np.ndarray, path: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Distance from each point to the polyline and the closest polyline point"""
    points = np.atleast_2d(points)
    if len(path) == 1:
        return np.linalg.norm(points - path[0], axis=1), np.repeat(path[:1], len(points), axis=0)
    a, b = path[:-1], path[1:]
    ab = b - a
    length_sq = np.einsum("ij,ij->i", ab, ab)
    length_sq[length_sq == 0] = 1.0
    t = np.clip(np.einsum("mij,ij->mi", points[:, None, :] - a[None], ab) / length_sq, 0.0, 1.0)
    projected = a[None] + t[..., None] * ab[None]
    distance = np.linalg.norm(points[:, None, :] - projected, axis=2)
    nearest = np.argmin(distance, axis=1)
    rows = np.arange(len(points))
    return distance[rows, nearest], projected[rows, nearest]


def _components(mask: np.ndarray, min_size: int) -> List[np.ndarray]:
    """Pixel (row, col) arrays of connected components, largest first"""
    labels, count = ndimage.label(mask, structure=np.ones((3, 3)))
    found = []
    for label in range(1, count + 1):
        pixels = np.argwhere(labels == label).astype(np.float64)
        if len(pixels) >= min_size:
            found.append(pixels)
    return sorted(found, key=len, reverse=True)


def _find_kink(ref: TracedPath, dut: TracedPath, config: ComparisonConfig) -> Optional[np.ndarray]:
    ref_points, dut_points = ref.downstream(), dut.downstream()
    n = min(len(ref_points), len(dut_points))
    if n < config.kink_steps + 1:
        return None
    ref_dir = np.diff(ref_points[:n], axis=0)
    dut_dir = np.diff(dut_points[:n], axis=0)
    turn = np.arctan2(dut_dir[:, 0], dut_dir[:, 1]) - np.arctan2(ref_dir[:, 0], ref_dir[:, 1])
    turn = np.degrees(np.abs(np.angle(np.exp(1j * turn))))
    run = 0
    for i, angle in enumerate(turn):
        run = run + 1 if angle > config.kink_angle_deg else 0
        if run >= config.kink_steps:
            return dut_points[i - run + 1]
    return None


def _first_separation(ref: TracedPath, dut: TracedPath, config: ComparisonConfig) -> Optional[np.ndarray]:
    """First downstream point where one path is more than separation_px from the other"""
    ref_points, dut_points = ref.downstream(), dut.downstream()
    for points, other in ((dut_points, ref_points), (ref_points, dut_points)):
        distance, _ = _nearest_on_path(points, other)
        apart = np.flatnonzero(distance > config.separation_px)
        if len(apart):
            return points[apart[0]]
    return None


def compare_paths(j_ref: CurrentDensityMap, j_dut: CurrentDensityMap, seed: Sequence[float],
                  config: ComparisonConfig = ComparisonConfig()) -> AnomalyReport:
    """
    Locate where the device under test stops carrying current the way the
    known-good reference does.

    Conductors present in only one map are found by thresholding each |J|
    at branch_fraction of its own maximum. A reference-only conductor
    touching the dut path means current the dut does not carry:
    Termination when it hangs off the dut's dead end, MissingBranch when no
    dut-only conductor replaces it nearby. Otherwise the paired paths are
    checked for a sustained turn (Kink) and an early stop (Termination).
    The first point where the paths part is reported with every result and
    stands in for the location when nothing else is found.
    """
    if not j_ref.geometry.same_grid(j_dut.geometry):
        raise GridMismatchError("reference and device maps are not co-registered")
    geometry = j_ref.geometry
    ref = trace_current(j_ref, seed, config.trace)
    dut = trace_current(j_dut, seed, config.trace)

    mag_ref, mag_dut = j_ref.magnitude(), j_dut.magnitude()
    differential = mag_dut - mag_ref
    strong_ref = mag_ref > config.branch_fraction * mag_ref.max()
    strong_dut = mag_dut > config.branch_fraction * mag_dut.max()
    ref_only = _components(strong_ref & ~strong_dut, config.min_component_px)
    dut_only = _components(strong_dut & ~strong_ref, config.min_component_px)

    separation = _first_separation(ref, dut, config)
    kind, location = KIND_NONE, None
    for component in ref_only:
        distance, _ = _nearest_on_path(component, dut.points)
        root = component[distance <= config.attach_px]
        if len(root) == 0:
            continue
        weights = mag_ref[root[:, 0].astype(int), root[:, 1].astype(int)]
        centroid = np.average(root, axis=0, weights=weights)
        _, anchor = _nearest_on_path(centroid, dut.points)
        anchor = anchor[0]
        if dut.reason == TERMINATED and np.linalg.norm(anchor - dut.points[-1]) <= config.attach_px:
            kind, location = KIND_TERMINATION, dut.points[-1]
        elif not any(np.min(np.linalg.norm(c - anchor, axis=1)) <= 2.0 * config.attach_px for c in dut_only):
            kind, location = KIND_MISSING_BRANCH, anchor
        break

    if location is None:
        kink = _find_kink(ref, dut, config)
        if kink is not None:
            kind, location = KIND_KINK, kink
        elif (dut.reason == TERMINATED
              and np.linalg.norm(ref.points[-1] - dut.points[-1]) > config.separation_px
              and ref.arc_length() > dut.arc_length() + config.separation_px):
            kind, location = KIND_TERMINATION, dut.points[-1]
        elif separation is not None:
            location = separation
        else:
            location = np.array(seed, dtype=np.float64)

    rows, cols = np.indices(geometry.shape)
    near = np.hypot(rows - location[0], cols - location[1]) <= config.attach_px
    overall = float(np.abs(differential).max())
    local = differential[near] if near.any() else np.zeros(1)
    peak_local = float(local[np.argmax(np.abs(local))])
    confidence = min(1.0, max(0.0, abs(peak_local) / overall)) if overall > 0 and kind != KIND_NONE else 0.0

    logger.info(f"Comparison: {kind} at ({location[0]:.1f}, {location[1]:.1f}) px, confidence {confidence:.2f}")
    return AnomalyReport(
        kind=kind,
        location_px=(float(location[0]), float(location[1])),
        location_m=geometry.to_meters(location[0], location[1]),
        confidence=confidence,
        peak_differential_a_per_m=peak_local,
        ref_path=ref.points_m(),
        dut_path=dut.points_m(),
        termination_reason=dut.reason,
        separation_px=None if separation is None else (float(separation[0]), float(separation[1])),
    )
