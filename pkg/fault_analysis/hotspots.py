"""
Hotspot detection on lock-in amplitude maps and cross-checking against QDM anomalies
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from errors import InvalidArgumentError
from maps_io import FieldMap
from .paths import AnomalyReport

logger = logging.getLogger(__name__)

MAD_TO_SIGMA = 1.4826
# sigma never drops below this share of the map's dynamic range
SIGMA_FLOOR_FRACTION = 0.01


@dataclass(frozen=True)
class Hotspot:
    row: float
    col: float
    x_m: float
    y_m: float
    peak: float
    extent_px: int

    def to_dict(self) -> Dict:
        return {"location_px": [self.row, self.col], "location_m": [self.x_m, self.y_m],
                "peak": self.peak, "extent_px": self.extent_px}

    @staticmethod
    def from_dict(data: Dict) -> "Hotspot":
        try:
            row, col = data["location_px"]
            x, y = data["location_m"]
            return Hotspot(float(row), float(col), float(x), float(y), float(data["peak"]), int(data["extent_px"]))
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidArgumentError(f"malformed hotspot: {e}")


@dataclass(frozen=True)
class HotspotCorrelation:
    matched: bool
    hotspot_index: Optional[int] = None
    distance_px: Optional[float] = None
    distance_m: Optional[float] = None

    def to_dict(self) -> Dict:
        return {"matched": self.matched, "hotspot_index": self.hotspot_index,
                "distance_px": self.distance_px, "distance_m": self.distance_m}


def robust_floor(data: np.ndarray):
    """(median, MAD-based sigma), the sigma floored so a noise-free map keeps a real threshold"""
    median = float(np.median(data))
    sigma = MAD_TO_SIGMA * float(np.median(np.abs(data - median)))
    return median, max(sigma, SIGMA_FLOOR_FRACTION * float(np.max(data) - median))


def detect_hotspot(amplitude: FieldMap, sigma_threshold: float = 5.0) -> List[Hotspot]:
    data = amplitude.data
    median, sigma = robust_floor(data)
    labels, count = ndimage.label(data > median + sigma_threshold * sigma)
    if count == 0:
        return []

    index = np.arange(1, count + 1)
    excess = data - median
    centroids = ndimage.center_of_mass(excess, labels, index)
    peaks = ndimage.maximum(data, labels, index)
    sizes = ndimage.sum(np.ones_like(data), labels, index)

    hotspots = []
    for (row, col), peak, size in zip(centroids, peaks, sizes):
        x, y = amplitude.geometry.to_meters(row, col)
        hotspots.append(Hotspot(float(row), float(col), x, y, float(peak), int(size)))
    hotspots.sort(key=lambda h: h.peak, reverse=True)
    logger.info(f"Found {len(hotspots)} hotspot(s) above {sigma_threshold} sigma")
    return hotspots


def correlate_hotspot(report: AnomalyReport, hotspots: Sequence[Hotspot],
                      tolerance_px: float = 3.0) -> HotspotCorrelation:
    """Nearest hotspot to the anomaly location; matched when within tolerance_px"""
    if not hotspots:
        return HotspotCorrelation(False)
    row, col = report.location_px
    distances = [float(np.hypot(h.row - row, h.col - col)) for h in hotspots]
    nearest = int(np.argmin(distances))
    hotspot = hotspots[nearest]
    distance_m = float(np.hypot(hotspot.x_m - report.location_m[0], hotspot.y_m - report.location_m[1]))
    return HotspotCorrelation(distances[nearest] <= tolerance_px, nearest, distances[nearest], distance_m)
