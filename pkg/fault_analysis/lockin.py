"""
Lock-in demodulation of a periodically driven thermal frame stack
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from errors import GridMismatchError, InvalidArgumentError, LockInWindowError
from maps_io import FieldMap, GridGeometry

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LockInSeries:
    geometry: GridGeometry
    frames: np.ndarray  # (n_frames, height, width), time ordered
    sample_rate: float
    drive_frequency: float
    unit: str = "K"

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[1:] != self.geometry.shape:
            raise GridMismatchError(f"frame stack shape {frames.shape} does not match grid {self.geometry.shape}")
        if self.unit not in ("K", "1"):
            raise InvalidArgumentError(f"lock-in frames must be in K or 1, got {self.unit}")
        if self.drive_frequency <= 0 or self.sample_rate <= 2 * self.drive_frequency:
            raise InvalidArgumentError("sample rate must exceed twice the positive drive frequency")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @classmethod
    def from_frames(cls, frames: Sequence[FieldMap], sample_rate: float, drive_frequency: float) -> "LockInSeries":
        frames = list(frames)
        if not frames:
            raise LockInWindowError("empty frame stack")
        geometry = frames[0].geometry
        for frame in frames[1:]:
            if not frame.geometry.same_grid(geometry):
                raise GridMismatchError(f"frame {frame.name} is not co-registered with {frames[0].name}")
        return cls(geometry, np.stack([f.data for f in frames]), sample_rate, drive_frequency, frames[0].unit)

    @classmethod
    def from_channels(cls, channels: Mapping[str, FieldMap], sample_rate: float,
                      drive_frequency: float) -> "LockInSeries":
        """One QFM channel per frame, in file order"""
        return cls.from_frames(list(channels.values()), sample_rate, drive_frequency)

    def whole_period_samples(self) -> int:
        per_period = self.sample_rate / self.drive_frequency
        periods = int(np.floor(self.frames.shape[0] / per_period + 1e-9))
        if periods < 2:
            raise LockInWindowError(f"{self.frames.shape[0]} frames cover fewer than 2 drive periods")
        return int(np.floor(periods * per_period + 1e-9))


def lockin_demodulate(series: LockInSeries) -> Tuple[FieldMap, FieldMap]:
    """
    Amplitude and phase at the drive frequency. The window is cut to whole
    periods; phase is referenced to sin(2 pi f t), so A sin(2 pi f t + p)
    demodulates to (A, p).
    """
    n = series.whole_period_samples()
    t = np.arange(n) / series.sample_rate
    omega = 2.0 * np.pi * series.drive_frequency
    window = series.frames[:n]

    in_phase = 2.0 / n * np.tensordot(np.sin(omega * t), window, axes=1)
    quadrature = 2.0 / n * np.tensordot(np.cos(omega * t), window, axes=1)
    amplitude = np.hypot(in_phase, quadrature)
    phase = np.arctan2(quadrature, in_phase)
    phase[phase <= -np.pi] = np.pi

    logger.info(f"Demodulated {n} of {series.frames.shape[0]} frames at {series.drive_frequency} Hz")
    return (FieldMap(series.geometry, amplitude, series.unit, "amplitude"),
            FieldMap(series.geometry, phase, "1", "phase"))
