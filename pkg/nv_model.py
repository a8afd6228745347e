"""
NV Forward Model

First-order Zeeman physics of the NV ensemble:
- tetrahedral orientation geometry of a (100)-cut diamond
- resonance positions f = D +/- gamma * |B . n| for each orientation
- synthetic ODMR cubes (Lorentzian dips, optional Gaussian photon noise)

Each orientation contributes two dips, the m_s = 0 -> -1 transition below D
and the m_s = 0 -> +1 transition above it. Higher-order terms (transverse
fields, strain, hyperfine structure) are not modelled.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from errors import BiasMarginError, InvalidArgumentError, SingularFrameError, SweepRangeError
from maps_io import ODMRCube, VectorFieldMap

logger = logging.getLogger(__name__)

DEFAULT_ZERO_FIELD_SPLITTING_HZ = 2.870e9
DEFAULT_GYROMAGNETIC_HZ_PER_T = 28.024e9


@dataclass(frozen=True)
class NVConstants:
    zero_field_splitting_hz: float = DEFAULT_ZERO_FIELD_SPLITTING_HZ
    gyromagnetic_hz_per_t: float = DEFAULT_GYROMAGNETIC_HZ_PER_T

    def __post_init__(self):
        if self.zero_field_splitting_hz <= 0 or self.gyromagnetic_hz_per_t <= 0:
            raise InvalidArgumentError("NV constants must be strictly positive")


def tetrahedral_axes() -> np.ndarray:
    """The four NV orientations in the lab frame of a (100)-cut diamond, shape (4, 3)"""
    axes = np.array([[1.0, 1.0, 1.0],
                     [1.0, -1.0, -1.0],
                     [-1.0, 1.0, -1.0],
                     [-1.0, -1.0, 1.0]])
    return axes / np.sqrt(3.0)


@dataclass(frozen=True, eq=False)
class NVFrame:
    """
    Orientation frame of the sensor.

    bias_field is the static field (T) that separates the orientations.
    Because resonances only see |B . n|, reconstruction needs the bias
    projection on every used axis to dominate the signal: its magnitude must
    exceed sign_margin_factor * expected_signal_t.
    """
    axes: np.ndarray = field(default_factory=tetrahedral_axes)
    used_axes: Tuple[int, int, int] = (0, 1, 2)
    bias_field: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sign_margin_factor: float = 10.0
    expected_signal_t: float = 1e-5

    def __post_init__(self):
        axes = np.array(self.axes, dtype=np.float64)
        if axes.shape != (4, 3):
            raise InvalidArgumentError(f"need four 3-vector axes, got shape {axes.shape}")
        if np.max(np.abs(np.linalg.norm(axes, axis=1) - 1.0)) > 1e-12:
            raise InvalidArgumentError("NV axes must have unit norm")
        gram = axes @ axes.T
        off_diagonal = gram[~np.eye(4, dtype=bool)]
        if np.max(np.abs(off_diagonal + 1.0 / 3.0)) > 1e-12:
            raise InvalidArgumentError("NV axes must be tetrahedral (pairwise dot -1/3)")
        used = tuple(int(i) for i in self.used_axes)
        if len(used) != 3 or len(set(used)) != 3 or not all(0 <= i < 4 for i in used):
            raise InvalidArgumentError(f"used_axes must name three distinct axes, got {self.used_axes}")
        if abs(np.linalg.det(axes[list(used)])) < 0.1:
            raise SingularFrameError("used axes do not span 3D space")
        bias = np.array(self.bias_field, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(bias)):
            raise InvalidArgumentError("bias field must be finite")
        axes.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "used_axes", used)
        object.__setattr__(self, "bias_field", bias)

    def used_matrix(self) -> np.ndarray:
        return self.axes[list(self.used_axes)]

    def require_bias_margin(self):
        """Refuse sign-ambiguous reconstruction"""
        magnitude = float(np.linalg.norm(self.bias_field))
        if not 1e-4 <= magnitude <= 1e-1:
            raise BiasMarginError(f"bias field magnitude {magnitude:.3e} T outside [1e-4, 1e-1] T")
        margin = self.sign_margin_factor * self.expected_signal_t
        projections = self.used_matrix() @ self.bias_field
        weakest = float(np.min(np.abs(projections)))
        if weakest <= margin:
            raise BiasMarginError(
                f"bias projection {weakest:.3e} T on a used axis does not exceed margin {margin:.3e} T")

    def to_dict(self):
        return {
            "used_axes": list(self.used_axes),
            "bias_field_t": [float(v) for v in self.bias_field],
            "sign_margin_factor": self.sign_margin_factor,
            "expected_signal_t": self.expected_signal_t,
        }


@dataclass(frozen=True)
class LineShapeParams:
    contrast: float = 0.02
    linewidth_fwhm_hz: float = 8e6
    photon_noise_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.contrast <= 0.2:
            raise InvalidArgumentError(f"contrast must be in (0, 0.2], got {self.contrast}")
        if self.linewidth_fwhm_hz <= 0:
            raise InvalidArgumentError("linewidth must be positive")
        if self.photon_noise_sigma < 0:
            raise InvalidArgumentError("photon noise sigma must be non-negative")

    def to_dict(self):
        return {"contrast": self.contrast, "linewidth_fwhm_hz": self.linewidth_fwhm_hz,
                "photon_noise_sigma": self.photon_noise_sigma, "rng_seed": self.rng_seed}

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def resonance_pair(b: Sequence[float], axis: Sequence[float],
                   constants: NVConstants = NVConstants()) -> Tuple[float, float]:
    """(f_minus, f_plus) in Hz for one orientation"""
    projection = abs(float(np.dot(b, axis)))
    shift = constants.gyromagnetic_hz_per_t * projection
    return (constants.zero_field_splitting_hz - shift, constants.zero_field_splitting_hz + shift)


def resonance_positions(total_field: np.ndarray, axes: np.ndarray,
                        constants: NVConstants) -> np.ndarray:
    """
    Resonances for fields shaped (..., 3) against axes shaped (n, 3).
    Returns (..., n, 2) with [..., i, 0] = f_minus and [..., i, 1] = f_plus.
    """
    shift = constants.gyromagnetic_hz_per_t * np.abs(total_field @ axes.T)
    d = constants.zero_field_splitting_hz
    return np.stack([d - shift, d + shift], axis=-1)


def predicted_resonances(frame: NVFrame, constants: NVConstants) -> List[Tuple[int, int, float]]:
    """Dip positions produced by the bias field alone, as (axis, branch, Hz); branch 0 = f_minus"""
    positions = resonance_positions(frame.bias_field, frame.axes, constants)
    return [(axis, branch, float(positions[axis, branch])) for axis in range(4) for branch in range(2)]


def lorentzian(freqs: np.ndarray, center, fwhm: float) -> np.ndarray:
    """Unit-peak Lorentzian"""
    t = (freqs - center) / (0.5 * fwhm)
    return 1.0 / (1.0 + t * t)


def pixel_rng(seed: int, pixel_index: int) -> np.random.Generator:
    """Independent noise stream per pixel, so evaluation order never matters"""
    return np.random.default_rng([int(seed), int(pixel_index)])


def synthesize_odmr(field_map: VectorFieldMap, frame: NVFrame, freqs: Sequence[float],
                    shape: LineShapeParams, constants: NVConstants = NVConstants()) -> ODMRCube:
    """
    Simulate the ODMR cube a camera would record over the given field.

    Every pixel sees field + bias. All four orientations contribute both
    branches; dips add and the sum is clamped at zero before noise.
    """
    freqs = np.asarray(freqs, dtype=np.float64)
    if freqs.ndim != 1 or freqs.size < 8 or np.any(np.diff(freqs) <= 0):
        raise InvalidArgumentError("sweep must hold at least 8 strictly increasing frequencies")

    geometry = field_map.geometry
    total = field_map.stack() + frame.bias_field
    resonances = resonance_positions(total, frame.axes, constants)  # (H, W, 4, 2)
    low, high = float(resonances.min()), float(resonances.max())
    if low < freqs[0] or high > freqs[-1]:
        raise SweepRangeError(
            f"resonances span [{low:.6e}, {high:.6e}] Hz, sweep covers [{freqs[0]:.6e}, {freqs[-1]:.6e}] Hz")

    spectra = np.empty(geometry.shape + (freqs.size,))
    for row in range(geometry.height):
        centers = resonances[row].reshape(geometry.width, 8, 1)
        dips = lorentzian(freqs[None, None, :], centers, shape.linewidth_fwhm_hz).sum(axis=1)
        spectra[row] = np.maximum(0.0, 1.0 - shape.contrast * dips)

    if shape.photon_noise_sigma > 0:
        for index in range(geometry.width * geometry.height):
            row, col = divmod(index, geometry.width)
            spectra[row, col] += pixel_rng(shape.rng_seed, index).normal(
                0.0, shape.photon_noise_sigma, freqs.size)

    logger.info(f"Synthesized {geometry.width}x{geometry.height} ODMR cube over {freqs.size} frequencies")
    return ODMRCube(geometry.width, geometry.height, geometry.pitch, freqs, spectra)
