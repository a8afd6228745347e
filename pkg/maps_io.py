"""
Map containers and file formats

Holds the 2D grid containers used by every other module (field maps, vector
field maps, sheet current maps, ODMR cubes) together with the two binary
containers (QFM for maps, QDCB for ODMR cubes) and 16-bit PGM rendering.

Conventions, used everywhere:
- SI units internally (T, A, m, Hz).
- Arrays are indexed [row, col]; row 0 is minimum y, col 0 is minimum x.
- Pixel (row i, col j) has its centre at x = j * pitch, y = i * pitch.
- Persisted floats are IEEE-754 binary64 little-endian, row-major.
"""

import os
import io
import struct
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import GridMismatchError, InvalidArgumentError, InvalidMapError, QFMFormatError

logger = logging.getLogger(__name__)

QFM_MAGIC = b"QFMP"
QDCB_MAGIC = b"QDCB"
FORMAT_VERSION = 1

UNITS = {"T", "A/m", "K", "1", "A/m^2"}

_QFM_HEADER = struct.Struct("<4sHIIddH")
_QDCB_HEADER = struct.Struct("<4sHIIdI")

Destination = Union[str, Path, io.IOBase]


def _frozen_array(values, shape: Optional[Tuple[int, ...]] = None) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if shape is not None:
        if arr.size != int(np.prod(shape)):
            raise InvalidMapError(f"expected {int(np.prod(shape))} values, got {arr.size}")
        arr = arr.reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GridGeometry:
    """Pixel grid shared by co-registered maps"""
    width: int
    height: int
    pitch: float
    standoff: float = 0.0

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise InvalidMapError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        if not np.isfinite(self.pitch) or self.pitch <= 0:
            raise InvalidMapError(f"pitch must be positive, got {self.pitch}")
        if not np.isfinite(self.standoff) or self.standoff < 0:
            raise InvalidMapError(f"standoff must be non-negative, got {self.standoff}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "pitch", float(self.pitch))
        object.__setattr__(self, "standoff", float(self.standoff))

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    def with_standoff(self, standoff: float) -> "GridGeometry":
        return GridGeometry(self.width, self.height, self.pitch, standoff)

    def coordinates(self) -> Tuple[np.ndarray, np.ndarray]:
        """(X, Y) pixel-centre coordinates in metres, each shaped (height, width)"""
        xs = np.arange(self.width) * self.pitch
        ys = np.arange(self.height) * self.pitch
        return np.meshgrid(xs, ys)

    def to_meters(self, row: float, col: float) -> Tuple[float, float]:
        return (float(col) * self.pitch, float(row) * self.pitch)

    def contains(self, row: float, col: float) -> bool:
        return 0.0 <= row <= self.height - 1 and 0.0 <= col <= self.width - 1

    def same_grid(self, other: "GridGeometry") -> bool:
        return (self.width == other.width and self.height == other.height
                and self.pitch == other.pitch and self.standoff == other.standoff)

    def to_dict(self) -> Dict:
        return {"width": self.width, "height": self.height,
                "pitch": self.pitch, "standoff": self.standoff}

    @classmethod
    def from_dict(cls, data: Dict) -> "GridGeometry":
        return cls(data["width"], data["height"], data["pitch"], data.get("standoff", 0.0))


@dataclass(frozen=True, eq=False)
class FieldMap:
    """A 2D scalar image on a physical grid"""
    geometry: GridGeometry
    data: np.ndarray
    unit: str = "T"
    name: str = ""

    def __post_init__(self):
        if self.unit not in UNITS:
            raise InvalidMapError(f"unknown unit {self.unit!r}")
        arr = _frozen_array(self.data, self.geometry.shape)
        if not np.all(np.isfinite(arr)):
            raise InvalidMapError(f"map {self.name or '<unnamed>'} contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.geometry.width

    @property
    def height(self) -> int:
        return self.geometry.height

    @property
    def pitch(self) -> float:
        return self.geometry.pitch

    @property
    def standoff(self) -> float:
        return self.geometry.standoff

    def with_data(self, data, unit: Optional[str] = None, name: Optional[str] = None) -> "FieldMap":
        return FieldMap(self.geometry, data,
                        self.unit if unit is None else unit,
                        self.name if name is None else name)


@dataclass(frozen=True, eq=False)
class VectorFieldMap:
    """Co-registered B_x, B_y, B_z maps in tesla"""
    bx: FieldMap
    by: FieldMap
    bz: FieldMap

    def __post_init__(self):
        for comp in (self.by, self.bz):
            if not comp.geometry.same_grid(self.bx.geometry):
                raise GridMismatchError("vector field components are not co-registered")
        for comp in (self.bx, self.by, self.bz):
            if comp.unit != "T":
                raise InvalidMapError(f"vector field component in {comp.unit}, expected T")

    @property
    def geometry(self) -> GridGeometry:
        return self.bx.geometry

    def stack(self) -> np.ndarray:
        """Components as one (height, width, 3) array"""
        return np.stack([self.bx.data, self.by.data, self.bz.data], axis=-1)

    def channels(self) -> List[Tuple[str, FieldMap]]:
        return [("Bx", self.bx), ("By", self.by), ("Bz", self.bz)]

    @classmethod
    def from_array(cls, geometry: GridGeometry, values: np.ndarray) -> "VectorFieldMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(FieldMap(geometry, values[..., 0], "T", "Bx"),
                   FieldMap(geometry, values[..., 1], "T", "By"),
                   FieldMap(geometry, values[..., 2], "T", "Bz"))


@dataclass(frozen=True, eq=False)
class CurrentDensityMap:
    """Sheet current density (A/m) in the plane z = depth"""
    jx: FieldMap
    jy: FieldMap
    depth: float
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.jy.geometry.same_grid(self.jx.geometry):
            raise GridMismatchError("current density components are not co-registered")
        for comp in (self.jx, self.jy):
            if comp.unit != "A/m":
                raise InvalidMapError(f"current density component in {comp.unit}, expected A/m")
        if not np.isfinite(self.depth) or self.depth < 0:
            raise InvalidMapError(f"sheet depth must be non-negative, got {self.depth}")

    @property
    def geometry(self) -> GridGeometry:
        return self.jx.geometry

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.jx.data, self.jy.data)

    def channels(self) -> List[Tuple[str, FieldMap]]:
        return [("Jx", self.jx), ("Jy", self.jy)]

    @classmethod
    def from_arrays(cls, geometry: GridGeometry, jx: np.ndarray, jy: np.ndarray,
                    depth: float, metadata: Optional[Dict] = None) -> "CurrentDensityMap":
        # header standoff slot carries the sheet depth
        grid = geometry.with_standoff(depth)
        return cls(FieldMap(grid, jx, "A/m", "Jx"), FieldMap(grid, jy, "A/m", "Jy"),
                   float(depth), dict(metadata or {}))


@dataclass(frozen=True, eq=False)
class ODMRCube:
    """Per-pixel fluorescence spectra on a shared microwave frequency axis"""
    width: int
    height: int
    pitch: float
    freqs: np.ndarray
    spectra: np.ndarray

    def __post_init__(self):
        geometry = GridGeometry(self.width, self.height, self.pitch)
        freqs = _frozen_array(self.freqs)
        if freqs.ndim != 1 or freqs.size < 8:
            raise InvalidMapError(f"need at least 8 sweep frequencies, got {freqs.size}")
        if not np.all(np.isfinite(freqs)) or np.any(np.diff(freqs) <= 0):
            raise InvalidMapError("sweep frequencies must be finite and strictly increasing")
        spectra = _frozen_array(self.spectra, (geometry.height, geometry.width, freqs.size))
        if not np.all(np.isfinite(spectra)):
            raise InvalidMapError("ODMR cube contains non-finite fluorescence values")
        object.__setattr__(self, "width", geometry.width)
        object.__setattr__(self, "height", geometry.height)
        object.__setattr__(self, "pitch", geometry.pitch)
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "spectra", spectra)

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.width, self.height, self.pitch)

    @property
    def n_freq(self) -> int:
        return self.freqs.size


# ---------------------------------------------------------------- file output

def atomic_write(path: Union[str, Path], payload: bytes) -> int:
    """Write bytes to path through a temporary file and rename"""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
    logger.info(f"Wrote {len(payload)} bytes to {path}")
    return len(payload)


def _emit(payload: bytes, destination: Destination) -> int:
    if hasattr(destination, "write"):
        destination.write(payload)
        return len(payload)
    return atomic_write(destination, payload)


def _slurp(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    if hasattr(source, "read"):
        return source.read()
    with open(source, "rb") as f:
        return f.read()


def _ascii_field(text: str, what: str) -> bytes:
    try:
        raw = text.encode("ascii")
    except UnicodeEncodeError:
        raise QFMFormatError(f"{what} {text!r} is not ASCII")
    if len(raw) > 255:
        raise QFMFormatError(f"{what} longer than 255 bytes")
    return raw


def _channels_of(container) -> List[Tuple[str, FieldMap]]:
    if isinstance(container, (VectorFieldMap, CurrentDensityMap)):
        return container.channels()
    if isinstance(container, FieldMap):
        return [(container.name or "data", container)]
    if isinstance(container, Mapping):
        return list(container.items())
    return [(name, fmap) for name, fmap in container]


def encode_qfm(container) -> bytes:
    channels = _channels_of(container)
    if not channels:
        raise QFMFormatError("nothing to write")
    geometry = channels[0][1].geometry
    if isinstance(container, CurrentDensityMap):
        geometry = geometry.with_standoff(container.depth)

    parts = [_QFM_HEADER.pack(QFM_MAGIC, FORMAT_VERSION, geometry.width, geometry.height,
                              geometry.pitch, geometry.standoff, len(channels))]
    for name, fmap in channels:
        if not fmap.geometry.same_grid(channels[0][1].geometry):
            raise GridMismatchError(f"channel {name} is not co-registered with {channels[0][0]}")
        raw_name = _ascii_field(name, "channel name")
        raw_unit = _ascii_field(fmap.unit, "unit")
        parts.append(bytes([len(raw_name)]) + raw_name + bytes([len(raw_unit)]) + raw_unit)
    for name, fmap in channels:
        if not np.all(np.isfinite(fmap.data)):
            raise InvalidMapError(f"channel {name} contains non-finite values")
        parts.append(np.ascontiguousarray(fmap.data, dtype="<f8").tobytes())
    return b"".join(parts)


def write_qfm(container, destination: Destination) -> int:
    """
    Persist a FieldMap, VectorFieldMap, CurrentDensityMap or a mapping of
    channel name -> FieldMap as a QFM file. Returns the byte count.
    """
    return _emit(encode_qfm(container), destination)


def read_qfm(source) -> Dict[str, FieldMap]:
    """Read a QFM file into an ordered channel name -> FieldMap dict"""
    raw = _slurp(source)
    if len(raw) < _QFM_HEADER.size:
        raise QFMFormatError("truncated QFM header")
    magic, version, width, height, pitch, standoff, n_channels = _QFM_HEADER.unpack_from(raw, 0)
    if magic != QFM_MAGIC:
        raise QFMFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise QFMFormatError(f"unsupported QFM version {version}")
    geometry = GridGeometry(width, height, pitch, standoff)

    offset = _QFM_HEADER.size
    declared = []
    try:
        for _ in range(n_channels):
            n = raw[offset]
            name = raw[offset + 1:offset + 1 + n].decode("ascii")
            offset += 1 + n
            n = raw[offset]
            unit = raw[offset + 1:offset + 1 + n].decode("ascii")
            offset += 1 + n
            declared.append((name, unit))
    except (IndexError, UnicodeDecodeError):
        raise QFMFormatError("corrupt channel table")

    block = width * height * 8
    if len(raw) != offset + block * n_channels:
        raise QFMFormatError(f"expected {offset + block * n_channels} bytes, found {len(raw)}")
    channels: Dict[str, FieldMap] = {}
    for name, unit in declared:
        data = np.frombuffer(raw, dtype="<f8", count=width * height, offset=offset)
        channels[name] = FieldMap(geometry, data.astype(np.float64), unit, name)
        offset += block
    return channels


def vector_from_channels(channels: Mapping[str, FieldMap]) -> VectorFieldMap:
    try:
        return VectorFieldMap(channels["Bx"], channels["By"], channels["Bz"])
    except KeyError as e:
        raise QFMFormatError(f"missing field channel {e}")


def current_from_channels(channels: Mapping[str, FieldMap], metadata: Optional[Dict] = None) -> CurrentDensityMap:
    try:
        jx, jy = channels["Jx"], channels["Jy"]
    except KeyError as e:
        raise QFMFormatError(f"missing current channel {e}")
    return CurrentDensityMap(jx, jy, jx.standoff, dict(metadata or {}))


def write_qdcb(cube: ODMRCube, destination: Destination) -> int:
    payload = b"".join([
        _QDCB_HEADER.pack(QDCB_MAGIC, FORMAT_VERSION, cube.width, cube.height, cube.pitch, cube.n_freq),
        np.ascontiguousarray(cube.freqs, dtype="<f8").tobytes(),
        np.ascontiguousarray(cube.spectra, dtype="<f8").tobytes(),
    ])
    return _emit(payload, destination)


def read_qdcb(source) -> ODMRCube:
    raw = _slurp(source)
    if len(raw) < _QDCB_HEADER.size:
        raise QFMFormatError("truncated QDCB header")
    magic, version, width, height, pitch, n_freq = _QDCB_HEADER.unpack_from(raw, 0)
    if magic != QDCB_MAGIC:
        raise QFMFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise QFMFormatError(f"unsupported QDCB version {version}")
    offset = _QDCB_HEADER.size
    expected = offset + 8 * n_freq * (1 + width * height)
    if len(raw) != expected:
        raise QFMFormatError(f"expected {expected} bytes, found {len(raw)}")
    freqs = np.frombuffer(raw, dtype="<f8", count=n_freq, offset=offset)
    spectra = np.frombuffer(raw, dtype="<f8", count=n_freq * width * height, offset=offset + 8 * n_freq)
    return ODMRCube(width, height, pitch, freqs.astype(np.float64),
                    spectra.astype(np.float64).reshape(height, width, n_freq))


# ---------------------------------------------------------------- operations

def subtract(on: VectorFieldMap, off: VectorFieldMap) -> VectorFieldMap:
    """Differential map: current-on acquisition minus current-off acquisition"""
    if not on.geometry.same_grid(off.geometry):
        raise GridMismatchError("on/off maps are not co-registered")
    return VectorFieldMap.from_array(on.geometry, on.stack() - off.stack())


def pgm_bytes(fmap: FieldMap, low: Optional[float] = None, high: Optional[float] = None) -> bytes:
    if (low is None) != (high is None):
        raise InvalidArgumentError("set both low and high, or neither")
    data = fmap.data
    if low is None:
        low, high = float(data.min()), float(data.max())
        if high == low:
            scaled = np.full(data.shape, 0.5)
        else:
            scaled = (data - low) / (high - low)
    else:
        if not low < high:
            raise InvalidArgumentError(f"low ({low}) must be below high ({high})")
        scaled = (data - low) / (high - low)
    levels = np.floor(65535.0 * np.clip(scaled, 0.0, 1.0) + 0.5).astype(">u2")
    # image rows run top to bottom, i.e. from maximum y down
    header = f"P5\n{fmap.width} {fmap.height}\n65535\n".encode("ascii")
    return header + levels[::-1].tobytes()


def render_pgm(fmap: FieldMap, low: Optional[float] = None, high: Optional[float] = None,
               destination: Destination = "map.pgm") -> int:
    """16-bit grayscale rendering; autoscale when low/high are unset"""
    return _emit(pgm_bytes(fmap, low, high), destination)
