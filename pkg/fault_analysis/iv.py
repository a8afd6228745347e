"""
I-V screening - flag packages whose I-V curve looks like a resistive short
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from errors import InsufficientSamplesError, InvalidArgumentError

logger = logging.getLogger(__name__)

SHORT_SUSPECTED = "ShortSuspected"
NOMINAL = "Nominal"
OPEN = "Open"

MIN_SAMPLES = 5


@dataclass(frozen=True, eq=False)
class IVCurve:
    voltages: np.ndarray
    currents: np.ndarray

    def __post_init__(self):
        v = np.array(self.voltages, dtype=np.float64).ravel()
        i = np.array(self.currents, dtype=np.float64).ravel()
        if v.size != i.size:
            raise InvalidArgumentError(f"{v.size} voltages but {i.size} currents")
        if v.size < MIN_SAMPLES:
            raise InsufficientSamplesError(f"I-V curve needs at least {MIN_SAMPLES} samples, got {v.size}")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(i))):
            raise InvalidArgumentError("I-V samples must be finite")
        if np.any(np.diff(v) <= 0):
            raise InvalidArgumentError("voltages must be strictly increasing")
        object.__setattr__(self, "voltages", v)
        object.__setattr__(self, "currents", i)

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "IVCurve":
        """Read a 'voltage_v,current_a' CSV with a header row"""
        voltages, currents = [], []
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if not reader.fieldnames or not {"voltage_v", "current_a"} <= set(reader.fieldnames):
                raise InvalidArgumentError(f"{path}: expected header voltage_v,current_a")
            for row in reader:
                try:
                    voltages.append(float(row["voltage_v"]))
                    currents.append(float(row["current_a"]))
                except (TypeError, ValueError) as e:
                    raise InvalidArgumentError(f"{path}: bad sample on line {reader.line_num}: {e}")
        return cls(voltages, currents)


@dataclass(frozen=True)
class IVClassification:
    kind: str
    resistance_ohm: Optional[float] = None
    r_squared: Optional[float] = None

    def to_dict(self) -> Dict:
        result = {"class": self.kind}
        if self.resistance_ohm is not None:
            result["resistance_ohm"] = self.resistance_ohm
        if self.r_squared is not None:
            result["r_squared"] = self.r_squared
        return result


def classify_iv(curve: IVCurve, r2_threshold: float = 0.999, open_floor_a: float = 1e-9) -> IVClassification:
    """
    Open when no sample reaches open_floor_a. Otherwise fit I = V / R + c;
    a coefficient of determination at or above r2_threshold means the
    package conducts like a resistor.
    """
    if np.max(np.abs(curve.currents)) < open_floor_a:
        return IVClassification(OPEN)

    design = np.column_stack([curve.voltages, np.ones_like(curve.voltages)])
    (slope, offset), *_ = np.linalg.lstsq(design, curve.currents, rcond=None)
    residual = curve.currents - (slope * curve.voltages + offset)
    total = float(np.sum((curve.currents - curve.currents.mean()) ** 2))
    r_squared = 1.0 - float(np.sum(residual ** 2)) / total if total > 0 else 0.0

    if r_squared >= r2_threshold and slope != 0:
        resistance = float(1.0 / slope)
        logger.info(f"Linear I-V, R = {resistance:.6g} ohm (R^2 = {r_squared:.6f})")
        return IVClassification(SHORT_SUSPECTED, resistance, r_squared)
    return IVClassification(NOMINAL, None, r_squared)
