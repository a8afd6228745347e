"""
ODMR Inversion

Inverse of nv_model:
1. Fit every pixel's spectrum with one Lorentzian per expected dip,
   jointly, by damped least squares
2. Assign fitted dips to (orientation, branch) by nearest predicted position
3. Turn each used orientation's splitting into a signed field projection
4. Solve the 3x3 system for the vector field and remove the bias

Pixels whose fit fails are masked, never interpolated.
"""

import os
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import find_peaks
from tqdm import tqdm

from errors import (DegenerateResonances, InvalidArgumentError, NoConvergence,
                    NoDipsFound, QDMError, SingularFrameError)
from maps_io import FieldMap, ODMRCube, VectorFieldMap
from nv_model import LineShapeParams, NVConstants, NVFrame, predicted_resonances

logger = logging.getLogger(__name__)

FIT_WORKERS = int(os.getenv("QDM_FIT_WORKERS", "1"))
SHOW_PROGRESS = os.getenv("QDM_PROGRESS", "0") == "1"


@dataclass(frozen=True)
class FitConfig:
    dip_threshold: float = 0.3
    max_iterations: int = 100
    convergence_tol: float = 1e-8
    merge_tolerance: Optional[float] = None  # Hz, None means half the linewidth

    def __post_init__(self):
        if not 0 < self.dip_threshold < 1:
            raise InvalidArgumentError("dip_threshold must be in (0, 1)")
        if self.max_iterations < 1 or self.convergence_tol <= 0:
            raise InvalidArgumentError("fit iteration settings must be positive")
        if self.merge_tolerance is not None and self.merge_tolerance <= 0:
            raise InvalidArgumentError("merge_tolerance must be positive")

    def merge_tolerance_hz(self, shape: LineShapeParams) -> float:
        if self.merge_tolerance is None:
            return 0.5 * shape.linewidth_fwhm_hz
        return self.merge_tolerance


@dataclass(frozen=True)
class FittedDip:
    center_hz: float
    fwhm_hz: float
    contrast: float
    residual: float


@dataclass(frozen=True, eq=False)
class ResonanceSet:
    """Per pixel, per used axis: f_minus, f_plus (Hz) and fit residual; plus validity"""
    f_minus: np.ndarray
    f_plus: np.ndarray
    residual: np.ndarray
    valid: np.ndarray
    failures: Dict[str, int]


def _dip_model(x: np.ndarray, params: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Model 1 - sum(a * L) and its Jacobian; params rows are (center, fwhm, contrast) in scaled units"""
    u, v, a = params[:, 0], params[:, 1], params[:, 2]
    h = 0.5 * v
    t = (x[:, None] - u[None, :]) / h[None, :]
    shape = 1.0 / (1.0 + t * t)
    shape_sq = shape * shape
    model = 1.0 - (a * shape).sum(axis=1)
    jac = np.stack([-a * 2.0 * t * shape_sq / h,
                    -a * t * t * shape_sq / h,
                    -shape], axis=2)
    return model, jac.reshape(x.size, -1)


def _levenberg_marquardt(x: np.ndarray, y: np.ndarray, params: np.ndarray,
                         config: FitConfig) -> Tuple[np.ndarray, np.ndarray, bool]:
    lam = 1e-3
    with np.errstate(all="ignore"):
        model, jac = _dip_model(x, params)
        resid = y - model
        cost = float(resid @ resid)
        converged = False
        for _ in range(config.max_iterations):
            if cost == 0.0:
                converged = True
                break
            normal = jac.T @ jac
            gradient = jac.T @ resid
            damping = np.diag(normal).copy()
            damping[damping == 0] = 1.0
            try:
                step = np.linalg.solve(normal + lam * np.diag(damping), gradient)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = params + step.reshape(params.shape)
            trial_model, trial_jac = _dip_model(x, trial)
            trial_resid = y - trial_model
            trial_cost = float(trial_resid @ trial_resid)
            if trial_cost < cost:
                params, model, jac, resid, cost = trial, trial_model, trial_jac, trial_resid, trial_cost
                lam = max(lam / 10.0, 1e-15)
                if np.max(np.abs(step) / (np.abs(params.ravel()) + 1.0)) < config.convergence_tol:
                    converged = True
                    break
            else:
                lam *= 10.0
                if lam > 1e12:
                    # no downhill step left at machine precision
                    converged = True
                    break
    return params, resid, converged


def fit_spectrum(freqs: Sequence[float], values: Sequence[float], expected: Sequence[float],
                 shape: LineShapeParams, config: FitConfig = FitConfig()) -> List[FittedDip]:
    """
    Fit one Lorentzian per expected dip. Dips start at their predicted
    positions and are refined jointly. Returns dips sorted by center.
    """
    freqs = np.asarray(freqs, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    expected = np.sort(np.asarray(expected, dtype=np.float64))

    threshold = 1.0 - config.dip_threshold * shape.contrast
    peaks, _ = find_peaks(-values, height=-threshold)
    if peaks.size == 0:
        raise NoDipsFound(f"no dip below {threshold:.4f} of baseline")

    merge = config.merge_tolerance_hz(shape)
    if expected.size > 1 and np.min(np.diff(expected)) < merge:
        raise DegenerateResonances(f"expected dips closer than {merge:.3e} Hz")

    scale = shape.linewidth_fwhm_hz
    ref = 0.5 * (freqs[0] + freqs[-1])
    x = (freqs - ref) / scale
    initial = np.column_stack([(expected - ref) / scale,
                               np.ones(expected.size),
                               np.full(expected.size, shape.contrast)])
    params, resid, converged = _levenberg_marquardt(x, values, initial, config)

    rms = float(np.sqrt(np.mean(resid ** 2)))
    noise_floor = max(shape.photon_noise_sigma, 1e-9)
    if not np.all(np.isfinite(params)):
        raise NoConvergence("fit diverged")
    if not converged and rms > 10.0 * noise_floor:
        raise NoConvergence(f"residual {rms:.3e} after {config.max_iterations} iterations")

    dips = []
    for u, v, a in params:
        center = ref + u * scale
        fwhm = abs(v) * scale
        near = np.abs(freqs - center) <= fwhm
        local = float(np.sqrt(np.mean(resid[near] ** 2))) if near.any() else rms
        dips.append(FittedDip(float(center), float(fwhm), float(a), local))
    return sorted(dips, key=lambda d: d.center_hz)


def assign_dips(dips: Sequence[FittedDip], predicted: Sequence[Tuple[int, int, float]],
                merge_tolerance: float) -> Dict[Tuple[int, int], FittedDip]:
    """Greedy nearest assignment of fitted dips to (axis, branch) slots"""
    fitted = np.array([d.center_hz for d in dips])
    slots = np.array([f for _, _, f in predicted])
    distance = np.abs(fitted[:, None] - slots[None, :])
    if slots.size > 1:
        ordered = np.sort(distance, axis=1)
        if np.any(ordered[:, 1] - ordered[:, 0] < merge_tolerance):
            raise DegenerateResonances("fitted dip lies between two predicted positions")

    assignment: Dict[Tuple[int, int], FittedDip] = {}
    taken_dips, taken_slots = set(), set()
    for flat in np.argsort(distance, axis=None, kind="stable"):
        i, j = divmod(int(flat), slots.size)
        if i in taken_dips or j in taken_slots:
            continue
        taken_dips.add(i)
        taken_slots.add(j)
        assignment[(predicted[j][0], predicted[j][1])] = dips[i]
    return assignment


def solve_vector(projections: Sequence[float], frame: NVFrame) -> np.ndarray:
    """Field vector whose projections on the used axes equal the given values"""
    matrix = frame.used_matrix()
    if abs(np.linalg.det(matrix)) < 0.1:
        raise SingularFrameError("used axis matrix is singular")
    return np.linalg.solve(matrix, np.asarray(projections, dtype=np.float64))


def _fit_rows(freqs, rows, predicted, used_axes, shape, config):
    """Fit a block of pixel rows; module-level so process pools can pickle it"""
    merge = config.merge_tolerance_hz(shape)
    expected = [f for _, _, f in predicted]
    n_rows, width = rows.shape[:2]
    f_minus = np.zeros((n_rows, width, 3))
    f_plus = np.zeros((n_rows, width, 3))
    residual = np.zeros((n_rows, width, 3))
    valid = np.zeros((n_rows, width), dtype=bool)
    failures: Dict[str, int] = {}
    for r in range(n_rows):
        for c in range(width):
            try:
                dips = fit_spectrum(freqs, rows[r, c], expected, shape, config)
                slots = assign_dips(dips, predicted, merge)
                for k, axis in enumerate(used_axes):
                    low, high = slots[(axis, 0)], slots[(axis, 1)]
                    f_minus[r, c, k] = low.center_hz
                    f_plus[r, c, k] = high.center_hz
                    residual[r, c, k] = max(low.residual, high.residual)
                valid[r, c] = True
            except QDMError as e:
                failures[e.code] = failures.get(e.code, 0) + 1
                logger.debug(f"pixel ({r}, {c}) of block masked: {e.code}: {e}")
    return f_minus, f_plus, residual, valid, failures


def fit_resonances(cube: ODMRCube, frame: NVFrame, constants: NVConstants, shape: LineShapeParams,
                   config: FitConfig = FitConfig(), workers: Optional[int] = None) -> ResonanceSet:
    predicted = predicted_resonances(frame, constants)
    workers = FIT_WORKERS if workers is None else max(1, int(workers))
    blocks = [(cube.freqs, cube.spectra[r:r + 1], predicted, frame.used_axes, shape, config)
              for r in range(cube.height)]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(_fit_rows, *zip(*blocks)), total=len(blocks),
                                disable=not SHOW_PROGRESS, desc="fitting rows"))
    else:
        results = [_fit_rows(*block) for block in tqdm(blocks, disable=not SHOW_PROGRESS, desc="fitting rows")]

    failures: Dict[str, int] = {}
    for result in results:
        for code, count in result[4].items():
            failures[code] = failures.get(code, 0) + count
    return ResonanceSet(
        f_minus=np.concatenate([r[0] for r in results]),
        f_plus=np.concatenate([r[1] for r in results]),
        residual=np.concatenate([r[2] for r in results]),
        valid=np.concatenate([r[3] for r in results]),
        failures=failures,
    )


def reconstruct_map(cube: ODMRCube, frame: NVFrame, constants: NVConstants = NVConstants(),
                    shape: LineShapeParams = LineShapeParams(), config: FitConfig = FitConfig(),
                    workers: Optional[int] = None) -> Tuple[VectorFieldMap, FieldMap]:
    """
    Vector field map (bias removed) and validity mask (1 valid, 0 masked).
    Masked pixels hold zero field.
    """
    frame.require_bias_margin()
    resonances = fit_resonances(cube, frame, constants, shape, config, workers)

    signs = np.sign(frame.used_matrix() @ frame.bias_field)
    projections = signs * (resonances.f_plus - resonances.f_minus) / (2.0 * constants.gyromagnetic_hz_per_t)
    matrix = frame.used_matrix()
    if abs(np.linalg.det(matrix)) < 0.1:
        raise SingularFrameError("used axis matrix is singular")
    total = np.linalg.solve(matrix, projections.reshape(-1, 3).T).T.reshape(projections.shape)
    signal = total - frame.bias_field
    signal[~resonances.valid] = 0.0

    invalid = int((~resonances.valid).sum())
    if invalid:
        logger.warning(f"Masked {invalid} of {resonances.valid.size} pixels: {resonances.failures}")
    logger.info(f"Reconstructed {cube.width}x{cube.height} vector field map")

    geometry = cube.geometry
    mask = FieldMap(geometry, resonances.valid.astype(np.float64), "1", "mask")
    return VectorFieldMap.from_array(geometry, signal), mask
