"""
Test NV geometry, resonance positions and ODMR synthesis
"""
import numpy as np
import pytest

from errors import BiasMarginError, InvalidArgumentError, SingularFrameError, SweepRangeError
from maps_io import GridGeometry, VectorFieldMap
from nv_model import (LineShapeParams, NVConstants, NVFrame, predicted_resonances, resonance_pair,
                      synthesize_odmr, tetrahedral_axes)

D = 2.870e9
GAMMA = 28.024e9
SWEEP = np.linspace(D - 80e6, D + 80e6, 201)


def uniform_field(value, width=4, height=3):
    grid = GridGeometry(width, height, 1e-6)
    return VectorFieldMap.from_array(grid, np.broadcast_to(np.asarray(value, float), (height, width, 3)))


def test_tetrahedral_axes():
    axes = tetrahedral_axes()
    assert np.allclose(axes.sum(axis=0), 0.0, atol=1e-15)
    assert np.allclose(np.linalg.norm(axes, axis=1), 1.0, atol=1e-15)
    assert float(axes[0] @ axes[1]) == pytest.approx(-1.0 / 3.0, abs=1e-15)


def test_resonance_pair_examples():
    axis = np.ones(3) / np.sqrt(3.0)
    assert resonance_pair(np.zeros(3), axis) == (D, D)
    f_minus, f_plus = resonance_pair([0.0, 0.0, 1e-3], axis)
    assert f_minus == pytest.approx(2.85382e9, abs=1e4)
    assert f_plus == pytest.approx(2.88618e9, abs=1e4)
    assert f_plus - f_minus == pytest.approx(2 * GAMMA * 1e-3 / np.sqrt(3.0), rel=1e-12)
    assert resonance_pair([1e-3, -1e-3, 0.0], axis) == (D, D)


def test_resonance_pair_is_even():
    axis = tetrahedral_axes()[2]
    b = np.array([3e-4, -1e-4, 7e-4])
    assert resonance_pair(b, axis) == resonance_pair(-b, axis)


def test_frame_rejects_non_tetrahedral_axes():
    axes = tetrahedral_axes().copy()
    axes[1] = axes[0]
    with pytest.raises(InvalidArgumentError):
        NVFrame(axes=axes)
    with pytest.raises(InvalidArgumentError):
        NVFrame(used_axes=(0, 0, 1))


def test_every_triple_of_axes_spans_space():
    for used in [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]:
        frame = NVFrame(used_axes=used)
        assert abs(np.linalg.det(frame.used_matrix())) >= 0.1


def test_bias_margin():
    with pytest.raises(BiasMarginError):
        NVFrame().require_bias_margin()
    # (1,1,1) bias projects 2/3 mT on the other axes, well above 10 x 10 uT
    NVFrame(bias_field=np.ones(3) / np.sqrt(3.0) * 2e-3).require_bias_margin()
    # perpendicular to axis 0
    with pytest.raises(BiasMarginError):
        NVFrame(bias_field=[1e-3, -1e-3, 0.0]).require_bias_margin()
    with pytest.raises(BiasMarginError):
        NVFrame(bias_field=[0.5, 0.5, 0.5]).require_bias_margin()


def test_predicted_resonances_cover_both_branches():
    frame = NVFrame(bias_field=[1e-3, 0.0, 0.0])
    predicted = predicted_resonances(frame, NVConstants())
    assert len(predicted) == 8
    for axis, branch, f in predicted:
        expected = D + (2 * branch - 1) * GAMMA * 1e-3 / np.sqrt(3.0)
        assert f == pytest.approx(expected, rel=1e-12)


def test_zero_field_gives_single_merged_dip():
    shape = LineShapeParams(contrast=0.02)
    cube = synthesize_odmr(uniform_field([0, 0, 0]), NVFrame(), SWEEP, shape)
    spectrum = cube.spectra[1, 2]
    assert np.argmin(spectrum) == 100
    assert spectrum[100] == pytest.approx(1.0 - 8 * 0.02, abs=1e-12)
    assert np.all((cube.spectra >= 0) & (cube.spectra <= 1))


def test_bias_along_111_splits_into_two_groups():
    bias = np.ones(3) / np.sqrt(3.0) * 2e-3
    frame = NVFrame(bias_field=bias)
    shifts = np.sort([abs(f - D) for _, _, f in predicted_resonances(frame, NVConstants())])
    assert np.allclose(shifts[:6], 18.683e6, atol=1e3)
    assert np.allclose(shifts[6:], 56.048e6, atol=1e3)

    freqs = np.linspace(D - 80e6, D + 80e6, 1601)
    cube = synthesize_odmr(uniform_field([0, 0, 0], 1, 1), frame, freqs, LineShapeParams())
    spectrum = cube.spectra[0, 0]
    minima = [i for i in range(1, freqs.size - 1) if spectrum[i] < spectrum[i - 1] and spectrum[i] <= spectrum[i + 1]]
    assert len(minima) == 4
    for i, expected in zip(minima, [-56.048e6, -18.683e6, 18.683e6, 56.048e6]):
        assert freqs[i] - D == pytest.approx(expected, abs=0.2e6)


def test_sweep_too_narrow():
    frame = NVFrame(bias_field=[5e-3, 0.0, 0.0])
    with pytest.raises(SweepRangeError):
        synthesize_odmr(uniform_field([0, 0, 0]), frame, SWEEP, LineShapeParams())


def test_noise_is_seeded_and_pixelwise():
    frame = NVFrame(bias_field=[1e-3, 0.5e-3, 0.2e-3])
    noisy = LineShapeParams(photon_noise_sigma=1e-3, rng_seed=7)
    a = synthesize_odmr(uniform_field([0, 0, 0]), frame, SWEEP, noisy)
    b = synthesize_odmr(uniform_field([0, 0, 0]), frame, SWEEP, noisy)
    assert a.spectra.tobytes() == b.spectra.tobytes()
    assert not np.array_equal(a.spectra[0, 0], a.spectra[0, 1])


def test_synthesis_is_local():
    frame = NVFrame(bias_field=[1e-3, 0.5e-3, 0.2e-3])
    values = np.zeros((3, 4, 3))
    base = synthesize_odmr(VectorFieldMap.from_array(GridGeometry(4, 3, 1e-6), values), frame, SWEEP,
                           LineShapeParams())
    values[1, 1] = [2e-5, 0.0, 0.0]
    changed = synthesize_odmr(VectorFieldMap.from_array(GridGeometry(4, 3, 1e-6), values), frame, SWEEP,
                              LineShapeParams())
    differs = np.any(base.spectra != changed.spectra, axis=2)
    assert differs.sum() == 1 and differs[1, 1]


def test_line_shape_validation():
    with pytest.raises(InvalidArgumentError):
        LineShapeParams(contrast=0.5)
    with pytest.raises(InvalidArgumentError):
        LineShapeParams(linewidth_fwhm_hz=0.0)
