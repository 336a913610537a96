import math

import numpy as np
import pytest

from hairsynth import structure as S
from hairsynth.gradcheck import check
from hairsynth.tensor import ShapeError, Tensor

BANK = S.build_bank()


def scalar_gabor(u, v, theta, su=1.8, sv=2.4, lam=4.0):
    ut = u * math.cos(theta) + v * math.sin(theta)
    vt = -u * math.sin(theta) + v * math.cos(theta)
    return math.exp(-0.5 * (ut * ut / (su * su) + vt * vt / (sv * sv))) * math.cos(2 * math.pi * ut / lam)


def grating(theta, size=32, wavelength=4.0, noise=0.0, seed=0):
    """Sinusoid whose intensity varies along (cos theta, sin theta) in (x, y)."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    img = 0.5 + 0.5 * np.cos(2 * np.pi / wavelength * (x * np.cos(theta) + y * np.sin(theta)))
    img += np.random.default_rng(seed).normal(0.0, noise, img.shape)
    return Tensor(img[None])


def test_default_bank_hyperparameters():
    assert (BANK.sigma_u, BANK.sigma_v, BANK.wavelength) == (1.8, 2.4, 4.0)
    assert BANK.count == 8
    np.testing.assert_allclose(BANK.orientations, [k * np.pi / 8 for k in range(8)])
    assert BANK.kernels.shape == (8, 1, 11, 11)


def test_reference_entry_k0_at_2_0():
    r = BANK.support // 2
    # row index is v, column index is u
    # the exact value is -0.5394075..., quoted to five places as -0.53940
    assert BANK.raw_kernels[0, 0, r + 0, r + 2] == pytest.approx(-0.53940, abs=1e-5)
    assert scalar_gabor(2, 0, 0.0) == pytest.approx(-0.5394075072376266, abs=1e-15)


def test_twenty_random_entries_match_scalar_evaluation():
    rng = np.random.default_rng(2024)
    r = BANK.support // 2
    for _ in range(20):
        k, row, col = rng.integers(0, 8), rng.integers(0, 11), rng.integers(0, 11)
        expect = scalar_gabor(col - r, row - r, k * math.pi / 8)
        assert abs(BANK.raw_kernels[k, 0, row, col] - expect) <= 1e-12
        # the DC correction is a separate, per-kernel constant shift
        corrected = expect - BANK.dc_offsets[k]
        assert abs(BANK.kernels[k, 0, row, col] - corrected) <= 1e-12


def test_dc_corrected_kernels_have_zero_mean_and_point_symmetry():
    np.testing.assert_allclose(BANK.kernels.mean(axis=(2, 3)), 0.0, atol=1e-15)
    np.testing.assert_array_equal(BANK.raw_kernels, BANK.raw_kernels[:, :, ::-1, ::-1])


def test_uncorrected_bank_keeps_raw_kernels():
    bank = S.build_bank(dc_correct=False)
    np.testing.assert_array_equal(bank.kernels, bank.raw_kernels)


@pytest.mark.parametrize("kwargs", [
    {"sigma_u": 0.0}, {"wavelength": -1.0}, {"count": 1}, {"support": 10}, {"support": 7},
])
def test_bank_validation(kwargs):
    with pytest.raises(ValueError):
        S.build_bank(**kwargs)


def test_luminance_weights():
    img = np.stack([np.full((2, 2), 1.0), np.full((2, 2), 0.5), np.zeros((2, 2))])
    y = S.luminance(Tensor(img)).data
    np.testing.assert_allclose(y, 0.299 + 0.5 * 0.587)


def test_luminance_rejects_two_channels():
    with pytest.raises(ShapeError):
        S.luminance(Tensor(np.zeros((2, 4, 4))))


def test_extract_rejects_non_finite():
    img = np.zeros((3, 8, 8))
    img[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        S.extract(Tensor(img), BANK)


def test_extract_shapes_and_encoding():
    img = Tensor(np.random.default_rng(0).random((2, 3, 16, 16)))
    pair = S.extract(img, BANK)
    assert pair.texture.shape == (2, 1, 16, 16)
    assert pair.index.shape == (2, 16, 16)
    enc = S.encode_orientation(pair).data
    assert enc.shape == (2, 3, 16, 16)
    np.testing.assert_allclose(enc[:, 1] ** 2 + enc[:, 2] ** 2, 1.0)
    assert (pair.texture.data >= 0).all()


def test_encoding_identifies_opposite_directions():
    # theta and theta + pi describe the same undirected strand
    a = np.sin(2 * 0.3), np.cos(2 * 0.3)
    b = np.sin(2 * (0.3 + np.pi)), np.cos(2 * (0.3 + np.pi))
    np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("k", range(8))
def test_grating_at_each_bank_angle_is_recovered(k):
    pair = S.extract(grating(k * np.pi / 8), BANK)
    interior = pair.raw_index[8:-8, 8:-8]
    assert (interior == k).mean() >= 0.9


@pytest.mark.parametrize("degrees,nearest", [(30, 1), (60, 3), (100, 4), (150, 7)])
def test_off_grid_grating_goes_to_nearest_bin(degrees, nearest):
    pair = S.extract(grating(np.deg2rad(degrees)), BANK)
    assert (pair.raw_index[8:-8, 8:-8] == nearest).mean() >= 0.8


@pytest.mark.parametrize("seed", range(5))
def test_second_application_lowers_entropy_on_noisy_horizontal_grating(seed):
    pair = S.extract(grating(np.pi / 2, noise=0.1, seed=seed), BANK)
    assert S.circular_entropy(pair.index, 8) <= S.circular_entropy(pair.raw_index, 8)


def test_circular_entropy_extremes():
    assert S.circular_entropy(np.zeros((4, 4), int), 8) == 0.0
    assert S.circular_entropy(np.arange(8), 8) == pytest.approx(math.log(8))


def test_colorize_orientation_is_pi_periodic():
    theta = np.linspace(0, np.pi, 7)
    np.testing.assert_allclose(S.colorize_orientation(theta), S.colorize_orientation(theta + np.pi), atol=1e-12)


def test_texture_map_is_single_application():
    img = Tensor(np.random.default_rng(3).random((3, 12, 12)))
    np.testing.assert_array_equal(S.texture_map(img, BANK).data, S.extract(img, BANK).raw_texture.data)


@pytest.mark.parametrize("seed", range(3))
def test_extraction_gradient_matches_finite_differences(seed):
    # Reflect padding mirrors the image about the border, so the 45 and 135
    # degree kernels tie exactly on edge pixels. Weighting only the centre keeps
    # the checked output outside the reach of those ties.
    rng = np.random.default_rng(seed)
    img = Tensor(rng.random((1, 16, 16)), requires_grad=True)
    weights = np.zeros((1, 16, 16))
    weights[:, 6:10, 6:10] = rng.standard_normal((1, 4, 4))
    weights = Tensor(weights)
    assert check(lambda: (S.extract(img, BANK).texture * weights).sum(), [img], step=1e-6) <= 1e-4
