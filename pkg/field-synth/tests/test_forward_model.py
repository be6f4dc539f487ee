import numpy as np
import pytest
import torch
from scipy import stats

from app.modules.exceptions import ArgumentError
from app.modules.forward_model import (
    block_mean,
    downsample,
    downsample_segmentation,
    gaussian_kernel1d,
    gaussian_smooth,
    noise_floor,
    rician_field,
    simulate_ulf,
    smooth_array,
)
from app.modules.models import DegradationVector, ForwardConfig, Segmentation, Volume
from app.modules.training import smooth_tensor, ulf_projection

UNIT_M = DegradationVector(m_wm=1.0, m_gm=1.0, m_csf=1.0)


def test_gaussian_kernel_is_normalized_and_truncated():
    kernel = gaussian_kernel1d(0.5)
    assert kernel.size == 5
    assert kernel.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(kernel, kernel[::-1])
    assert gaussian_kernel1d(0.0).tolist() == [1.0]
    with pytest.raises(ArgumentError):
        gaussian_kernel1d(-1.0)


def test_smoothing_preserves_constants():
    volume = Volume(data=np.full((5, 6, 7), 0.25))
    np.testing.assert_allclose(gaussian_smooth(volume, 1.2).data, 0.25, atol=1e-7)
    assert gaussian_smooth(volume, 0.0) is volume


def test_block_mean_handles_partial_blocks():
    data = np.arange(5, dtype=np.float64).reshape(5, 1, 1)
    np.testing.assert_allclose(block_mean(data, 2).ravel(), [0.5, 2.5, 4.0])


def test_downsample_dims_and_geometry():
    volume = Volume(data=np.ones((6, 5, 4)), spacing=(1.0, 1.0, 2.0))
    result = downsample(volume, 2)
    assert result.dims == (3, 3, 2)
    assert result.spacing == (2.0, 2.0, 4.0)
    np.testing.assert_allclose(result.affine[:3, 3], [0.5, 0.5, 1.0])
    with pytest.raises(ArgumentError):
        downsample(volume, 1.5)


def test_downsample_segmentation_takes_block_majority():
    labels = np.zeros((2, 2, 2), dtype=np.uint8)
    labels[0] = 2
    labels[1, 0] = 2
    assert downsample_segmentation(Segmentation(labels=labels), 2).labels.ravel().tolist() == [2]


def test_identity_configuration_returns_masked_input(small_phantom):
    hf, seg = small_phantom
    config = ForwardConfig(sigma_smooth=0.0, df=1, noise_rho=0.0, noise_sigma=0.0)
    ulf = simulate_ulf(hf, seg, UNIT_M, config)
    expected = np.where(seg.labels > 0, hf.data, 0.0)
    np.testing.assert_array_equal(ulf.data, expected.astype(np.float32))


def test_simulated_volume_is_halved_and_clamped(small_phantom):
    hf, seg = small_phantom
    ulf = simulate_ulf(hf, seg, UNIT_M, ForwardConfig())
    assert ulf.dims == (8, 8, 8)
    assert ulf.spacing == (2.0, 2.0, 2.0)
    assert ulf.data.min() >= 0.0
    assert ulf.data.max() <= 1.0


def test_simulation_is_deterministic_per_seed(small_phantom):
    hf, seg = small_phantom
    first = simulate_ulf(hf, seg, UNIT_M, ForwardConfig(seed=11))
    again = simulate_ulf(hf, seg, UNIT_M, ForwardConfig(seed=11))
    other = simulate_ulf(hf, seg, UNIT_M, ForwardConfig(seed=12))
    np.testing.assert_array_equal(first.data, again.data)
    assert not np.array_equal(first.data, other.data)


def test_zero_degradation_leaves_only_noise(small_phantom):
    hf, seg = small_phantom
    zero = DegradationVector(m_wm=0.0, m_gm=0.0, m_csf=0.0)
    ulf = simulate_ulf(hf, seg, zero, ForwardConfig(noise_rho=0.0, noise_sigma=0.0))
    assert np.all(ulf.data == 0.0)


def test_misaligned_segmentation_is_rejected(small_phantom):
    hf, _ = small_phantom
    with pytest.raises(ArgumentError):
        simulate_ulf(hf, Segmentation(labels=np.zeros((8, 8, 8), dtype=np.uint8)), UNIT_M)


def test_rician_moments_match_reference_distribution():
    rho, sigma_r = 5.0, 15.0
    samples = rician_field((100, 100, 100), rho, sigma_r, seed=7)
    reference = stats.rice(rho / sigma_r, scale=sigma_r)
    assert samples.mean() == pytest.approx(reference.mean(), rel=0.01)
    assert samples.var() == pytest.approx(reference.var(), rel=0.01)
    assert samples.min() >= 0.0


def test_rician_field_rejects_negative_sigma():
    with pytest.raises(ArgumentError):
        rician_field((2, 2, 2), 5.0, -1.0, seed=0)


def test_tensor_smoothing_matches_array_smoothing(rng):
    data = rng.uniform(size=(4, 5, 6))
    expected = smooth_array(data, 1.0)
    actual = smooth_tensor(torch.as_tensor(data), 1.0).numpy()
    np.testing.assert_allclose(actual, expected, atol=1e-12)


def test_differentiable_projection_matches_noise_free_simulation(small_phantom):
    hf, seg = small_phantom
    m = DegradationVector(m_wm=0.9, m_gm=0.6, m_csf=0.4)
    config = ForwardConfig(noise_rho=0.0, noise_sigma=0.0)
    expected = simulate_ulf(hf, seg, m, config).data

    projected = ulf_projection(
        torch.as_tensor(hf.data, dtype=torch.float64),
        torch.as_tensor(seg.one_hot()),
        m.as_array(),
        config.sigma_smooth,
        config.df,
    )
    np.testing.assert_allclose(projected.numpy(), expected, atol=1e-6)


def test_projection_requires_divisible_patch():
    with pytest.raises(ArgumentError):
        ulf_projection(torch.zeros(3, 4, 4), torch.zeros(3, 4, 4, 4), [1.0, 1.0, 1.0], 0.5, 2)


def _two_tissue_block():
    labels = np.zeros((8, 8, 8), dtype=np.uint8)
    labels[:4] = 1
    labels[4:] = 2
    return Segmentation(labels=labels)


def test_impulse_is_masked_then_smoothed_then_pooled():
    seg = _two_tissue_block()
    data = np.zeros((8, 8, 8))
    data[3, 3, 3] = 1.0
    config = ForwardConfig(sigma_smooth=1.0, df=2, noise_rho=0.0, noise_sigma=0.0)

    # the WM branch keeps the blur that crosses into GM territory, scaled by m_wm alone
    wm_only = simulate_ulf(Volume(data=data), seg, DegradationVector(m_wm=1.0, m_gm=0.0, m_csf=0.0), config)
    np.testing.assert_allclose(wm_only.data, block_mean(smooth_array(data, 1.0), 2), atol=1e-7)

    gm_only = simulate_ulf(Volume(data=data), seg, DegradationVector(m_wm=0.0, m_gm=1.0, m_csf=0.0), config)
    assert np.all(gm_only.data == 0.0)


def test_noise_free_simulation_is_linear_in_m(small_phantom):
    hf, seg = small_phantom
    config = ForwardConfig(noise_rho=0.0, noise_sigma=0.0)
    first = DegradationVector(m_wm=0.3, m_gm=0.1, m_csf=0.25)
    second = DegradationVector(m_wm=0.4, m_gm=0.5, m_csf=0.2)
    combined = DegradationVector.from_array(first.as_array() + second.as_array())

    total = simulate_ulf(hf, seg, combined, config).data
    parts = simulate_ulf(hf, seg, first, config).data + simulate_ulf(hf, seg, second, config).data
    np.testing.assert_allclose(total, parts, atol=1e-6)

    halved = simulate_ulf(hf, seg, DegradationVector.from_array(0.5 * second.as_array()), config).data
    np.testing.assert_allclose(halved, 0.5 * simulate_ulf(hf, seg, second, config).data, atol=1e-6)


def test_noise_free_simulation_is_bounded_by_peak_intensity_and_largest_m(small_phantom):
    hf, seg = small_phantom
    m = DegradationVector(m_wm=0.7, m_gm=0.35, m_csf=0.1)
    ulf = simulate_ulf(hf, seg, m, ForwardConfig(noise_rho=0.0, noise_sigma=0.0))
    assert ulf.data.max() <= hf.data.max() * 0.7 + 1e-6
    assert ulf.data.min() >= 0.0


def test_noise_floor_is_the_background_median():
    labels = np.zeros((4, 4, 4), dtype=np.uint8)
    labels[:2] = 1
    data = np.full((4, 4, 4), 0.9)
    data[2:] = np.linspace(0.01, 0.2, 32).reshape(2, 4, 4)
    floor = noise_floor(Volume(data=data), Segmentation(labels=labels))
    assert floor == pytest.approx(np.median(np.linspace(0.01, 0.2, 32)))

    all_tissue = Segmentation(labels=np.ones((4, 4, 4), dtype=np.uint8))
    assert noise_floor(Volume(data=data), all_tissue) == 0.0
    with pytest.raises(ArgumentError):
        noise_floor(Volume(data=data), Segmentation(labels=np.zeros((2, 2, 2), dtype=np.uint8)))


def test_noise_floor_of_a_simulation_matches_the_rician_median(phantom_64):
    hf, seg = phantom_64
    config = ForwardConfig(seed=4)
    ulf = simulate_ulf(hf, seg, DegradationVector(m_wm=0.5, m_gm=0.5, m_csf=0.5), config)
    floor = noise_floor(ulf, downsample_segmentation(seg, config.df))
    expected = stats.rice(config.noise_rho / config.noise_sigma, scale=config.noise_sigma).median() / config.noise_scale
    assert floor == pytest.approx(expected, rel=0.05)
