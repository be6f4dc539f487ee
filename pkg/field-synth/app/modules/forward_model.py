import math

import numpy as np
from scipy import ndimage

from app.modules.constants import CLASS_INDEX, NOISE_FLOOR_EROSION, TISSUES
from app.modules.exceptions import ArgumentError
from app.modules.models import DegradationVector, ForwardConfig, Segmentation, Volume
from app.modules.volumes import check_aligned, erode_mask
from logger import logger


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Discrete Gaussian truncated at radius ceil(4 sigma), renormalized to sum 1."""
    if sigma < 0:
        raise ArgumentError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return np.ones(1, dtype=np.float64)
    radius = int(math.ceil(4.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    return kernel / kernel.sum()


def smooth_array(array: np.ndarray, sigma: float) -> np.ndarray:
    kernel = gaussian_kernel1d(sigma)
    result = np.asarray(array, dtype=np.float64)
    if kernel.size == 1:
        return result
    for axis in range(result.ndim):
        result = ndimage.correlate1d(result, kernel, axis=axis, mode="reflect")
    return result


def block_mean(array: np.ndarray, df: int) -> np.ndarray:
    """Average over df^3 blocks; trailing partial blocks average the voxels they hold."""
    result = np.asarray(array, dtype=np.float64)
    if df == 1:
        return result
    for axis in range(3):
        size = result.shape[axis]
        starts = np.arange(0, size, df)
        counts = np.minimum(starts + df, size) - starts
        shape = [1] * result.ndim
        shape[axis] = -1
        result = np.add.reduceat(result, starts, axis=axis) / counts.reshape(shape)
    return result


def gaussian_smooth(volume: Volume, sigma: float) -> Volume:
    """Separable 3D Gaussian smoothing with reflective boundaries; sigma 0 is the identity."""
    if sigma < 0:
        raise ArgumentError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return volume
    return volume.with_data(smooth_array(volume.data, sigma))


def downsample(volume: Volume, df: int) -> Volume:
    if int(df) != df or df < 1:
        raise ArgumentError(f"downsampling factor must be an integer >= 1, got {df}")
    df = int(df)
    if df == 1:
        return volume
    spacing, affine = volume.rescaled_geometry(1.0 / df)
    return Volume(data=block_mean(volume.data, df), spacing=spacing, affine=affine)


def downsample_segmentation(seg: Segmentation, df: int) -> Segmentation:
    """Hard labels on the downsampled grid: arg-max of block-averaged class memberships."""
    if int(df) != df or df < 1:
        raise ArgumentError(f"downsampling factor must be an integer >= 1, got {df}")
    if df == 1:
        return seg.hardened()
    membership = seg.one_hot()
    pooled = np.stack([block_mean(membership[..., k], int(df)) for k in range(membership.shape[-1])], axis=-1)
    return Segmentation(labels=np.argmax(pooled, axis=-1))


def rician_field(shape, rho: float, sigma_r: float, seed: int) -> np.ndarray:
    """sqrt((rho + n1)^2 + n2^2) with n1, n2 ~ N(0, sigma_r^2) from a counter-based generator."""
    if sigma_r < 0:
        raise ArgumentError(f"sigma_r must be non-negative, got {sigma_r}")
    shape = tuple(int(n) for n in shape)
    rng = np.random.Generator(np.random.Philox(seed))
    real = rho + sigma_r * rng.standard_normal(shape)
    imaginary = sigma_r * rng.standard_normal(shape)
    return np.hypot(real, imaginary)


def sample_rician(dims, rho: float, sigma_r: float, seed: int) -> Volume:
    return Volume(data=rician_field(dims, rho, sigma_r, seed))


def simulate_ulf(hf: Volume, seg: Segmentation, m: DegradationVector, config: ForwardConfig = ForwardConfig()) -> Volume:
    """
    Degrade an HF volume into a ULF-like one.

    Each tissue image (hf masked by its segmentation) is smoothed, block-averaged
    by df and scaled by m_t; the branches are summed and Rician noise is added on
    the 0-255 intensity scale before mapping back to [0, 1].
    """
    check_aligned(hf, seg)
    data = hf.data.astype(np.float64)
    if data.min() < 0.0 or data.max() > 1.0:
        logger.warning("HF input lies outside [0, 1] (range %s..%s); normalize it first", data.min(), data.max())

    recombined = None
    for tissue in TISSUES:
        branch = block_mean(smooth_array(data * seg.class_mask(tissue), config.sigma_smooth), config.df)
        branch = branch * m.for_tissue(tissue)
        recombined = branch if recombined is None else recombined + branch

    if config.noise_sigma > 0 or config.noise_rho != 0:
        noise = rician_field(recombined.shape, config.noise_rho, config.noise_sigma, config.seed)
        recombined = np.clip((recombined * config.noise_scale + noise) / config.noise_scale, 0.0, 1.0)

    spacing, affine = hf.rescaled_geometry(1.0 / config.df)
    logger.info(
        "Simulated ULF volume %s -> %s with m=%s sigma=%s df=%s noise=(%s, %s) seed=%s",
        hf.dims,
        recombined.shape,
        m.as_array().tolist(),
        config.sigma_smooth,
        config.df,
        config.noise_rho,
        config.noise_sigma,
        config.seed,
    )
    return Volume(data=recombined, spacing=spacing, affine=affine)


def noise_floor(ulf: Volume, seg: Segmentation) -> float:
    """
    Intensity a noise-only voxel takes in a ULF volume: the median over background voxels.

    Rician noise has a positive mean, so signal-free regions sit above zero and every
    tissue voxel carries the same offset on top of its recombined signal. The background
    is eroded first to keep blurred tissue out of the estimate; small volumes where
    nothing survives erosion use every background voxel.
    """
    check_aligned(ulf, seg)
    background = seg.label_map() == CLASS_INDEX["background"]
    if not background.any():
        logger.warning("No background voxels in the ULF segmentation; assuming a zero noise floor")
        return 0.0
    interior = erode_mask(background, NOISE_FLOOR_EROSION)
    selected = interior if interior.any() else background
    floor = float(np.median(ulf.data[selected]))
    logger.info("Noise floor %.5f from %d background voxels", floor, int(selected.sum()))
    return floor
