from typing import Dict, Tuple

import numpy as np
from pydantic import ValidationError
from scipy import ndimage

from app.modules.constants import CLASS_INDEX, TISSUES
from app.modules.exceptions import ArgumentError
from app.modules.models import PhantomSpec, Segmentation, Volume
from logger import logger

RESAMPLE_METHODS = ("nearest", "trilinear", "bicubic")


def normalize_intensity(volume: Volume) -> Volume:
    """Min-max rescale to [0, 1]; a constant volume maps to all zeros."""
    data = volume.data.astype(np.float64)
    low, high = float(data.min()), float(data.max())
    if high == low:
        return volume.with_data(np.zeros_like(data))
    return volume.with_data((data - low) / (high - low))


def _factors(factor) -> np.ndarray:
    try:
        factors = np.broadcast_to(np.asarray(factor, dtype=np.float64), (3,)).copy()
    except (TypeError, ValueError) as error:
        raise ArgumentError(f"resample factor must be a scalar or a 3-vector, got {factor!r}") from error
    if not np.all(np.isfinite(factors)) or np.any(factors <= 0):
        raise ArgumentError(f"resample factor must be positive, got {factor!r}")
    return factors


def output_dims(dims, factor) -> Tuple[int, int, int]:
    factors = _factors(factor)
    out = tuple(int(np.floor(n * f + 0.5)) for n, f in zip(dims, factors))
    if any(n < 1 for n in out):
        raise ArgumentError(f"resampling {tuple(dims)} by {tuple(factors)} leaves an empty axis")
    return out


def source_coordinates(count_out: int, factor: float) -> np.ndarray:
    """Voxel-centre aligned source coordinate of each output voxel: (i + 0.5) / factor - 0.5."""
    return (np.arange(count_out, dtype=np.float64) + 0.5) / factor - 0.5


def _catmull_rom_weights(offset: np.ndarray) -> np.ndarray:
    """Cubic convolution weights (a = -0.5) for taps at -1, 0, 1, 2 around floor(x)."""
    t = offset
    t2, t3 = t * t, t * t * t
    return np.stack(
        [
            -0.5 * t3 + t2 - 0.5 * t,
            1.5 * t3 - 2.5 * t2 + 1.0,
            -1.5 * t3 + 2.0 * t2 + 0.5 * t,
            0.5 * t3 - 0.5 * t2,
        ],
        axis=-1,
    )


def _cubic_matrix(count_in: int, coords: np.ndarray) -> np.ndarray:
    base = np.floor(coords).astype(np.int64)
    weights = _catmull_rom_weights(coords - base)
    matrix = np.zeros((coords.size, count_in), dtype=np.float64)
    rows = np.arange(coords.size)
    for tap in range(4):
        columns = np.clip(base - 1 + tap, 0, count_in - 1)
        np.add.at(matrix, (rows, columns), weights[:, tap])
    return matrix


def resample(volume: Volume, factor, method: str = "trilinear") -> Volume:
    """
    Resample on a voxel-centre aligned grid with round(dims * factor) voxels.

    Args:
        volume: input volume
        factor: positive scalar or per-axis factors (> 1 upsamples)
        method: nearest | trilinear | bicubic (Catmull-Rom)

    Returns:
        Resampled volume with spacing and affine adjusted to the new grid
    """
    if method not in RESAMPLE_METHODS:
        raise ArgumentError(f"unknown resampling method {method!r}; expected one of {RESAMPLE_METHODS}")
    factors = _factors(factor)
    dims_out = output_dims(volume.dims, factors)
    axes = [source_coordinates(m, f) for m, f in zip(dims_out, factors)]
    data = volume.data.astype(np.float64)

    if method == "nearest":
        index = [np.clip(np.floor(c + 0.5).astype(np.int64), 0, n - 1) for c, n in zip(axes, volume.dims)]
        result = data[np.ix_(*index)]
    elif method == "trilinear":
        grid = np.meshgrid(*axes, indexing="ij")
        result = ndimage.map_coordinates(data, grid, order=1, mode="nearest")
    else:
        result = data
        for axis, (coords, count_in) in enumerate(zip(axes, volume.dims)):
            matrix = _cubic_matrix(count_in, coords)
            result = np.moveaxis(np.tensordot(matrix, np.moveaxis(result, axis, 0), axes=(1, 0)), 0, axis)
        low, high = float(data.min()), float(data.max())
        if low >= 0.0 and high <= 1.0:
            overshoot = int(np.count_nonzero((result < 0.0) | (result > 1.0)))
            if overshoot:
                logger.warning("Bicubic resampling overshoot clamped to [0, 1] at %d voxels", overshoot)
            result = np.clip(result, 0.0, 1.0)

    spacing, affine = volume.rescaled_geometry(factors)
    logger.info("Resampled %s -> %s with %s interpolation", volume.dims, dims_out, method)
    return Volume(data=result, spacing=spacing, affine=affine)


def make_phantom(spec, seed: int = 0) -> Tuple[Volume, Segmentation]:
    """
    Nested-ellipsoid brain phantom: CSF shell, GM shell, WM core.

    Args:
        spec: PhantomSpec (or a dict of its fields)
        seed: drives the optional background / tissue noise

    Returns:
        The intensity volume and its hard segmentation
    """
    if not isinstance(spec, PhantomSpec):
        try:
            spec = PhantomSpec(**spec)
        except ValidationError as error:
            raise ArgumentError(f"invalid phantom spec: {error}") from error

    centre = (np.asarray(spec.dims, dtype=np.float64) - 1.0) / 2.0
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in spec.dims], indexing="ij")

    def inside(radii) -> np.ndarray:
        return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, centre, radii)) <= 1.0

    labels = np.full(spec.dims, CLASS_INDEX["background"], dtype=np.uint8)
    labels[inside(spec.csf_radii)] = CLASS_INDEX["csf"]
    labels[inside(spec.gm_radii)] = CLASS_INDEX["gm"]
    labels[inside(spec.wm_radii)] = CLASS_INDEX["wm"]

    data = np.full(spec.dims, spec.background, dtype=np.float64)
    for tissue in TISSUES:
        data[labels == CLASS_INDEX[tissue]] = spec.tissue_intensity(tissue)

    rng = np.random.Generator(np.random.Philox(seed))
    background = labels == CLASS_INDEX["background"]
    if spec.background_noise_std > 0:
        data[background] += rng.normal(0.0, spec.background_noise_std, int(background.sum()))
    if spec.tissue_noise_std > 0:
        data[~background] += rng.normal(0.0, spec.tissue_noise_std, int((~background).sum()))

    logger.info("Generated phantom with dims %s (seed %s)", spec.dims, seed)
    return Volume(data=data), Segmentation(labels=labels)


def tissue_masks(seg: Segmentation, threshold: float = 0.5) -> Dict[str, np.ndarray]:
    return {tissue: seg.class_mask(tissue, threshold) for tissue in TISSUES}


def erode_mask(mask: np.ndarray, iterations: int) -> np.ndarray:
    if iterations <= 0:
        return np.asarray(mask, dtype=bool)
    return ndimage.binary_erosion(mask, iterations=iterations)


def check_aligned(volume: Volume, seg: Segmentation) -> None:
    if volume.dims != seg.dims:
        raise ArgumentError(f"segmentation dims {seg.dims} do not match volume dims {volume.dims}")
