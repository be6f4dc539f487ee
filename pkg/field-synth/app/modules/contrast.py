"""Tissue SNR estimation, the contrast system and the bounded grid-search solver for m."""
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np

from app.modules.constants import CLASS_INDEX, CONTRAST_PAIRS, RAYLEIGH_CORRECTION, TIE_TOLERANCE, TISSUES
from app.modules.exceptions import ArgumentError, DegenerateInputError
from app.modules.models import ContrastTriple, DegradationVector, Segmentation, SnrTriple, SolverConfig, Volume
from app.modules.volumes import erode_mask
from logger import logger


def _as_mask(mask, dims, name: str) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(dims):
        raise ArgumentError(f"{name} mask has shape {mask.shape}, expected {tuple(dims)}")
    return mask


def estimate_snr(volume: Volume, roi_masks: Mapping[str, np.ndarray], bg_mask: np.ndarray) -> SnrTriple:
    """
    SNR_t = mean(ROI_t) / (std(background) * 1.53), population std.

    Args:
        volume: HF intensity volume
        roi_masks: binary mask per tissue ("wm", "gm", "csf")
        bg_mask: binary background mask (at least two voxels)
    """
    data = volume.data.astype(np.float64)
    bg_mask = _as_mask(bg_mask, volume.dims, "background")
    if bg_mask.sum() < 2:
        raise ArgumentError("background mask must contain at least 2 voxels")
    sigma_bg = float(np.std(data[bg_mask]))
    if sigma_bg == 0.0:
        raise DegenerateInputError("background standard deviation is zero; SNR is undefined")

    snr = {}
    for tissue in TISSUES:
        if tissue not in roi_masks:
            raise ArgumentError(f"missing ROI mask for {tissue}")
        mask = _as_mask(roi_masks[tissue], volume.dims, tissue)
        if not mask.any():
            raise ArgumentError(f"ROI mask for {tissue} is empty")
        snr[f"snr_{tissue}"] = float(data[mask].mean()) / (sigma_bg * RAYLEIGH_CORRECTION)

    triple = SnrTriple(**snr)
    if not triple.is_t1_ordered:
        logger.warning("SNR ordering WM > GM > CSF expected for T1-weighted input, got %s", triple)
    logger.info("Estimated SNR %s with background sigma %s", triple, sigma_bg)
    return triple


def background_sigma(volume: Volume, bg_mask: np.ndarray) -> float:
    return float(np.std(volume.data.astype(np.float64)[_as_mask(bg_mask, volume.dims, "background")]))


def build_contrast_system(snr: SnrTriple) -> np.ndarray:
    """Rows map m to (c_wc, c_wg, c_gc); row 1 equals row 2 + row 3, so A is never invertible."""
    return np.array(
        [
            [snr.snr_wm, 0.0, -snr.snr_csf],
            [snr.snr_wm, -snr.snr_gm, 0.0],
            [0.0, snr.snr_gm, -snr.snr_csf],
        ],
        dtype=np.float64,
    )


def objective(system: np.ndarray, target: np.ndarray, epsilon: float, m_wm, m_gm, m_csf):
    """0.5 * ||A m - c||^2 + epsilon * ||m||^2, broadcast over lattice arrays.

    Every search path evaluates candidates through this one expression so equal
    lattice points give bit-identical objective values.
    """
    r0 = system[0, 0] * m_wm + system[0, 1] * m_gm + system[0, 2] * m_csf - target[0]
    r1 = system[1, 0] * m_wm + system[1, 1] * m_gm + system[1, 2] * m_csf - target[1]
    r2 = system[2, 0] * m_wm + system[2, 1] * m_gm + system[2, 2] * m_csf - target[2]
    return 0.5 * (r0 * r0 + r1 * r1 + r2 * r2) + epsilon * (m_wm * m_wm + m_gm * m_gm + m_csf * m_csf)


def _lattice(cells: int) -> np.ndarray:
    return np.arange(cells + 1, dtype=np.float64) / cells


def _tie_tolerance(system: np.ndarray, target: np.ndarray) -> float:
    # objective values closer than this to the minimum are rounding noise, not a better point
    scale = max(1.0, float(target @ target), float(np.sum(system * system)))
    return TIE_TOLERANCE * scale


def _row_exact_search(system: np.ndarray, target: np.ndarray, epsilon: float, cells: int) -> Tuple[Tuple[int, int, int], float]:
    values = _lattice(cells)
    m_wm = values[:, np.newaxis]
    m_gm = values[np.newaxis, :]

    # for fixed (m_wm, m_gm) the objective is a strictly convex parabola in m_csf
    column = system[:, 2]
    partial = [system[k, 0] * m_wm + system[k, 1] * m_gm - target[k] for k in range(3)]
    numerator = -(column[0] * partial[0] + column[1] * partial[1] + column[2] * partial[2])
    curvature = float(column @ column) + 2.0 * epsilon
    vertex = np.clip(numerator / curvature, 0.0, 1.0)

    lower = np.clip(np.floor(vertex * cells).astype(np.int64), 0, cells)
    upper = np.minimum(lower + 1, cells)
    lower_value = objective(system, target, epsilon, m_wm, m_gm, values[lower])
    upper_value = objective(system, target, epsilon, m_wm, m_gm, values[upper])
    row_value = np.minimum(lower_value, upper_value)

    threshold = float(row_value.min()) + _tie_tolerance(system, target)
    flat = int(np.argmax(row_value <= threshold))
    i_wm, i_gm = np.unravel_index(flat, row_value.shape)
    if lower_value[i_wm, i_gm] <= threshold:
        return (int(i_wm), int(i_gm), int(lower[i_wm, i_gm])), float(lower_value[i_wm, i_gm])
    return (int(i_wm), int(i_gm), int(upper[i_wm, i_gm])), float(upper_value[i_wm, i_gm])


def estimate_m(snr: SnrTriple, target: ContrastTriple, config: SolverConfig = SolverConfig()) -> Tuple[DegradationVector, float]:
    """
    Grid-search solution of min_{0<=m<=1} 0.5 ||A m - c||^2 + eps ||m||^2.

    Returns the lexicographically smallest minimizer on the lattice of step
    `config.grid_step` and its objective value. Candidates within a relative
    1e-12 of the minimum count as ties.
    """
    system = build_contrast_system(snr)
    c = target.as_array()
    if target.residual > 1e-9:
        logger.info("Target contrast is inconsistent by %s (c_wc != c_wg + c_gc)", target.residual)

    cells = config.cells
    index, value = _row_exact_search(system, c, config.epsilon, cells)
    m = DegradationVector.from_array(_lattice(cells)[list(index)])
    logger.info("Estimated m=%s objective=%s (epsilon=%s, step=%s)", m, value, config.epsilon, config.grid_step)
    return m, value


def brute_force_m(snr: SnrTriple, target: ContrastTriple, config: SolverConfig = SolverConfig()) -> Tuple[DegradationVector, float]:
    """Exhaustive scan of the full lattice, one m_wm slab at a time; the oracle for estimate_m."""
    system = build_contrast_system(snr)
    c = target.as_array()
    cells = config.cells
    values = _lattice(cells)
    m_gm = values[:, np.newaxis]
    m_csf = values[np.newaxis, :]

    def slab(i_wm: int) -> np.ndarray:
        return objective(system, c, config.epsilon, values[i_wm], m_gm, m_csf)

    slab_minima = np.array([float(slab(i_wm).min()) for i_wm in range(cells + 1)])
    threshold = float(slab_minima.min()) + _tie_tolerance(system, c)
    i_wm = int(np.argmax(slab_minima <= threshold))
    candidates = slab(i_wm)
    flat = int(np.argmax(candidates <= threshold))
    i_gm, i_csf = np.unravel_index(flat, candidates.shape)
    return DegradationVector.from_array(values[[i_wm, int(i_gm), int(i_csf)]]), float(candidates[i_gm, i_csf])


def measure_contrast(volume: Volume, seg: Segmentation, bg_sigma: float) -> ContrastTriple:
    """c_ij = (mean_i - mean_j) / (bg_sigma * 1.53) for the three tissue pairs."""
    if not bg_sigma > 0:
        raise ArgumentError(f"bg_sigma must be positive, got {bg_sigma}")
    if seg.dims != volume.dims:
        raise ArgumentError(f"segmentation dims {seg.dims} do not match volume dims {volume.dims}")
    data = volume.data.astype(np.float64)
    means = {}
    for tissue in TISSUES:
        mask = seg.class_mask(tissue)
        if not mask.any():
            raise ArgumentError(f"tissue class {tissue} is missing from the segmentation")
        means[tissue] = float(data[mask].mean())
    scale = bg_sigma * RAYLEIGH_CORRECTION
    return ContrastTriple(**{name: (means[i] - means[j]) / scale for name, (i, j) in CONTRAST_PAIRS.items()})


def contrast_residual(contrast: ContrastTriple) -> float:
    return contrast.residual


def masks_from_boxes(box_spec: Mapping[str, Sequence[int]], dims) -> Dict[str, np.ndarray]:
    """Half-open voxel boxes {name: [x0, x1, y0, y1, z0, z1]} to boolean masks."""
    masks = {}
    for name, box in box_spec.items():
        if len(box) != 6:
            raise ArgumentError(f"box for {name} must have 6 entries, got {list(box)}")
        x0, x1, y0, y1, z0, z1 = (int(v) for v in box)
        mask = np.zeros(tuple(dims), dtype=bool)
        mask[x0:x1, y0:y1, z0:z1] = True
        if not mask.any():
            raise ArgumentError(f"box for {name} selects no voxels inside {tuple(dims)}")
        masks[name] = mask
    return masks


def rois_from_segmentation(seg: Segmentation, erosion: int = 2) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Interior tissue ROIs (eroded labels) and the background mask of a label map."""
    rois = {}
    for tissue in TISSUES:
        mask = seg.class_mask(tissue)
        eroded = erode_mask(mask, erosion)
        rois[tissue] = eroded if eroded.any() else mask
    return rois, seg.label_map() == CLASS_INDEX["background"]
