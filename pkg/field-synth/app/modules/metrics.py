"""Image quality and segmentation metrics."""
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage import feature
from skimage.metrics import structural_similarity

from app.modules.constants import CLASS_INDEX, CLASS_NAMES
from app.modules.exceptions import ArgumentError, DegenerateInputError
from app.modules.models import MetricReport, Segmentation, Volume

SSIM_WINDOW = 7
RQS_WEIGHTS = {"ssim": 1.0, "mslc": 1.0, "dice": 1.0, "iou": 1.0, "lpips": 0.0}
CANNY_DEFAULTS = {"sigma": 1.0, "low": 0.1, "high": 0.2}


def _same_dims(a: Volume, b: Volume) -> None:
    if a.dims != b.dims:
        raise ArgumentError(f"volume dims differ: {a.dims} vs {b.dims}")


def ssim(a: Volume, b: Volume) -> float:
    """Mean 3D SSIM with a 7^3 box window, data range 1 and population statistics."""
    _same_dims(a, b)
    window = min(SSIM_WINDOW, min(a.dims))
    if window % 2 == 0:
        window -= 1
    value = structural_similarity(
        a.data.astype(np.float64),
        b.data.astype(np.float64),
        win_size=window,
        data_range=1.0,
        gaussian_weights=False,
        use_sample_covariance=False,
    )
    return float(np.clip(value, -1.0, 1.0))


def mslc(a: Volume, b: Volume) -> float:
    """1 - mean Pearson correlation of mean-shifted axis-aligned lines that vary in both volumes."""
    _same_dims(a, b)
    x_all, y_all = a.data.astype(np.float64), b.data.astype(np.float64)
    correlations = []
    for axis in range(3):
        if x_all.shape[axis] < 2:
            continue
        x = np.moveaxis(x_all, axis, -1).reshape(-1, x_all.shape[axis])
        y = np.moveaxis(y_all, axis, -1).reshape(-1, y_all.shape[axis])
        valid = (np.ptp(x, axis=1) > 0) & (np.ptp(y, axis=1) > 0)
        if not valid.any():
            continue
        xc = x[valid] - x[valid].mean(axis=1, keepdims=True)
        yc = y[valid] - y[valid].mean(axis=1, keepdims=True)
        r = (xc * yc).sum(axis=1) / np.sqrt((xc * xc).sum(axis=1) * (yc * yc).sum(axis=1))
        correlations.append(np.clip(r, -1.0, 1.0))
    if not correlations:
        raise DegenerateInputError("no line varies in both volumes; MSLC is undefined")
    return float(1.0 - np.concatenate(correlations).mean())


def wm_gm_contrast(volume: Volume, seg: Segmentation) -> float:
    """(mean WM - mean GM) / std CSF, with the CSF spread standing in for background noise."""
    if seg.dims != volume.dims:
        raise ArgumentError(f"segmentation dims {seg.dims} do not match volume dims {volume.dims}")
    data = volume.data.astype(np.float64)
    labels = seg.label_map()
    values = {}
    for tissue in ("wm", "gm", "csf"):
        selected = data[labels == CLASS_INDEX[tissue]]
        if selected.size == 0:
            raise DegenerateInputError(f"tissue class {tissue} is empty")
        values[tissue] = selected
    spread = float(np.std(values["csf"]))
    if spread == 0.0:
        raise DegenerateInputError("CSF intensities have zero variance")
    return (float(values["wm"].mean()) - float(values["gm"].mean())) / spread


def dice_iou(pred: Segmentation, ref: Segmentation) -> Tuple[Dict[str, float], Dict[str, float]]:
    """Per-class Dice and IoU on hard labels; a class absent from both scores 1."""
    if pred.dims != ref.dims:
        raise ArgumentError(f"segmentation dims differ: {pred.dims} vs {ref.dims}")
    p_labels, r_labels = pred.label_map(), ref.label_map()
    dice, iou = {}, {}
    for name in CLASS_NAMES:
        p = p_labels == CLASS_INDEX[name]
        r = r_labels == CLASS_INDEX[name]
        intersection = int(np.count_nonzero(p & r))
        total = int(np.count_nonzero(p)) + int(np.count_nonzero(r))
        union = int(np.count_nonzero(p | r))
        dice[name] = 1.0 if total == 0 else 2.0 * intersection / total
        iou[name] = 1.0 if union == 0 else intersection / union
    return dice, iou


def canny_edges(image: np.ndarray, sigma: float = 1.0, low_thresh: float = 0.1, high_thresh: float = 0.2) -> np.ndarray:
    """
    Canny edge map of a 2D slice.

    Args:
        image: 2D array
        sigma: Gaussian smoothing width
        low_thresh: hysteresis low threshold, relative to the maximum gradient magnitude
        high_thresh: hysteresis high threshold, relative to the maximum gradient magnitude

    Returns:
        Boolean edge map
    """
    if not 0.0 < low_thresh < high_thresh:
        raise ArgumentError(f"thresholds must satisfy 0 < low < high, got ({low_thresh}, {high_thresh})")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ArgumentError(f"expected a 2D slice, got shape {image.shape}")
    smoothed = ndimage.gaussian_filter(image, sigma, mode="nearest")
    magnitude = np.hypot(ndimage.sobel(smoothed, axis=0), ndimage.sobel(smoothed, axis=1))
    peak = float(magnitude.max())
    if peak <= 0.0:
        return np.zeros(image.shape, dtype=bool)
    return feature.canny(
        image,
        sigma=sigma,
        low_threshold=low_thresh * peak,
        high_threshold=high_thresh * peak,
        mode="nearest",
    )


def edge_f1(pred_edges: np.ndarray, ref_edges: np.ndarray, tolerance_px: float = 1.0) -> float:
    """F1 of edge pixels under greedy one-to-one matching within `tolerance_px` (Euclidean)."""
    pred_points = np.argwhere(np.asarray(pred_edges, dtype=bool))
    ref_points = np.argwhere(np.asarray(ref_edges, dtype=bool))
    if len(pred_points) == 0 and len(ref_points) == 0:
        return 1.0
    if len(pred_points) == 0 or len(ref_points) == 0:
        return 0.0

    tree = cKDTree(ref_points)
    taken = np.zeros(len(ref_points), dtype=bool)
    matched = 0
    for point in pred_points:
        candidates = tree.query_ball_point(point, r=tolerance_px + 1e-9)
        if not candidates:
            continue
        candidates = np.asarray(sorted(candidates))
        candidates = candidates[~taken[candidates]]
        if candidates.size == 0:
            continue
        distances = np.linalg.norm(ref_points[candidates] - point, axis=1)
        choice = candidates[int(np.argmin(distances))]
        taken[choice] = True
        matched += 1

    if matched == 0:
        return 0.0
    precision = matched / len(pred_points)
    recall = matched / len(ref_points)
    return 2.0 * precision * recall / (precision + recall)


def volume_edge_f1(
    pred: Volume,
    ref: Volume,
    sigma: float = CANNY_DEFAULTS["sigma"],
    low: float = CANNY_DEFAULTS["low"],
    high: float = CANNY_DEFAULTS["high"],
    tolerance_px: float = 1.0,
) -> float:
    """Mean edge F1 over axial (last-axis) slices."""
    _same_dims(pred, ref)
    scores = [
        edge_f1(
            canny_edges(pred.data[:, :, k], sigma, low, high),
            canny_edges(ref.data[:, :, k], sigma, low, high),
            tolerance_px,
        )
        for k in range(pred.dims[2])
    ]
    return float(np.mean(scores))


def rqs(
    ssim_value: float,
    mslc_value: float,
    dice: float,
    iou: float,
    lpips: Optional[float] = None,
    weights: Optional[Mapping[str, float]] = None,
) -> float:
    """Weighted mean of (ssim, 1 - mslc/2, dice, iou[, 1 - lpips]); the lpips slot is skipped when absent."""
    weights = {**RQS_WEIGHTS, **(weights or {})}
    terms = {"ssim": ssim_value, "mslc": 1.0 - mslc_value / 2.0, "dice": dice, "iou": iou}
    if lpips is not None:
        terms["lpips"] = 1.0 - lpips
    used = {name: weights[name] for name in terms if weights[name] > 0}
    if not used:
        raise ArgumentError("RQS needs at least one positive weight")
    return float(sum(weights[name] * terms[name] for name in used) / sum(used.values()))


def contrast_improvement(pred_contrast: float, baseline_contrast: float) -> float:
    """Relative gain (pred - baseline) / |baseline|."""
    if baseline_contrast == 0:
        raise DegenerateInputError("baseline contrast is zero")
    return (pred_contrast - baseline_contrast) / abs(baseline_contrast)


def build_report(
    pred: Volume,
    ref: Volume,
    pred_seg: Optional[Segmentation] = None,
    ref_seg: Optional[Segmentation] = None,
    with_edges: bool = True,
) -> MetricReport:
    """Full metric panel; segmentation-dependent fields stay empty when no segmentation is given."""
    ssim_value = ssim(pred, ref)
    mslc_value = mslc(pred, ref)
    contrast, dice, iou, score = None, None, None, None

    contrast_seg = ref_seg if ref_seg is not None else pred_seg
    if contrast_seg is not None:
        try:
            contrast = wm_gm_contrast(pred, contrast_seg)
        except DegenerateInputError:
            contrast = None
    if pred_seg is not None and ref_seg is not None:
        dice, iou = dice_iou(pred_seg, ref_seg)
        score = rqs(ssim_value, mslc_value, float(np.mean(list(dice.values()))), float(np.mean(list(iou.values()))))

    return MetricReport(
        ssim=ssim_value,
        mslc=mslc_value,
        wm_gm_contrast=contrast,
        dice=dice,
        iou=iou,
        edge_f1=volume_edge_f1(pred, ref) if with_edges else None,
        rqs=score,
    )
