import numpy as np
import pytest

from app.modules.exceptions import ArgumentError, DegenerateInputError
from app.modules.metrics import (
    build_report,
    canny_edges,
    contrast_improvement,
    dice_iou,
    edge_f1,
    mslc,
    rqs,
    ssim,
    volume_edge_f1,
    wm_gm_contrast,
)
from app.modules.models import Segmentation, Volume


def _population_ssim(a: np.ndarray, b: np.ndarray) -> float:
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a, mu_b = a.mean(), b.mean()
    var_a, var_b = a.var(), b.var()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def test_ssim_of_identical_volumes(rng):
    volume = Volume(data=rng.uniform(size=(10, 10, 10)))
    assert ssim(volume, volume) == pytest.approx(1.0)


def test_ssim_of_opposite_constants_is_near_zero():
    assert ssim(Volume(data=np.zeros((8, 8, 8))), Volume(data=np.ones((8, 8, 8)))) < 0.01


def test_ssim_single_window_matches_population_formula(rng):
    a = rng.uniform(size=(7, 7, 7)).astype(np.float32).astype(np.float64)
    b = np.clip(a + rng.normal(0, 0.1, size=a.shape), 0, 1).astype(np.float32).astype(np.float64)
    assert ssim(Volume(data=a), Volume(data=b)) == pytest.approx(_population_ssim(a, b), rel=1e-6)


def test_ssim_rejects_mismatched_dims():
    with pytest.raises(ArgumentError):
        ssim(Volume(data=np.zeros((4, 4, 4))), Volume(data=np.zeros((4, 4, 5))))


def test_mslc_extremes(rng):
    volume = Volume(data=rng.uniform(size=(5, 6, 7)))
    assert mslc(volume, volume) == pytest.approx(0.0, abs=1e-12)
    flipped = Volume(data=1.0 - volume.data)
    assert mslc(volume, flipped) == pytest.approx(2.0, abs=1e-9)


def test_mslc_matches_line_by_line_correlation(rng):
    a = rng.uniform(size=(4, 5, 6)).astype(np.float32)
    b = rng.uniform(size=(4, 5, 6)).astype(np.float32)
    a[0, 0, :] = 0.5

    correlations = []
    for axis in range(3):
        lines_a = np.moveaxis(a.astype(np.float64), axis, -1).reshape(-1, a.shape[axis])
        lines_b = np.moveaxis(b.astype(np.float64), axis, -1).reshape(-1, b.shape[axis])
        for x, y in zip(lines_a, lines_b):
            if np.ptp(x) > 0 and np.ptp(y) > 0:
                correlations.append(np.corrcoef(x, y)[0, 1])
    expected = 1.0 - np.mean(correlations)
    assert mslc(Volume(data=a), Volume(data=b)) == pytest.approx(expected, rel=1e-9)


def test_mslc_of_constant_volumes_is_undefined():
    with pytest.raises(DegenerateInputError):
        mslc(Volume(data=np.ones((3, 3, 3))), Volume(data=np.ones((3, 3, 3))))


def test_wm_gm_contrast_example():
    labels = np.array([1, 1, 2, 2, 3, 3]).reshape(1, 1, 6)
    data = np.array([0.8, 0.8, 0.3, 0.3, 0.1, 0.3]).reshape(1, 1, 6)
    value = wm_gm_contrast(Volume(data=data), Segmentation(labels=labels))
    assert value == pytest.approx(5.0, rel=1e-5)

    no_csf = Segmentation(labels=np.array([1, 1, 2, 2, 2, 2]).reshape(1, 1, 6))
    with pytest.raises(DegenerateInputError):
        wm_gm_contrast(Volume(data=data), no_csf)


def test_wm_gm_contrast_ignores_positive_affine_rescaling(small_phantom, rng):
    hf, seg = small_phantom
    noisy = Volume(data=hf.data + rng.normal(0.0, 0.02, hf.dims))
    reference = wm_gm_contrast(noisy, seg)
    for scale, offset in ((2.5, 0.0), (0.1, 3.0), (40.0, -7.5)):
        rescaled = Volume(data=noisy.data * scale + offset)
        assert wm_gm_contrast(rescaled, seg) == pytest.approx(reference, rel=1e-9)


def test_dice_and_iou_example():
    pred = Segmentation(labels=np.array([1, 1, 0, 0]).reshape(1, 1, 4))
    ref = Segmentation(labels=np.array([1, 0, 0, 0]).reshape(1, 1, 4))
    dice, iou = dice_iou(pred, ref)
    assert dice["wm"] == pytest.approx(2.0 / 3.0)
    assert iou["wm"] == pytest.approx(0.5)
    assert dice["background"] == pytest.approx(0.8)
    assert dice["gm"] == 1.0
    assert iou["csf"] == 1.0


def test_canny_on_blank_image():
    assert not canny_edges(np.zeros((16, 16))).any()


def test_canny_finds_a_vertical_step():
    image = np.zeros((32, 32))
    image[:, 16:] = 1.0
    edges = canny_edges(image)
    rows, cols = np.nonzero(edges)
    assert set(cols.tolist()) <= {15, 16}
    for row in range(2, 30):
        assert edges[row].any()


def test_canny_rejects_bad_thresholds():
    with pytest.raises(ArgumentError):
        canny_edges(np.zeros((8, 8)), low_thresh=0.3, high_thresh=0.2)
    with pytest.raises(ArgumentError):
        canny_edges(np.zeros((8, 8, 8)))


def test_edge_f1_matching():
    ref = np.zeros((8, 8), dtype=bool)
    ref[:, 3] = True
    assert edge_f1(ref, ref) == 1.0
    assert edge_f1(np.roll(ref, 1, axis=1), ref) == 1.0
    assert edge_f1(np.roll(ref, 3, axis=1), ref) == 0.0
    assert edge_f1(np.zeros((8, 8), dtype=bool), np.zeros((8, 8), dtype=bool)) == 1.0
    assert edge_f1(np.zeros((8, 8), dtype=bool), ref) == 0.0


def test_edge_f1_partial_match():
    pred = np.zeros((8, 8), dtype=bool)
    pred[0, 0] = pred[0, 5] = True
    ref = np.zeros((8, 8), dtype=bool)
    ref[0, 0] = True
    assert edge_f1(pred, ref) == pytest.approx(2.0 / 3.0)


def test_edge_f1_at_zero_tolerance_is_symmetric_overlap(rng):
    for _ in range(10):
        first = rng.uniform(size=(12, 12)) < 0.3
        second = rng.uniform(size=(12, 12)) < 0.3
        forward_score = edge_f1(first, second, tolerance_px=0.0)
        assert forward_score == pytest.approx(edge_f1(second, first, tolerance_px=0.0), abs=1e-12)
        overlap = 2.0 * np.count_nonzero(first & second) / (first.sum() + second.sum())
        assert forward_score == pytest.approx(overlap, abs=1e-12)


def test_volume_edge_f1_of_identical_volumes(small_phantom):
    hf, _ = small_phantom
    assert volume_edge_f1(hf, hf) == 1.0


def test_rqs_weighted_mean():
    assert rqs(0.8, 0.4, 0.7, 0.6) == pytest.approx(0.725)
    assert rqs(0.8, 0.4, 0.7, 0.6, lpips=0.2, weights={"lpips": 1.0}) == pytest.approx(0.74)
    assert rqs(0.8, 0.4, 0.7, 0.6, lpips=0.2) == pytest.approx(0.725)
    with pytest.raises(ArgumentError):
        rqs(0.8, 0.4, 0.7, 0.6, weights={"ssim": 0.0, "mslc": 0.0, "dice": 0.0, "iou": 0.0})


def test_contrast_improvement():
    assert contrast_improvement(6.0, 4.0) == pytest.approx(0.5)
    assert contrast_improvement(2.0, -4.0) == pytest.approx(1.5)
    with pytest.raises(DegenerateInputError):
        contrast_improvement(1.0, 0.0)


def test_report_of_reference_against_itself(small_phantom):
    hf, seg = small_phantom
    report = build_report(hf, hf, seg, seg)
    assert report.ssim == pytest.approx(1.0)
    assert report.mslc == pytest.approx(0.0, abs=1e-9)
    assert report.edge_f1 == 1.0
    assert all(value == 1.0 for value in report.dice.values())
    assert report.rqs == pytest.approx(1.0)


def test_report_without_segmentations(small_phantom):
    hf, _ = small_phantom
    report = build_report(hf, hf, with_edges=False)
    assert report.dice is None
    assert report.rqs is None
    assert report.wm_gm_contrast is None
    assert report.edge_f1 is None
    row = report.flat_row()
    assert row["dice_mean"] is None


def test_dice_never_below_iou(rng):
    for _ in range(10):
        pred = Segmentation(labels=rng.integers(0, 4, size=(6, 5, 4)))
        ref = Segmentation(labels=rng.integers(0, 4, size=(6, 5, 4)))
        dice, iou = dice_iou(pred, ref)
        assert all(dice[name] >= iou[name] for name in dice)
