import numpy as np
import pytest

from app.modules.contrast import (
    brute_force_m,
    build_contrast_system,
    contrast_residual,
    estimate_m,
    estimate_snr,
    masks_from_boxes,
    measure_contrast,
    objective,
    rois_from_segmentation,
)
from app.modules.exceptions import ArgumentError, DegenerateInputError
from app.modules.forward_model import downsample_segmentation, simulate_ulf
from app.modules.models import ContrastTriple, ForwardConfig, Segmentation, SnrTriple, SolverConfig, Volume


def _box_volume():
    data = np.zeros((8, 8, 8))
    data[0:2] = np.where(np.indices((2, 8, 8)).sum(axis=0) % 2 == 0, 0.1, -0.1)
    data[2:4] = 0.8
    data[4:6] = 0.5
    data[6:8] = 0.2
    masks = masks_from_boxes(
        {
            "background": [0, 2, 0, 8, 0, 8],
            "wm": [2, 4, 0, 8, 0, 8],
            "gm": [4, 6, 0, 8, 0, 8],
            "csf": [6, 8, 0, 8, 0, 8],
        },
        (8, 8, 8),
    )
    return Volume(data=data), masks


def test_estimate_snr_uses_population_std_and_rayleigh_factor():
    volume, masks = _box_volume()
    snr = estimate_snr(volume, {t: masks[t] for t in ("wm", "gm", "csf")}, masks["background"])
    assert snr.snr_wm == pytest.approx(0.8 / (0.1 * 1.53), rel=1e-6)
    assert snr.snr_gm == pytest.approx(0.5 / (0.1 * 1.53), rel=1e-6)
    assert snr.snr_csf == pytest.approx(0.2 / (0.1 * 1.53), rel=1e-6)
    assert snr.is_t1_ordered


def test_estimate_snr_errors():
    volume, masks = _box_volume()
    rois = {t: masks[t] for t in ("wm", "gm", "csf")}
    with pytest.raises(ArgumentError):
        estimate_snr(volume, {**rois, "wm": np.zeros((8, 8, 8), dtype=bool)}, masks["background"])
    single = np.zeros((8, 8, 8), dtype=bool)
    single[0, 0, 0] = True
    with pytest.raises(ArgumentError):
        estimate_snr(volume, rois, single)
    flat = Volume(data=np.where(masks["background"], 0.0, volume.data))
    with pytest.raises(DegenerateInputError):
        estimate_snr(flat, rois, masks["background"])


def test_contrast_system_rows_are_dependent():
    system = build_contrast_system(SnrTriple(snr_wm=10.0, snr_gm=7.0, snr_csf=3.0))
    np.testing.assert_allclose(system[0], system[1] + system[2])
    assert abs(np.linalg.det(system)) < 1e-9


def test_consistent_target_recovers_lattice_point_without_regularization():
    snr = SnrTriple(snr_wm=30.0, snr_gm=20.0, snr_csf=8.0)
    m_true = np.array([0.6, 0.45, 0.3])
    target = build_contrast_system(snr) @ m_true
    m, value = estimate_m(snr, ContrastTriple(c_wc=target[0], c_wg=target[1], c_gc=target[2]), SolverConfig(epsilon=0.0))
    # the system has a one-dimensional null space; check the contrast is reproduced exactly
    achieved = build_contrast_system(snr) @ m.as_array()
    np.testing.assert_allclose(achieved, target, atol=1e-9)
    assert value == pytest.approx(0.0, abs=1e-12)


def test_all_ones_target_is_reproduced_with_smaller_norm():
    snr = SnrTriple(snr_wm=12.0, snr_gm=9.0, snr_csf=4.0)
    system = build_contrast_system(snr)
    target = system @ np.ones(3)
    m, _ = estimate_m(snr, ContrastTriple(c_wc=target[0], c_wg=target[1], c_gc=target[2]))
    # moving along the null direction is free, so the penalty selects a shorter m
    assert np.linalg.norm(system @ m.as_array() - target) < 0.05 * np.linalg.norm(target)
    assert np.linalg.norm(m.as_array()) < np.linalg.norm(np.ones(3))


def test_zero_target_gives_zero_m():
    m, value = estimate_m(SnrTriple(snr_wm=10.0, snr_gm=5.0, snr_csf=2.0), ContrastTriple(c_wc=0.0, c_wg=0.0, c_gc=0.0))
    assert m.as_array().tolist() == [0.0, 0.0, 0.0]
    assert value == 0.0


def test_unreachable_target_saturates_at_upper_bound():
    snr = SnrTriple(snr_wm=2.0, snr_gm=1.5, snr_csf=1.0)
    m, _ = estimate_m(snr, ContrastTriple(c_wc=1000.0, c_wg=1000.0, c_gc=1000.0), SolverConfig(grid_step=0.01))
    assert m.m_wm == 1.0


def test_solution_stays_inside_bounds(rng):
    for _ in range(5):
        snr = SnrTriple(snr_wm=rng.uniform(10, 40), snr_gm=rng.uniform(5, 20), snr_csf=rng.uniform(1, 8))
        target = ContrastTriple(c_wc=rng.uniform(-50, 50), c_wg=rng.uniform(-50, 50), c_gc=rng.uniform(-50, 50))
        m, _ = estimate_m(snr, target, SolverConfig(grid_step=0.01))
        assert np.all((m.as_array() >= 0.0) & (m.as_array() <= 1.0))


def _oracle_instances(rng, count, grid_step):
    config_values = []
    for _ in range(count):
        snr = SnrTriple(snr_wm=rng.uniform(10, 60), snr_gm=rng.uniform(5, 40), snr_csf=rng.uniform(1, 20))
        target = ContrastTriple(c_wc=rng.uniform(0, 60), c_wg=rng.uniform(0, 30), c_gc=rng.uniform(0, 40))
        config = SolverConfig(epsilon=float(rng.choice([0.0, 1e-3, 1e-1])), grid_step=grid_step)
        config_values.append((snr, target, config))
    return config_values


def test_row_search_matches_brute_force_oracle(rng):
    for snr, target, config in _oracle_instances(rng, 20, 0.005):
        fast, fast_value = estimate_m(snr, target, config)
        oracle, oracle_value = brute_force_m(snr, target, config)
        assert fast_value == oracle_value
        assert fast == oracle


@pytest.mark.slow
def test_row_search_matches_brute_force_at_production_step(rng):
    for snr, target, config in _oracle_instances(rng, 20, 0.001):
        fast, fast_value = estimate_m(snr, target, config)
        oracle, oracle_value = brute_force_m(snr, target, config)
        assert fast_value == oracle_value
        assert fast == oracle


@pytest.mark.parametrize("scale", [0.3, 1.0, 3.0, 7.0])
def test_exact_ties_resolve_to_lexicographically_first_point(scale):
    # (0.6, 0.45, 0.3) and its shifts along the null direction by multiples of 1.2 / (30, 20, 8) all fit exactly
    base = SnrTriple(snr_wm=30.0, snr_gm=20.0, snr_csf=8.0)
    target = build_contrast_system(base) @ np.array([0.6, 0.45, 0.3])
    snr = SnrTriple(snr_wm=30.0 * scale, snr_gm=20.0 * scale, snr_csf=8.0 * scale)
    contrast = ContrastTriple(c_wc=target[0] * scale, c_wg=target[1] * scale, c_gc=target[2] * scale)
    config = SolverConfig(epsilon=0.0, grid_step=0.01)

    m, _ = estimate_m(snr, contrast, config)
    np.testing.assert_allclose(m.as_array(), [0.52, 0.33, 0.0], atol=1e-12)
    oracle, _ = brute_force_m(snr, contrast, config)
    assert oracle == m


def test_regularization_never_lengthens_m(rng):
    for _ in range(5):
        snr = SnrTriple(snr_wm=rng.uniform(20, 50), snr_gm=rng.uniform(10, 30), snr_csf=rng.uniform(2, 10))
        target = ContrastTriple(c_wc=rng.uniform(0, 40), c_wg=rng.uniform(0, 20), c_gc=rng.uniform(0, 30))
        norms = []
        for epsilon in (0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0):
            m, _ = estimate_m(snr, target, SolverConfig(epsilon=epsilon, grid_step=0.01))
            norms.append(float(np.linalg.norm(m.as_array())))
        assert all(later <= earlier + 1e-12 for earlier, later in zip(norms, norms[1:]))


def test_snr_ignores_global_intensity_scaling():
    volume, masks = _box_volume()
    rois = {t: masks[t] for t in ("wm", "gm", "csf")}
    reference = estimate_snr(volume, rois, masks["background"])
    for factor in (0.01, 3.7, 250.0):
        scaled = estimate_snr(Volume(data=volume.data * factor), rois, masks["background"])
        np.testing.assert_allclose(scaled.as_array(), reference.as_array(), rtol=1e-9)


@pytest.mark.slow
def test_row_search_matches_brute_force_on_fine_lattice(rng):
    snr = SnrTriple(snr_wm=35.0, snr_gm=22.0, snr_csf=9.0)
    target = ContrastTriple(c_wc=2.0, c_wg=12.0, c_gc=17.0)
    config = SolverConfig()
    fast, fast_value = estimate_m(snr, target, config)
    oracle, oracle_value = brute_force_m(snr, target, config)
    assert fast_value == oracle_value
    assert fast == oracle


def test_objective_matches_matrix_form(rng):
    snr = SnrTriple(snr_wm=20.0, snr_gm=11.0, snr_csf=4.0)
    system = build_contrast_system(snr)
    target = np.array([3.0, 8.0, 2.0])
    m = rng.uniform(0, 1, 3)
    expected = 0.5 * np.sum((system @ m - target) ** 2) + 0.01 * np.sum(m ** 2)
    assert objective(system, target, 0.01, *m) == pytest.approx(expected, rel=1e-12)


def test_contrast_residual():
    assert contrast_residual(ContrastTriple(c_wc=29.0, c_wg=12.0, c_gc=17.0)) == 0.0
    assert contrast_residual(ContrastTriple(c_wc=2.0, c_wg=12.0, c_gc=17.0)) == pytest.approx(27.0)


def test_masks_from_boxes_validation():
    with pytest.raises(ArgumentError):
        masks_from_boxes({"wm": [0, 1, 0, 1]}, (4, 4, 4))
    with pytest.raises(ArgumentError):
        masks_from_boxes({"wm": [5, 6, 0, 1, 0, 1]}, (4, 4, 4))
    masks = masks_from_boxes({"wm": [0, 2, 1, 3, 0, 4]}, (4, 4, 4))
    assert masks["wm"].sum() == 2 * 2 * 4


def test_measure_contrast_on_two_level_volume():
    labels = np.zeros((4, 4, 4), dtype=np.uint8)
    labels[0] = 1
    labels[1] = 2
    labels[2] = 3
    data = np.zeros((4, 4, 4))
    data[0], data[1], data[2] = 0.9, 0.6, 0.3
    contrast = measure_contrast(Volume(data=data), Segmentation(labels=labels), bg_sigma=0.1)
    assert contrast.c_wg == pytest.approx(0.3 / 0.153, rel=1e-5)
    assert contrast.c_wc == pytest.approx(0.6 / 0.153, rel=1e-5)
    assert contrast.residual == pytest.approx(0.0, abs=1e-5)

    with pytest.raises(ArgumentError):
        measure_contrast(Volume(data=data), Segmentation(labels=np.zeros((4, 4, 4), dtype=np.uint8)), 0.1)


def test_forward_model_reaches_scaled_snr_differences(phantom_64):
    hf, seg = phantom_64
    rois, background = rois_from_segmentation(seg, erosion=2)
    snr = estimate_snr(hf, rois, background)
    m, _ = estimate_m(snr, ContrastTriple(c_wc=2.0, c_wg=12.0, c_gc=17.0))

    ulf = simulate_ulf(hf, seg, m, ForwardConfig(noise_rho=0.0, noise_sigma=0.0))
    ulf_seg = downsample_segmentation(seg, 2)
    ulf_rois, _ = rois_from_segmentation(ulf_seg, erosion=1)
    scaled = {t: m.for_tissue(t) * float(hf.data[rois[t]].mean()) for t in ("wm", "gm", "csf")}
    achieved = {t: float(ulf.data[ulf_rois[t]].mean()) for t in ("wm", "gm", "csf")}
    scale = max(scaled.values())
    for tissue in ("wm", "gm", "csf"):
        assert achieved[tissue] == pytest.approx(scaled[tissue], rel=0.05, abs=0.01 * scale)
    for first, second in (("wm", "gm"), ("gm", "csf"), ("wm", "csf")):
        expected = scaled[first] - scaled[second]
        assert achieved[first] - achieved[second] == pytest.approx(expected, abs=0.05 * scale)
