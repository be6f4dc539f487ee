import time
from concurrent.futures import ProcessPoolExecutor
from itertools import product
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from app.modules import contrast, forward_model, metrics, network, repositories, training, volumes
from app.modules.constants import LOSS_HISTORY_COLUMNS, METRIC_COLUMNS, SENSITIVITY_COLUMNS, TUNE_COLUMNS
from app.modules.exceptions import ArgumentError, DegenerateInputError, FieldSynthError, TrainingDivergedError
from app.modules.models import (
    ContrastTriple,
    DegradationVector,
    ForwardConfig,
    PhantomSpec,
    PipelineConfig,
    RunManifest,
    Segmentation,
    SolverConfig,
    TrainConfig,
    Volume,
)
from app.modules.repositories import RunRepository
from logger import logger

SUMMARY_METRICS = ["ssim", "mslc", "wm_gm_contrast", "edge_f1", "dice_mean", "iou_mean"]


def _mean(values: Dict[str, float]) -> float:
    return float(np.mean(list(values.values())))


def _safe_contrast(volume: Volume, seg: Segmentation) -> Optional[float]:
    try:
        return metrics.wm_gm_contrast(volume, seg)
    except DegenerateInputError as error:
        logger.warning("WM-GM contrast undefined: %s", error)
        return None


def ulf_space_scores(
    pred: Volume,
    pred_seg: Segmentation,
    ulf: Volume,
    ulf_seg: Segmentation,
    m: DegradationVector,
    sigma: float,
    df: int,
    floor: Optional[float] = None,
) -> Dict[str, float]:
    """Map a prediction back through the noise-free forward model, lift it by the noise floor and score it."""
    projected = forward_model.simulate_ulf(
        pred,
        pred_seg.hardened(),
        m,
        ForwardConfig(sigma_smooth=sigma, df=df, noise_rho=0.0, noise_sigma=0.0),
    )
    floor = forward_model.noise_floor(ulf, ulf_seg) if floor is None else floor
    projected = projected.with_data(projected.data + floor)
    if projected.dims != ulf.dims:
        raise ArgumentError(f"projected prediction {projected.dims} does not match the ULF grid {ulf.dims}")
    dice, iou = metrics.dice_iou(forward_model.downsample_segmentation(pred_seg, df), ulf_seg)
    scores = {
        "ssim": metrics.ssim(projected, ulf),
        "mslc": metrics.mslc(projected, ulf),
        "dice_mean": _mean(dice),
        "iou_mean": _mean(iou),
    }
    scores["rqs"] = metrics.rqs(scores["ssim"], scores["mslc"], scores["dice_mean"], scores["iou_mean"])
    return scores


def baseline_report(ulf: Volume, ref: Volume, ref_seg: Optional[Segmentation], method: str) -> Dict[str, Optional[float]]:
    factors = [r / u for r, u in zip(ref.dims, ulf.dims)]
    upsampled = volumes.resample(ulf, factors, method)
    return {
        "ssim": metrics.ssim(upsampled, ref),
        "mslc": metrics.mslc(upsampled, ref),
        "wm_gm_contrast": None if ref_seg is None else _safe_contrast(upsampled, ref_seg),
    }


def run_pipeline_cell(cell: dict) -> dict:
    """
    One phantom -> ULF -> INR -> HF run scored against the phantom.

    Args:
        cell: {"cell_id", "seed", "repeat", "config" (PipelineConfig dump)}

    Returns:
        A sensitivity CSV row
    """
    config = PipelineConfig(**cell["config"])
    seed, repeat = cell["seed"], cell["repeat"]
    row = {
        "cell_id": cell["cell_id"],
        "seed": seed,
        "repeat": repeat,
        "c_wc": config.target.c_wc,
        "c_wg": config.target.c_wg,
        "c_gc": config.target.c_gc,
        "noise_rho": config.forward.noise_rho,
        "noise_sigma": config.forward.noise_sigma,
    }
    try:
        df = config.forward.df
        if any(n % df for n in config.phantom.dims) or config.upsample_factor != df:
            raise ArgumentError("pipeline cells need phantom dims divisible by df and upsample == df")

        hf, seg = volumes.make_phantom(config.phantom, seed=config.forward.seed)
        rois, background = contrast.rois_from_segmentation(seg, config.roi_erosion)
        snr = contrast.estimate_snr(hf, rois, background)
        m, _ = contrast.estimate_m(snr, config.target, config.solver)

        forward_config = config.forward.model_copy(update={"seed": config.forward.seed + repeat})
        ulf = forward_model.simulate_ulf(hf, seg, m, forward_config)
        ulf_seg = forward_model.downsample_segmentation(seg, df)

        train_config = TrainConfig.model_validate({**config.train.model_dump(), "seed": seed})
        params, _ = training.train(ulf, ulf_seg, m, train_config)
        spacing, affine = ulf.rescaled_geometry(df)
        pred, pred_seg = network.predict_grid(params, hf.dims, spacing=spacing, affine=affine)

        report = metrics.build_report(pred, hf, pred_seg, seg)
        trilinear = baseline_report(ulf, hf, seg, "trilinear")
        bicubic = baseline_report(ulf, hf, seg, "bicubic")
        row.update({"m_wm": m.m_wm, "m_gm": m.m_gm, "m_csf": m.m_csf})
        row.update({name: value for name, value in report.flat_row().items() if name in SENSITIVITY_COLUMNS})
        row.update(
            {
                "achieved_c_wg": report.wm_gm_contrast,
                "trilinear_ssim": trilinear["ssim"],
                "trilinear_wm_gm_contrast": trilinear["wm_gm_contrast"],
                "bicubic_ssim": bicubic["ssim"],
                "bicubic_wm_gm_contrast": bicubic["wm_gm_contrast"],
                "status": "ok",
            }
        )
    except FieldSynthError as error:
        logger.error("Pipeline cell %s failed: %s", cell["cell_id"], error)
        row["status"] = f"failed: {error}"
    return row


def summarize_sensitivity(rows: List[dict]) -> dict:
    dataframe = pd.DataFrame(rows, columns=SENSITIVITY_COLUMNS)
    succeeded = dataframe[dataframe["status"] == "ok"]
    summary = {"cells": len(dataframe), "succeeded": len(succeeded), "variance": {}, "mean": {}}
    for name in SUMMARY_METRICS:
        values = pd.to_numeric(succeeded[name], errors="coerce").dropna()
        summary["variance"][name] = float(values.var(ddof=0)) if len(values) else None
        summary["mean"][name] = float(values.mean()) if len(values) else None

    pairs = succeeded[["c_wg", "achieved_c_wg"]].apply(pd.to_numeric, errors="coerce").dropna()
    summary["contrast_pairs"] = pairs.values.tolist()
    if pairs["c_wg"].nunique() >= 2:
        fit = stats.linregress(pairs["c_wg"], pairs["achieved_c_wg"])
        summary["contrast_fit"] = {
            "slope": float(fit.slope),
            "intercept": float(fit.intercept),
            "r_squared": float(fit.rvalue ** 2),
        }
    else:
        summary["contrast_fit"] = None

    improvements = []
    for _, row in succeeded.iterrows():
        if pd.notna(row["wm_gm_contrast"]) and pd.notna(row["trilinear_wm_gm_contrast"]):
            try:
                improvements.append(
                    metrics.contrast_improvement(row["wm_gm_contrast"], row["trilinear_wm_gm_contrast"])
                )
            except DegenerateInputError:
                continue
    summary["mean_contrast_improvement"] = float(np.mean(improvements)) if improvements else None
    return summary


class SynthesisService:
    """Runs one CLI command end to end and records its outputs in a manifest."""

    def __init__(self, output_dir, command: str, argv: Optional[Sequence[str]] = None):
        self.repository = RunRepository(output_dir)
        self.command = command
        self.argv = list(argv or [])
        self.started = time.perf_counter()

    def _finish(self, config: dict, inputs: Dict[str, str], seed: Optional[int] = None) -> RunManifest:
        manifest = RunManifest(
            command=self.command,
            argv=self.argv,
            config=config,
            inputs={name: str(path) for name, path in inputs.items() if path is not None},
            seed=seed,
            duration_seconds=time.perf_counter() - self.started,
        )
        return self.repository.finalize(manifest)

    def estimate_contrast(
        self,
        hf_path,
        target: ContrastTriple,
        solver: SolverConfig,
        mask_paths: Optional[Dict[str, str]] = None,
        boxes_path=None,
        seg_path=None,
        roi_erosion: int = 2,
    ) -> dict:
        """
        Estimate tissue SNRs on an HF volume and solve for m.

        Args:
            hf_path: HF volume
            target: desired ULF contrast
            solver: grid-search settings
            mask_paths: {"wm", "gm", "csf", "background"} mask volumes
            boxes_path: JSON box spec, used when no masks are given
            seg_path: label map, used when neither masks nor boxes are given

        Returns:
            {snr, A, m, objective, residual}
        """
        try:
            hf, _ = repositories.load_nifti(hf_path)
            if mask_paths:
                masks = {name: repositories.load_mask(path) for name, path in mask_paths.items()}
            elif boxes_path is not None:
                masks = contrast.masks_from_boxes(repositories.load_json(boxes_path), hf.dims)
            elif seg_path is not None:
                seg, _ = repositories.load_segmentation(seg_path)
                volumes.check_aligned(hf, seg)
                rois, background = contrast.rois_from_segmentation(seg, roi_erosion)
                masks = {**rois, "background": background}
            else:
                raise ArgumentError("ROI masks, a box spec or a segmentation is required")
            if "background" not in masks:
                raise ArgumentError("a background ROI is required")

            snr = contrast.estimate_snr(hf, {t: masks[t] for t in ("wm", "gm", "csf") if t in masks}, masks["background"])
            m, value = contrast.estimate_m(snr, target, solver)
            result = {
                "snr": snr.model_dump(),
                "A": contrast.build_contrast_system(snr).tolist(),
                "m": m.model_dump(),
                "objective": value,
                "target": target.model_dump(),
                "residual": contrast.contrast_residual(target),
            }
            self.repository.write_json("contrast", result)
            self._finish(
                {"target": target.model_dump(), "solver": solver.model_dump(), "roi_erosion": roi_erosion},
                {"hf": hf_path, "boxes": boxes_path, "seg": seg_path, **(mask_paths or {})},
            )
            return result
        except Exception as error:
            logger.error("Error estimating contrast for %s: %s", hf_path, error)
            raise

    def simulate(self, hf_path, seg_path, m: DegradationVector, config: ForwardConfig) -> Volume:
        try:
            hf, _ = repositories.load_nifti(hf_path)
            seg, _ = repositories.load_segmentation(seg_path)
            ulf = forward_model.simulate_ulf(hf, seg, m, config)
            self.repository.write_volume("ulf", ulf)
            ulf_seg = forward_model.downsample_segmentation(seg, config.df)
            self.repository.write_segmentation("ulf_seg", ulf_seg, ulf)
            self.repository.write_json(
                "provenance",
                {"m": m.model_dump(), "config": config.model_dump(), "seed": config.seed},
                name="ulf.provenance.json",
            )
            self._finish(
                {"m": m.model_dump(), "forward": config.model_dump()},
                {"hf": hf_path, "seg": seg_path},
                seed=config.seed,
            )
            return ulf
        except Exception as error:
            logger.error("Error simulating ULF volume from %s: %s", hf_path, error)
            raise

    def synthesize(
        self, ulf_path, ulf_seg_path, m: DegradationVector, config: TrainConfig, upsample: Optional[int] = None
    ) -> Tuple[Volume, Segmentation]:
        try:
            ulf, _ = repositories.load_nifti(ulf_path)
            ulf_seg, _ = repositories.load_segmentation(ulf_seg_path)
            volumes.check_aligned(ulf, ulf_seg)
            factor = upsample or config.df
            try:
                params, history = training.train(ulf, ulf_seg, m, config)
            except TrainingDivergedError as error:
                self.repository.write_csv("loss", training.history_rows(error.history), LOSS_HISTORY_COLUMNS)
                self._finish({"train": config.model_dump(), "upsample": factor}, {"ulf": ulf_path}, seed=config.seed)
                raise

            dims = tuple(n * factor for n in ulf.dims)
            spacing, affine = ulf.rescaled_geometry(factor)
            pred, pred_seg = network.predict_grid(params, dims, spacing=spacing, affine=affine)
            self.repository.write_volume("hf_pred", pred)
            self.repository.write_soft_segmentation("hf_seg", pred_seg, pred)
            self.repository.write_checkpoint("inr", params)
            self.repository.write_csv("loss", training.history_rows(history), LOSS_HISTORY_COLUMNS)
            self._finish(
                {"m": m.model_dump(), "train": config.model_dump(), "upsample": factor},
                {"ulf": ulf_path, "ulf_seg": ulf_seg_path},
                seed=config.seed,
            )
            return pred, pred_seg
        except Exception as error:
            logger.error("Error synthesizing HF volume from %s: %s", ulf_path, error)
            raise

    def evaluate(
        self,
        pred_path,
        ref_path,
        pred_seg_path=None,
        ref_seg_path=None,
        ulf_path=None,
        ulf_seg_path=None,
        m: Optional[DegradationVector] = None,
        sigma: float = 0.5,
    ) -> dict:
        """Metric panel of a prediction against a reference, plus interpolation baselines when the ULF input is known."""
        try:
            pred, _ = repositories.load_nifti(pred_path)
            ref, _ = repositories.load_nifti(ref_path)
            pred_seg = repositories.load_segmentation(pred_seg_path)[0] if pred_seg_path else None
            ref_seg = repositories.load_segmentation(ref_seg_path)[0] if ref_seg_path else None
            report = metrics.build_report(pred, ref, pred_seg, ref_seg)
            result = {"prediction": report.model_dump()}
            rows = [{"source": "prediction", **report.flat_row()}]

            if ulf_path:
                ulf, _ = repositories.load_nifti(ulf_path)
                for method in ("trilinear", "bicubic"):
                    result[method] = baseline_report(ulf, ref, ref_seg, method)
                    rows.append({"source": method, **result[method]})
                if ulf_seg_path and m is not None and pred_seg is not None:
                    ulf_seg, _ = repositories.load_segmentation(ulf_seg_path)
                    df = int(round(pred.dims[0] / ulf.dims[0]))
                    result["ulf_space"] = ulf_space_scores(pred, pred_seg, ulf, ulf_seg, m, sigma, df)

            self.repository.write_json("metrics", result)
            self.repository.write_csv("metrics", rows, ["source"] + METRIC_COLUMNS)
            self._finish(
                {"m": None if m is None else m.model_dump(), "sigma": sigma},
                {
                    "pred": pred_path,
                    "ref": ref_path,
                    "pred_seg": pred_seg_path,
                    "ref_seg": ref_seg_path,
                    "ulf": ulf_path,
                    "ulf_seg": ulf_seg_path,
                },
            )
            return result
        except Exception as error:
            logger.error("Error evaluating %s against %s: %s", pred_path, ref_path, error)
            raise

    def make_phantom(self, spec: PhantomSpec, seed: int) -> Tuple[Volume, Segmentation]:
        hf, seg = volumes.make_phantom(spec, seed)
        self.repository.write_volume("hf", hf)
        self.repository.write_segmentation("seg", seg, hf)
        self.repository.write_json("phantom", spec.model_dump())
        self._finish({"phantom": spec.model_dump()}, {}, seed=seed)
        return hf, seg

    def sensitivity(
        self,
        config: PipelineConfig,
        seeds: Sequence[int],
        repeats: int = 1,
        targets: Optional[Sequence[ContrastTriple]] = None,
        noise_pairs: Optional[Sequence[Tuple[float, float]]] = None,
        parallel: int = 0,
    ) -> dict:
        """
        Full pipeline over targets x noise levels x seeds x repeats.

        Returns:
            The summary; raises FieldSynthError when every cell fails
        """
        targets = list(targets or [config.target])
        noise_pairs = list(noise_pairs or [(config.forward.noise_rho, config.forward.noise_sigma)])
        cells = []
        for target, (rho, sigma_r), seed, repeat in product(targets, noise_pairs, seeds, range(repeats)):
            cell_config = config.model_copy(
                update={
                    "target": target,
                    "forward": config.forward.model_copy(update={"noise_rho": rho, "noise_sigma": sigma_r}),
                }
            )
            cells.append({"cell_id": len(cells), "seed": seed, "repeat": repeat, "config": cell_config.model_dump()})
        logger.info("Running sensitivity sweep with %d cells (parallel=%s)", len(cells), parallel)

        if parallel and parallel > 1:
            with ProcessPoolExecutor(max_workers=parallel) as executor:
                rows = list(executor.map(run_pipeline_cell, cells))
        else:
            rows = [run_pipeline_cell(cell) for cell in cells]

        summary = summarize_sensitivity(rows)
        self.repository.write_csv("sensitivity", rows, SENSITIVITY_COLUMNS)
        self.repository.write_json("summary", summary)
        self._finish(
            {
                "pipeline": config.model_dump(),
                "seeds": list(seeds),
                "repeats": repeats,
                "targets": [t.model_dump() for t in targets],
                "noise_pairs": [list(p) for p in noise_pairs],
            },
            {},
        )
        if summary["succeeded"] == 0:
            raise FieldSynthError("every sensitivity cell failed")
        return summary

    def tune(
        self,
        config: PipelineConfig,
        grid: Dict[str, Sequence[float]],
        iterations: Optional[int] = None,
        observation: Optional[Tuple[Volume, Segmentation, DegradationVector]] = None,
    ) -> dict:
        """Loss-weight grid search ranked by ULF-space RQS; writes the ranking CSV and the best config."""
        try:
            if observation is None:
                df = config.forward.df
                hf, seg = volumes.make_phantom(config.phantom, seed=config.forward.seed)
                rois, background = contrast.rois_from_segmentation(seg, config.roi_erosion)
                m, _ = contrast.estimate_m(contrast.estimate_snr(hf, rois, background), config.target, config.solver)
                ulf = forward_model.simulate_ulf(hf, seg, m, config.forward)
                ulf_seg = forward_model.downsample_segmentation(seg, df)
            else:
                ulf, ulf_seg, m = observation
            volumes.check_aligned(ulf, ulf_seg)

            weights = {name: list(grid.get(name, [getattr(config.train, name)])) for name in ("l1", "l2", "l3", "l4")}
            budget = {"iterations": iterations} if iterations else {}
            base = config.train.model_dump()
            cells = [
                (values, TrainConfig.model_validate({**base, **dict(zip(weights, values)), **budget}))
                for values in product(*weights.values())
            ]
            rows = []
            for cell_id, (values, train_config) in enumerate(cells):
                row = {"cell_id": cell_id, **dict(zip(weights.keys(), values))}
                try:
                    params, _ = training.train(ulf, ulf_seg, m, train_config)
                    dims = tuple(n * train_config.df for n in ulf.dims)
                    pred, pred_seg = network.predict_grid(params, dims)
                    row.update(
                        ulf_space_scores(
                            pred,
                            pred_seg,
                            ulf,
                            ulf_seg,
                            m,
                            train_config.sigma_smooth,
                            train_config.df,
                            train_config.noise_floor,
                        )
                    )
                    row["status"] = "ok"
                except FieldSynthError as error:
                    logger.error("Tuning cell %s failed: %s", cell_id, error)
                    row["status"] = f"failed: {error}"
                rows.append(row)

            ranked = sorted(rows, key=lambda r: (r["status"] != "ok", -(r.get("rqs") or 0.0), r["cell_id"]))
            self.repository.write_csv("tune", ranked, TUNE_COLUMNS)
            best = ranked[0]
            if best["status"] != "ok":
                raise FieldSynthError("every tuning cell failed")
            best_config = config.model_copy(
                update={
                    "train": TrainConfig.model_validate(
                        {**config.train.model_dump(), **{k: best[k] for k in ("l1", "l2", "l3", "l4")}}
                    )
                }
            )
            self.repository.write_json("best_config", best_config.model_dump())
            self._finish({"pipeline": config.model_dump(), "grid": weights, "iterations": iterations}, {})
            logger.info("Best loss weights %s with RQS %s", {k: best[k] for k in weights}, best["rqs"])
            return {"best": best, "rows": ranked}
        except Exception as error:
            logger.error("Error tuning loss weights: %s", error)
            raise
