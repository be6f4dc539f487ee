"""Command-line front end: `python main.py <subcommand> [options]`."""
import argparse
import json
import sys
from typing import List, Optional, Sequence

import pandas as pd
from pydantic import BaseModel, ValidationError

from app.modules import repositories
from app.modules.constants import EXIT_CODES
from app.modules.exceptions import ArgumentError, FieldSynthError
from app.modules.models import (
    ContrastTriple,
    DegradationVector,
    ForwardConfig,
    PhantomSpec,
    PipelineConfig,
    SolverConfig,
    TrainConfig,
)
from app.modules.services import SynthesisService
from config import settings
from logger import logger


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as error:
        raise ArgumentError(f"expected comma-separated numbers, got {text!r}") from error


def _ints(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as error:
        raise ArgumentError(f"expected comma-separated integers, got {text!r}") from error


def _resolve(model: type, base: Optional[dict], overrides: dict) -> BaseModel:
    """Flags override the JSON section, which overrides the model defaults."""
    fields = dict(base or {})
    fields.update({name: value for name, value in overrides.items() if value is not None})
    return model(**fields)


def _config_file(args) -> dict:
    return repositories.load_json(args.config) if getattr(args, "config", None) else {}


def _degradation(args, config: dict) -> DegradationVector:
    if args.m:
        return DegradationVector.parse(args.m)
    if args.m_json:
        payload = repositories.load_json(args.m_json)
        return DegradationVector(**payload.get("m", payload))
    if "m" in config:
        return DegradationVector(**config["m"])
    raise ArgumentError("a degradation vector is required (--m or --m-json)")


def _emit(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def cmd_estimate_contrast(args, argv) -> int:
    config = _config_file(args)
    target = ContrastTriple.parse(args.target) if args.target else ContrastTriple(**config.get("target", {"c_wc": 2.0, "c_wg": 12.0, "c_gc": 17.0}))
    solver = _resolve(
        SolverConfig,
        config.get("solver"),
        {"epsilon": args.epsilon, "grid_step": args.grid_step},
    )
    masks = {"wm": args.wm_mask, "gm": args.gm_mask, "csf": args.csf_mask, "background": args.bg_mask}
    masks = {name: path for name, path in masks.items() if path}
    service = SynthesisService(args.output_dir, "estimate-contrast", argv)
    result = service.estimate_contrast(
        args.hf,
        target,
        solver,
        mask_paths=masks or None,
        boxes_path=args.boxes,
        seg_path=args.seg,
        roi_erosion=args.roi_erosion if args.roi_erosion is not None else config.get("roi_erosion", 2),
    )
    _emit(result)
    return EXIT_CODES["success"]


def cmd_simulate_ulf(args, argv) -> int:
    config = _config_file(args)
    m = _degradation(args, config)
    forward = _resolve(
        ForwardConfig,
        config.get("forward"),
        {
            "sigma_smooth": args.sigma,
            "df": args.df,
            "noise_rho": args.rho,
            "noise_sigma": args.noise_sigma,
            "seed": args.seed,
        },
    )
    ulf = SynthesisService(args.output_dir, "simulate-ulf", argv).simulate(args.hf, args.seg, m, forward)
    _emit({"dims": ulf.dims, "spacing": ulf.spacing, "m": m.model_dump()})
    return EXIT_CODES["success"]


def _train_config(args, config: dict) -> TrainConfig:
    return _resolve(
        TrainConfig,
        config.get("train"),
        {
            "iterations": args.iterations,
            "learning_rate": args.lr,
            "patch_size": args.patch_size,
            "batch_patches": args.batch_patches,
            "seed": args.seed,
            "df": args.df,
            "sigma_smooth": args.sigma,
            "l1": args.l1,
            "l2": args.l2,
            "l3": args.l3,
            "l4": args.l4,
            "dtype": args.dtype,
        },
    )


def cmd_synthesize_hf(args, argv) -> int:
    config = _config_file(args)
    m = _degradation(args, config)
    train_config = _train_config(args, config)
    upsample = args.upsample or config.get("upsample")
    pred, _ = SynthesisService(args.output_dir, "synthesize-hf", argv).synthesize(
        args.ulf, args.ulf_seg, m, train_config, upsample
    )
    _emit({"dims": pred.dims, "spacing": pred.spacing})
    return EXIT_CODES["success"]


def cmd_evaluate(args, argv) -> int:
    m = DegradationVector.parse(args.m) if args.m else None
    result = SynthesisService(args.output_dir, "evaluate", argv).evaluate(
        args.pred,
        args.ref,
        pred_seg_path=args.pred_seg,
        ref_seg_path=args.ref_seg,
        ulf_path=args.ulf,
        ulf_seg_path=args.ulf_seg,
        m=m,
        sigma=args.sigma,
    )
    table = {"prediction": {k: v for k, v in result["prediction"].items() if not isinstance(v, dict)}}
    for method in ("trilinear", "bicubic"):
        if method in result:
            table[method] = result[method]
    print(pd.DataFrame(table).T.to_string())
    return EXIT_CODES["success"]


def _pipeline_config(args) -> PipelineConfig:
    config = PipelineConfig(**_config_file(args))
    if getattr(args, "iterations", None):
        config = PipelineConfig(**{**config.model_dump(), "train": {**config.train.model_dump(), "iterations": args.iterations}})
    return config


def cmd_sensitivity(args, argv) -> int:
    config = _pipeline_config(args)
    targets = None
    if args.targets:
        targets = [ContrastTriple.parse(t) for t in args.targets.split(";") if t.strip()]
    elif args.c_wg:
        c_gc = config.target.c_gc
        targets = [ContrastTriple(c_wc=c_wg + c_gc, c_wg=c_wg, c_gc=c_gc) for c_wg in _floats(args.c_wg)]
    noise_pairs = None
    if args.noise:
        noise_pairs = []
        for pair in args.noise.split(";"):
            values = _floats(pair)
            if len(values) != 2:
                raise ArgumentError(f"noise pairs are 'rho,sigma', got {pair!r}")
            noise_pairs.append(tuple(values))
    summary = SynthesisService(args.output_dir, "sensitivity", argv).sensitivity(
        config,
        seeds=_ints(args.seeds),
        repeats=args.repeats,
        targets=targets,
        noise_pairs=noise_pairs,
        parallel=args.parallel,
    )
    _emit(summary)
    return EXIT_CODES["success"]


def cmd_make_phantom(args, argv) -> int:
    config = _config_file(args)
    dims = tuple(_ints(args.dims)) if args.dims else tuple(config.get("dims", (64, 64, 64)))
    if len(dims) != 3:
        raise ArgumentError(f"--dims needs three values, got {dims}")
    overrides = {
        "background": args.background,
        "background_noise_std": args.background_noise_std,
        "tissue_noise_std": args.tissue_noise_std,
    }
    fields = {k: v for k, v in config.items() if k != "dims"}
    fields.update({k: v for k, v in overrides.items() if v is not None})
    spec = PhantomSpec(**{**fields, "dims": dims}) if "csf_radii" in config else PhantomSpec.for_dims(dims, **fields)
    hf, _ = SynthesisService(args.output_dir, "make-phantom", argv).make_phantom(spec, args.seed)
    _emit({"dims": hf.dims, "spec": spec.model_dump()})
    return EXIT_CODES["success"]


def cmd_tune(args, argv) -> int:
    config = _pipeline_config(args)
    grid = {name: _floats(getattr(args, name)) for name in ("l1", "l2", "l3", "l4") if getattr(args, name)}
    observation = None
    if args.ulf:
        if not (args.ulf_seg and args.m):
            raise ArgumentError("--ulf needs --ulf-seg and --m")
        ulf, _ = repositories.load_nifti(args.ulf)
        ulf_seg, _ = repositories.load_segmentation(args.ulf_seg)
        observation = (ulf, ulf_seg, DegradationVector.parse(args.m))
    result = SynthesisService(args.output_dir, "tune", argv).tune(config, grid, observation=observation)
    print(pd.DataFrame(result["rows"]).to_string(index=False))
    return EXIT_CODES["success"]


def cmd_replay(args, argv) -> int:
    manifest = repositories.load_json(args.manifest)
    recorded = list(manifest.get("argv", []))
    if not recorded:
        raise ArgumentError(f"manifest {args.manifest} has no recorded arguments")
    if recorded[0] == "replay":
        raise ArgumentError("cannot replay a replay manifest")
    if args.output_dir:
        recorded = _replace_output_dir(recorded, args.output_dir)
    logger.info("Replaying %s", " ".join(recorded))
    return main(recorded)


def _replace_output_dir(argv: List[str], output_dir: str) -> List[str]:
    result, skip = [], False
    for token in argv:
        if skip:
            skip = False
            continue
        if token == "--output-dir":
            skip = True
            continue
        if token.startswith("--output-dir="):
            continue
        result.append(token)
    return result[:1] + ["--output-dir", output_dir] + result[1:]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="field-synth", description="Bidirectional HF <-> ULF MRI synthesis")
    commands = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler, help_text: str, with_config: bool = True) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.set_defaults(handler=handler)
        sub.add_argument("--output-dir", default=settings.output_dir)
        if with_config:
            sub.add_argument("--config", help="JSON config; command-line flags take precedence")
        return sub

    sub = add("estimate-contrast", cmd_estimate_contrast, "estimate tissue SNR and solve for m")
    sub.add_argument("--hf", required=True)
    sub.add_argument("--target", help="c_wc,c_wg,c_gc")
    for name in ("wm", "gm", "csf", "bg"):
        sub.add_argument(f"--{name}-mask")
    sub.add_argument("--boxes", help="JSON {tissue: [x0, x1, y0, y1, z0, z1]}")
    sub.add_argument("--seg", help="label map used to derive ROIs")
    sub.add_argument("--roi-erosion", type=int)
    sub.add_argument("--epsilon", type=float)
    sub.add_argument("--grid-step", type=float)

    sub = add("simulate-ulf", cmd_simulate_ulf, "degrade an HF volume into a ULF-like one")
    sub.add_argument("--hf", required=True)
    sub.add_argument("--seg", required=True)
    sub.add_argument("--m", help="m_wm,m_gm,m_csf")
    sub.add_argument("--m-json", help="JSON with an 'm' entry (estimate-contrast output)")
    sub.add_argument("--sigma", type=float)
    sub.add_argument("--df", type=int)
    sub.add_argument("--rho", type=float)
    sub.add_argument("--noise-sigma", type=float)
    sub.add_argument("--seed", type=int)

    sub = add("synthesize-hf", cmd_synthesize_hf, "train the INR on a ULF volume and predict HF")
    sub.add_argument("--ulf", required=True)
    sub.add_argument("--ulf-seg", required=True)
    sub.add_argument("--m")
    sub.add_argument("--m-json")
    sub.add_argument("--upsample", type=int)
    sub.add_argument("--iterations", type=int)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--patch-size", type=int)
    sub.add_argument("--batch-patches", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--df", type=int)
    sub.add_argument("--sigma", type=float)
    for name in ("l1", "l2", "l3", "l4"):
        sub.add_argument(f"--{name}", type=float)
    sub.add_argument("--dtype", choices=["float32", "float64"])

    sub = add("evaluate", cmd_evaluate, "compare a prediction with a reference volume", with_config=False)
    sub.add_argument("--pred", required=True)
    sub.add_argument("--ref", required=True)
    sub.add_argument("--pred-seg")
    sub.add_argument("--ref-seg")
    sub.add_argument("--ulf", help="observed ULF volume; adds interpolation baselines")
    sub.add_argument("--ulf-seg")
    sub.add_argument("--m")
    sub.add_argument("--sigma", type=float, default=0.5)

    sub = add("sensitivity", cmd_sensitivity, "pipeline sweeps over seeds, target contrasts and noise")
    sub.add_argument("--seeds", default="0")
    sub.add_argument("--repeats", type=int, default=1)
    sub.add_argument("--targets", help="';'-separated c_wc,c_wg,c_gc triples")
    sub.add_argument("--c-wg", help="comma-separated c_wg values; c_gc fixed, c_wc = c_wg + c_gc")
    sub.add_argument("--noise", help="';'-separated rho,sigma pairs")
    sub.add_argument("--iterations", type=int)
    sub.add_argument("--parallel", type=int, default=0)

    sub = add("make-phantom", cmd_make_phantom, "write a nested-ellipsoid phantom and its labels")
    sub.add_argument("--dims")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--background", type=float)
    sub.add_argument("--background-noise-std", type=float)
    sub.add_argument("--tissue-noise-std", type=float)

    sub = add("tune", cmd_tune, "grid search over loss weights scored by ULF-space RQS")
    for name in ("l1", "l2", "l3", "l4"):
        sub.add_argument(f"--{name}", help="comma-separated values")
    sub.add_argument("--iterations", type=int)
    sub.add_argument("--ulf")
    sub.add_argument("--ulf-seg")
    sub.add_argument("--m")

    sub = commands.add_parser("replay", help="re-run the command recorded in a manifest")
    sub.set_defaults(handler=cmd_replay)
    sub.add_argument("manifest")
    sub.add_argument("--output-dir")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args, argv)
    except (ArgumentError, FileNotFoundError, ValidationError) as error:
        logger.error("%s failed: %s", args.command, error)
        print(f"error: {error}", file=sys.stderr)
        return EXIT_CODES["bad_input"]
    except FieldSynthError as error:
        logger.error("%s failed: %s", args.command, error)
        print(f"error: {error}", file=sys.stderr)
        return EXIT_CODES["runtime_failure"]
