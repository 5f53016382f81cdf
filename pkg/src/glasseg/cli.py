"""Command-line entry point.

Subcommands: ``generate`` (synthetic datasets), ``train``, ``eval``,
``bench`` (inference speed), ``ablate`` (train + evaluate several variants).
One JSON config file drives everything; flags override config keys.  Exit
codes: 0 success, 1 completed with warnings, 2 config/validation error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .backbones import snapshot_params
from .config import (ConfigError, ExperimentConfig, build_model_from_config,
                     config_to_json, load_config)
from .data import (DirectoryDataset, SceneSpec, SyntheticGlassDataset,
                   generate_scene, render_rgb, save_sample_png)
from .decoder import binarize
from .metrics import calibration_curve, evaluate_dataset, render_overlay
from .model import VARIANTS
from .rng import derive_seed
from .train import (benchmark_speed, checkpoint_hash, count_params,
                    load_checkpoint, save_checkpoint, train, tune_runtime)

EXIT_OK = 0
EXIT_WARNING = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class CliError(RuntimeError):
    def __init__(self, message, code=EXIT_RUNTIME):
        super().__init__(message)
        self.code = code


def _norm(cfg: ExperimentConfig):
    return (cfg.data.normalization_mean, cfg.data.normalization_std)


def _out_dir(cfg: ExperimentConfig, override=None) -> Path:
    out = Path(override or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stamp(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed,
            "variant": cfg.variant}


def _dataset(cfg: ExperimentConfig, path: str, count: int = None, split_seed: int = 0):
    """Directory dataset when a path is given, otherwise synthetic on the fly."""
    if path:
        return DirectoryDataset(path, normalization=_norm(cfg))
    if count is None:
        raise CliError("no dataset directory configured and no synthetic count "
                       "given", EXIT_CONFIG)
    scene = replace(cfg.data.scene, canvas_size=cfg.data.image_side)
    return SyntheticGlassDataset(count, base_seed=derive_seed(cfg.seed, split_seed),
                                 spec=scene, normalization=_norm(cfg))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg, args.out) / args.split
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    scene = replace(cfg.data.scene, canvas_size=cfg.data.image_side)
    split_tag = {"train": 0, "val": 1, "test": 2}.get(args.split, 3)
    base_seed = derive_seed(cfg.seed, split_tag)
    entries = []
    for i in range(args.count):
        seed = derive_seed(base_seed, i)
        sample = generate_scene(replace(scene, seed=seed), normalization=_norm(cfg))
        sid = f"{i:05d}"
        save_sample_png(sample, out / "images" / f"{sid}.png",
                        out / "masks" / f"{sid}.png", normalization=_norm(cfg))
        entries.append({"id": sid, "seed": seed})
    manifest = {**_stamp(cfg), "split": args.split, "count": args.count,
                "scene": {k: list(v) if isinstance(v, tuple) else v
                          for k, v in vars(scene).items() if k != "seed"},
                "samples": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {args.count} samples to {out}")
    if args.count == 0:
        print("warning: generated an empty dataset", file=sys.stderr)
        return EXIT_WARNING
    return EXIT_OK


def _model_arrays(model):
    return {f"model.{k}": v for k, v in snapshot_params(model).items()}


def cmd_train(cfg: ExperimentConfig, args) -> int:
    from .train import AdamW

    out = _out_dir(cfg, args.out)
    train_set = _dataset(cfg, cfg.data.train_dir, count=args.train_count,
                         split_seed=0)
    val_set = _dataset(cfg, cfg.data.val_dir, count=args.val_count, split_seed=1)
    model = build_model_from_config(cfg)
    optimizer = AdamW(model.trainable_parameters(), lr=cfg.train.base_lr,
                      weight_decay=cfg.train.weight_decay)

    start_step = 0
    if getattr(args, "resume", None):
        arrays, manifest = load_checkpoint(args.resume)
        if manifest["config_hash"] != cfg.config_hash():
            raise CliError(f"checkpoint {args.resume} was produced by an "
                           f"incompatible config (hash {manifest['config_hash']} "
                           f"vs {cfg.config_hash()})", EXIT_CONFIG)
        model.load_state_dict({k[len("model."):]: v for k, v in arrays.items()
                               if k.startswith("model.")})
        opt_arrays = {k: v for k, v in arrays.items() if k.startswith("opt.")}
        if opt_arrays:
            optimizer.load_state_arrays(opt_arrays, manifest["step"])
        start_step = manifest["step"]

    train_cfg = replace(cfg.train, image_side=cfg.data.image_side)
    history, best = train(model, train_set, val_set, train_cfg,
                          metric_cfg=cfg.metrics, start_step=start_step,
                          optimizer=optimizer,
                          log=lambda msg: print(msg, flush=True))

    history.to_csv(out / "train_history.csv", out / "val_history.csv")
    last_manifest = {**_stamp(cfg), "step": len(history.steps) + start_step,
                     "epoch": cfg.train.epochs - 1, "kind": "last"}
    arrays = _model_arrays(model)
    arrays.update(optimizer.state_arrays())
    save_checkpoint(out / "checkpoint_last.bin", arrays, last_manifest)
    if best is not None:
        best_arrays = {f"model.{k}": v for k, v in best["params"].items()}
        best_manifest = {**_stamp(cfg), "step": best["step"],
                         "epoch": best["epoch"], "metrics": best["metrics"],
                         "kind": "best"}
        save_checkpoint(out / "checkpoint_best.bin", best_arrays, best_manifest)
        (out / "val_report.json").write_text(
            json.dumps({**_stamp(cfg), **best["metrics"]}, indent=2,
                       sort_keys=True))
        print(f"best val IoU {best['metrics']['iou']:.4f} at epoch "
              f"{best['epoch'] + 1}")
    print(f"checkpoints written to {out}")
    return EXIT_OK


def _load_model_for_eval(cfg: ExperimentConfig, checkpoint):
    arrays, manifest = load_checkpoint(checkpoint)
    if manifest["config_hash"] != cfg.config_hash():
        raise CliError(f"checkpoint {checkpoint} config hash "
                       f"{manifest['config_hash']} does not match the current "
                       f"config ({cfg.config_hash()})", EXIT_CONFIG)
    model = build_model_from_config(cfg)
    model.load_state_dict({k[len("model."):]: v for k, v in arrays.items()
                           if k.startswith("model.")})
    return model, manifest


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    tune_runtime()
    out = _out_dir(cfg, args.out)
    model, _ = _load_model_for_eval(cfg, args.checkpoint)
    dataset = _dataset(cfg, args.data_dir or cfg.data.val_dir,
                       count=args.val_count, split_seed=1)
    report = evaluate_dataset(model, dataset, cfg.metrics,
                              side=cfg.data.image_side,
                              native_resolution=args.native_resolution)
    (out / "report.json").write_text(report.to_json(extra=_stamp(cfg)))
    print(f"iou={report.iou:.4f} f_beta={report.f_beta:.4f} "
          f"mae={report.mae:.4f} ber={report.ber:.2f} over {report.n_images} images")

    if args.overlays or args.calibration:
        from .data import resize_pair
        from .metrics import predict_dataset
        confs, gts = [], []
        overlay_dir = out / "overlays"
        if args.overlays:
            overlay_dir.mkdir(exist_ok=True)
        from PIL import Image
        from PIL.PngImagePlugin import PngInfo
        for sample, conf in predict_dataset(model, dataset, cfg.data.image_side):
            confs.append(conf)
            gts.append(sample.mask)
            if args.overlays:
                overlay = render_overlay(
                    render_rgb(sample, _norm(cfg)).astype(np.float64),
                    binarize(conf, cfg.metrics.threshold), sample.mask)
                info = PngInfo()
                info.add_text("config_hash", cfg.config_hash())
                info.add_text("seed", str(cfg.seed))
                Image.fromarray(overlay, "RGB").save(
                    overlay_dir / f"{sample.id}.png", pnginfo=info)
        if args.calibration:
            curve = calibration_curve(confs, gts, n_bins=cfg.metrics.n_bins)
            curve.to_csv(out / "calibration.csv")
            curve.plot(out / "calibration.png")
            print(f"calibration outputs in {out}")
    return EXIT_OK


def cmd_bench(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg, args.out)
    model, _ = _load_model_for_eval(cfg, args.checkpoint)
    report = benchmark_speed(model, n_passes=args.passes,
                             image_side=cfg.data.image_side,
                             warmup=args.warmup, seed=cfg.seed)
    (out / "speed_report.json").write_text(report.to_json(extra=_stamp(cfg)))
    print(f"{report.fps:.2f} fps ({report.mean_latency_s * 1e3:.1f} ms/image, "
          f"{report.n_passes} passes at {report.image_side}px)")
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg, args.out)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = sorted(set(variants) - set(VARIANTS))
    if unknown:
        raise CliError(f"unknown variants: {unknown}", EXIT_CONFIG)
    rows = []
    for variant in variants:
        vcfg = replace(cfg, variant=variant, out_dir=str(out / variant))
        vargs = argparse.Namespace(**{**vars(args), "out": vcfg.out_dir})
        print(f"=== variant {variant} (seed {vcfg.seed}) ===", flush=True)
        rc = cmd_train(vcfg, vargs)
        if rc != EXIT_OK:
            return rc
        report = json.loads((Path(vcfg.out_dir) / "val_report.json").read_text())
        rows.append((variant, report["iou"], report["f_beta"], report["mae"],
                     report["ber"]))
    lines = ["# " + json.dumps(_stamp(cfg), sort_keys=True),
             "variant,iou,f_beta,mae,ber"]
    for row in rows:
        lines.append(f"{row[0]},{row[1]:.6f},{row[2]:.6f},{row[3]:.6f},{row[4]:.4f}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    print(f"ablation table written to {out / 'ablation.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glasseg",
        description="Dual-backbone glass segmentation: data generation, "
                    "training, evaluation, ablations, and speed benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--variant", choices=VARIANTS, help="architecture variant")

    p = sub.add_parser("generate", help="write a synthetic image/mask dataset")
    common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--split", default="train")

    p = sub.add_parser("train", help="train a model per the config protocol")
    common(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--train-count", type=int, default=None,
                   help="synthetic train-set size when no train_dir configured")
    p.add_argument("--val-count", type=int, default=None,
                   help="synthetic val-set size when no val_dir configured")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", help="dataset directory (images/ + masks/)")
    p.add_argument("--val-count", type=int, default=None)
    p.add_argument("--overlays", action="store_true",
                   help="write TP/FP/FN overlay PNGs")
    p.add_argument("--calibration", action="store_true",
                   help="write reliability-curve CSV and plot")
    p.add_argument("--native-resolution", action="store_true",
                   help="score at each sample's original resolution")

    p = sub.add_parser("bench", help="serial inference-speed benchmark")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--passes", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=16)

    p = sub.add_parser("ablate", help="train and evaluate several variants")
    common(p)
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--train-count", type=int, default=None)
    p.add_argument("--val-count", type=int, default=None)

    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "bench": cmd_bench, "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {"seed": args.seed, "variant": getattr(args, "variant", None)}
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
