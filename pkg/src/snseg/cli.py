"""Command-line entry point: the pipeline as subcommands over one config.

All subcommands accept `--config FILE` (a hierarchical JSON tree,
sectioned per module) and per-key flags that override it. Unknown config
keys are rejected with a list, never silently ignored. Every run writes a
`run.json` with the resolved configuration and seed into its output
directory, and all randomness flows from `--seed`, so reruns are
output-identical.

Exit codes: 0 success, 1 validation/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from snseg import lossmetrics, report as report_mod
from snseg.augment import AugmentationConfig, preview as aug_preview
from snseg.core import (
    DEFAULT_CATALOG,
    LabelMask,
    load_image,
    load_manifest,
    load_mask,
    resolve_sample_paths,
    save_mask,
)
from snseg.errors import ValidationError, ConfigError
from snseg.model import (
    BACKBONE_NAMES,
    BackboneSpec,
    SegModelConfig,
    build,
    load_checkpoint,
    predict,
)
from snseg.preprocess import resize_pair
from snseg.quantify import StainConfig, od_csv_row, quantify_sample, write_od_csv, write_overlay
from snseg.synthdata import PhantomSpec, generate_dataset
from snseg.trainer import TrainConfig, run_backbone_sweep, train

log = logging.getLogger("snseg")

# every key the config file may contain, per section
CONFIG_SCHEMA = {
    "seed": None,
    "phantom": (
        "image_size", "n_samples", "nissl_background", "th_stain",
        "snr_intensity", "sncd_intensity", "stain_jitter", "background_noise",
        "center_jitter", "snr_radii", "sncd_radii", "boundary_noise",
        "split_ratios", "hemisphere_loss",
    ),
    "model": ("backbone", "n_classes", "input_size", "decoder_channel_widths",
              "pretrained_weights"),
    "train": ("loss", "optimizer", "learning_rate", "adam_betas", "sgd_momentum",
              "epochs", "batch_size", "plateau_patience", "plateau_factor",
              "min_lr", "early_stop_patience", "improvement_threshold",
              "deterministic"),
    "augment": ("rotation_p", "rotation_max_degrees", "vertical_flip_p",
                "horizontal_flip_p", "random_rot90_p", "transpose_p",
                "elastic_p", "elastic_alpha", "elastic_sigma",
                "gaussian_noise_p", "gaussian_noise_var"),
    "stain": ("blue_norm_threshold", "tissue_intensity_max"),
    "sweep": ("backbones", "image_sizes"),
}


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = []
    for key, value in cfg.items():
        if key not in CONFIG_SCHEMA:
            unknown.append(key)
        elif CONFIG_SCHEMA[key] is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            unknown.extend(f"{key}.{k}" for k in value if k not in CONFIG_SCHEMA[key])
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(unknown)))
    return cfg


def _merge(cfg: dict, section: str, overrides: dict) -> dict:
    merged = dict(cfg.get(section, {}))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _tupled(value, inner=float):
    if value is None:
        return None
    if isinstance(value, str):
        value = [inner(v) for v in value.split(",")]
    return tuple(inner(v) for v in value)


def _phantom_spec(cfg: dict, args) -> PhantomSpec:
    sect = _merge(cfg, "phantom", {
        "image_size": args.size, "n_samples": args.n,
        "hemisphere_loss": getattr(args, "hemisphere_loss", None),
    })
    sect["seed"] = _seed_of(cfg, args)
    for key in ("nissl_background", "th_stain"):
        if key in sect:
            sect[key] = _tupled(sect[key], int)
    for key in ("snr_intensity", "sncd_intensity"):
        if key in sect and isinstance(sect[key], (list, tuple)):
            sect[key] = _tupled(sect[key])
    for key in ("snr_radii", "sncd_radii"):
        if key in sect:
            sect[key] = tuple(tuple(float(x) for x in pair) for pair in sect[key])
    if "split_ratios" in sect:
        sect["split_ratios"] = _tupled(sect["split_ratios"])
    return PhantomSpec(**sect)


def _model_config(cfg: dict, args, seed: int) -> SegModelConfig:
    sect = _merge(cfg, "model", {
        "backbone": getattr(args, "backbone", None),
        "input_size": getattr(args, "input_size", None),
    })
    backbone = BackboneSpec(
        name=sect.get("backbone", "efficientnet-b5"),
        pretrained_weights=sect.get("pretrained_weights"),
    )
    return SegModelConfig(
        backbone=backbone,
        n_classes=int(sect.get("n_classes", 3)),
        input_size=int(sect.get("input_size", 1024)),
        decoder_channel_widths=_tupled(sect.get("decoder_channel_widths"), int),
    )


def _train_config(cfg: dict, args, seed: int) -> TrainConfig:
    sect = _merge(cfg, "train", {
        "loss": getattr(args, "loss", None),
        "optimizer": getattr(args, "optimizer", None),
        "learning_rate": getattr(args, "lr", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
    })
    if "adam_betas" in sect:
        sect["adam_betas"] = _tupled(sect["adam_betas"])
    sect["seed"] = seed
    return TrainConfig(**sect)


def _aug_config(cfg: dict, args, seed: int) -> AugmentationConfig:
    sect = dict(cfg.get("augment", {}))
    if "gaussian_noise_var" in sect:
        sect["gaussian_noise_var"] = _tupled(sect["gaussian_noise_var"])
    sect["seed"] = seed
    config = AugmentationConfig(**sect)
    if getattr(args, "no_augment", False):
        config = AugmentationConfig.disabled(seed=seed)
    elif getattr(args, "no_elastic", False):
        # reproduces the published with/without elastic-transform ablation
        fields = {f"{n}_p": config.probability(n) for n in
                  ("rotation", "vertical_flip", "horizontal_flip",
                   "random_rot90", "transpose", "gaussian_noise")}
        config = AugmentationConfig(
            elastic_p=0.0, rotation_max_degrees=config.rotation_max_degrees,
            elastic_alpha=config.elastic_alpha, elastic_sigma=config.elastic_sigma,
            gaussian_noise_var=config.gaussian_noise_var, seed=seed, **fields)
    return config


def _stain_config(cfg: dict, args) -> StainConfig:
    sect = _merge(cfg, "stain", {
        "blue_norm_threshold": getattr(args, "tau", None),
        "tissue_intensity_max": getattr(args, "tissue_max", None),
    })
    return StainConfig(**sect)


def _seed_of(cfg: dict, args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(cfg.get("seed", 0))


def _write_run_json(out_dir: Path, command: str, seed: int, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "seed": seed, "resolved": resolved}
    (out_dir / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    seed = _seed_of(cfg, args)
    spec = _phantom_spec(cfg, args)
    out = Path(args.out)
    samples = generate_dataset(spec, out)
    _write_run_json(out, "generate", seed, {"phantom": spec.__dict__})
    log.info("wrote %d phantom pairs + manifest to %s", len(samples), out)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = _seed_of(cfg, args)
    model_cfg = _model_config(cfg, args, seed)
    train_cfg = _train_config(cfg, args, seed)
    aug_cfg = _aug_config(cfg, args, seed)
    model = build(model_cfg, seed=seed)
    out = Path(args.out)
    _write_run_json(out, "train", seed, {
        "model": model_cfg.to_json_dict(),
        "train": train_cfg.__dict__ | {"adam_betas": list(train_cfg.adam_betas)},
        "augment": aug_cfg.__dict__ | {"gaussian_noise_var": list(aug_cfg.gaussian_noise_var)},
        "manifest": str(args.manifest),
    })
    state = train(model, args.manifest, train_cfg, aug_cfg, out)
    log.info("training done: %s, best val loss %.6f (epoch %s), checkpoint %s",
             state.stop_reason, state.best_val_loss, state.best_epoch,
             out / (state.best_checkpoint or ""))
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    seed = _seed_of(cfg, args)
    sect = _merge(cfg, "sweep", {
        "backbones": args.backbones.split(",") if args.backbones else None,
        "image_sizes": [int(s) for s in args.image_sizes.split(",")] if args.image_sizes else None,
    })
    backbones = sect.get("backbones") or ["tiny-test"]
    image_sizes = [int(s) for s in sect.get("image_sizes") or [128]]
    train_cfg = _train_config(cfg, args, seed)
    aug_cfg = _aug_config(cfg, args, seed)
    out = Path(args.out)
    _write_run_json(out, "sweep", seed, {"backbones": backbones, "image_sizes": image_sizes})
    report = run_backbone_sweep(args.manifest, backbones, image_sizes, train_cfg,
                                aug_cfg, out)
    for row in report["cells"]:
        log.info("cell %s@%s: %s miou=%s", row["backbone"], row["image_size"],
                 row["status"], row["best_val_miou"])
    return 0


def _load_split(manifest_path: str, split: str):
    samples = [s for s in load_manifest(manifest_path) if s.split == split]
    if not samples:
        raise ValidationError(f"manifest {manifest_path} has no samples in split {split!r}")
    return samples


def cmd_eval(args) -> int:
    seed = _seed_of(load_config(args.config), args)
    model, catalog, _meta = load_checkpoint(args.checkpoint)
    samples = _load_split(args.manifest, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = model.config.input_size
    per_image = {}
    reports = []
    for s in samples:
        img_path, mask_path = resolve_sample_paths(s, args.manifest)
        image, mask = load_image(img_path), load_mask(mask_path)
        if image.height != size or image.width != size:
            image, mask = resize_pair(image, mask, size)
        _, pred = predict(model, image, catalog)
        rep = lossmetrics.evaluate(pred, mask, catalog)
        per_image[s.sample_id] = rep
        reports.append(rep)
    dataset = lossmetrics.dataset_mean(reports)
    doc = {
        "split": args.split,
        "dataset": dataset,
        "per_image": {sid: r.to_json_dict() for sid, r in per_image.items()},
    }
    (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "iou", "dice", "precision", "recall"])
        for sid, r in per_image.items():
            w.writerow([sid] + [_csv_val(r.mean[m]) for m in ("iou", "dice", "precision", "recall")])
        w.writerow(["mean"] + [_csv_val(dataset["mean"][m]) for m in ("iou", "dice", "precision", "recall")])
    _write_run_json(out, "eval", seed, {"checkpoint": str(args.checkpoint), "split": args.split})
    log.info("evaluated %d images: mean iou=%s dice=%s", len(samples),
             dataset["mean"]["iou"], dataset["mean"]["dice"])
    return 0


def _csv_val(v):
    return "" if v is None else repr(float(v))


def cmd_predict(args) -> int:
    seed = _seed_of(load_config(args.config), args)
    model, catalog, _meta = load_checkpoint(args.checkpoint)
    image = load_image(args.image)
    size = model.config.input_size
    if image.height != size or image.width != size:
        blank = LabelMask(np.zeros((image.height, image.width), dtype=np.uint8))
        image, _ = resize_pair(image, blank, size)
    probs, mask = predict(model, image, catalog)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_mask(mask, out / "pred_mask.png")
    np.save(out / "probabilities.npy", probs.data)
    _write_run_json(out, "predict", seed, {"checkpoint": str(args.checkpoint), "image": str(args.image)})
    log.info("wrote %s and probabilities.npy", out / "pred_mask.png")
    return 0


def cmd_quantify(args) -> int:
    cfg = load_config(args.config)
    seed = _seed_of(cfg, args)
    stain = _stain_config(cfg, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    model = None
    if args.mask_source == "model":
        if not args.checkpoint:
            raise ValidationError("--mask-source model requires --checkpoint")
        model, _, _ = load_checkpoint(args.checkpoint)

    if args.manifest:
        samples = _load_split(args.manifest, args.split)
        for s in samples:
            img_path, mask_path = resolve_sample_paths(s, args.manifest)
            image = load_image(img_path)
            if args.mask_source == "model":
                size = model.config.input_size
                if image.height != size or image.width != size:
                    blank = LabelMask(np.zeros((image.height, image.width), dtype=np.uint8))
                    image, _ = resize_pair(image, blank, size)
                _, mask = predict(model, image)
            else:
                mask = load_mask(mask_path)
            for res in quantify_sample(image, mask, config=stain, mask_scale=args.mask_scale):
                rows.append(od_csv_row(s.sample_id, res, args.mask_source))
            if args.overlays:
                write_overlay(image, mask, out / f"overlay_{s.sample_id}.png", config=stain)
    else:
        if not (args.image and args.mask):
            raise ValidationError("quantify needs either --manifest or both --image and --mask")
        image = load_image(args.image)
        mask = load_mask(args.mask)
        sid = Path(args.image).stem
        for res in quantify_sample(image, mask, config=stain, mask_scale=args.mask_scale):
            rows.append(od_csv_row(sid, res, args.mask_source))
        if args.overlays:
            write_overlay(image, mask, out / f"overlay_{sid}.png", config=stain)

    write_od_csv(rows, out / "od.csv")
    _write_run_json(out, "quantify", seed, {
        "stain": stain.__dict__ | {"gray_weights": list(stain.gray_weights)},
        "mask_source": args.mask_source,
    })
    log.info("wrote %d OD rows to %s", len(rows), out / "od.csv")
    return 0


def _read_od_csv(path: str) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"OD csv not found: {p}")
    with open(p, newline="") as f:
        return list(csv.DictReader(f))


def cmd_correlate(args) -> int:
    seed = _seed_of(load_config(args.config), args)
    manual_rows = _read_od_csv(args.manual)
    model_rows = _read_od_csv(args.model)
    regions = sorted({r["region"] for r in manual_rows})
    series = {}
    correlations = {}
    for label, region in [("pooled", None)] + [(r, r) for r in regions]:
        try:
            s = report_mod.paired_series_from_od(manual_rows, model_rows, region)
            series[label] = s
            correlations[label] = report_mod.correlate(s)
        except ValidationError as e:
            log.warning("correlation %s skipped: %s", label, e)
    if not correlations:
        raise ValidationError("no correlations could be computed from the inputs")
    out = Path(args.out)
    report_mod.build_report(out, od_series=series, correlations=correlations)
    _write_run_json(out, "correlate", seed, {"manual": str(args.manual), "model": str(args.model)})
    for label, c in sorted(correlations.items()):
        log.info("%s: r=%.4f r2=%.4f p=%.3g n=%d", label, c.pearson_r, c.r_squared, c.p_value, c.n)
    return 0


def cmd_preview_aug(args) -> int:
    cfg = load_config(args.config)
    seed = _seed_of(cfg, args)
    aug_cfg = _aug_config(cfg, args, seed)
    image = load_image(args.image)
    mask = load_mask(args.mask)
    files = aug_preview(image, mask, aug_cfg, args.n, args.out, force_each=args.force_each)
    _write_run_json(Path(args.out), "preview-aug", seed,
                    {"augment": aug_cfg.__dict__ | {"gaussian_noise_var": list(aug_cfg.gaussian_noise_var)}})
    log.info("wrote %d files under %s", len(files), args.out)
    return 0


def cmd_report(args) -> int:
    seed = _seed_of(load_config(args.config), args)
    metric_reports = {}
    for item in args.metrics or []:
        label, _, path = item.partition("=")
        if not path:
            raise ValidationError(f"--metrics expects label=path.json, got {item!r}")
        doc = json.loads(Path(path).read_text())
        metric_reports[label] = doc["dataset"]["mean"] if "dataset" in doc else doc
    correlations = {}
    if args.correlations:
        doc = json.loads(Path(args.correlations).read_text())
        for label, c in doc.get("correlations", doc).items():
            correlations[label] = report_mod.CorrelationResult(**c)
    out = Path(args.out)
    report_mod.build_report(out, metric_reports=metric_reports, correlations=correlations)
    _write_run_json(out, "report", seed, {"metrics": args.metrics, "correlations": args.correlations})
    log.info("report bundle written to %s", out)
    return 0


# ---------------------------------------------------------------------------
# Parser


def _keys_epilog(*sections: str) -> str:
    lines = ["config keys read:"]
    if "seed" in sections:
        lines.append("  seed")
    for s in sections:
        if s == "seed":
            continue
        lines.append(f"  {s}." + f"\n  {s}.".join(CONFIG_SCHEMA[s]))
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="snseg",
        description="SNr/SNCD segmentation and TH optical-density quantification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, sections):
        p = sub.add_parser(name, help=help_, epilog=_keys_epilog(*sections),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master random seed (overrides config)")
        return p

    p = add("generate", cmd_generate, "generate a phantom dataset", ("seed", "phantom"))
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--size", type=int, help="image side in pixels")
    p.add_argument("--hemisphere-loss", type=float, dest="hemisphere_loss",
                   help="mirrored-complex preset with this injected-side factor")

    p = add("train", cmd_train, "train a segmentation model",
            ("seed", "model", "train", "augment"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backbone", choices=list(BACKBONE_NAMES))
    p.add_argument("--input-size", type=int, dest="input_size")
    p.add_argument("--loss", choices=("dice", "jaccard", "categorical_cross_entropy"))
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--no-elastic", action="store_true", dest="no_elastic",
                   help="ablation: disable the elastic transform")
    p.add_argument("--no-augment", action="store_true", dest="no_augment",
                   help="disable all augmentation")

    p = add("sweep", cmd_sweep, "backbone/image-size sweep",
            ("seed", "sweep", "model", "train", "augment"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backbones", help="comma-separated backbone names")
    p.add_argument("--image-sizes", dest="image_sizes", help="comma-separated sizes")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--no-augment", action="store_true", dest="no_augment")

    p = add("eval", cmd_eval, "evaluate a checkpoint on a manifest split", ("seed",))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "blind"))
    p.add_argument("--out", required=True)

    p = add("predict", cmd_predict, "segment one image", ("seed",))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = add("quantify", cmd_quantify, "measure TH optical density per region",
            ("seed", "stain"))
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "blind"))
    p.add_argument("--image")
    p.add_argument("--mask")
    p.add_argument("--mask-source", dest="mask_source", default="gt", choices=("gt", "model"))
    p.add_argument("--checkpoint")
    p.add_argument("--mask-scale", dest="mask_scale", type=int, default=1,
                   help="integer nearest-neighbor upscale applied to masks")
    p.add_argument("--tau", type=float, help="blue-normalization threshold")
    p.add_argument("--tissue-max", dest="tissue_max", type=float)
    p.add_argument("--overlays", action="store_true", help="write overlay PNGs")

    p = add("correlate", cmd_correlate, "manual-vs-model OD correlation", ("seed",))
    p.add_argument("--manual", required=True, help="OD csv from ground-truth masks")
    p.add_argument("--model", required=True, help="OD csv from predicted masks")
    p.add_argument("--out", required=True)

    p = add("preview-aug", cmd_preview_aug, "write augmentation previews",
            ("seed", "augment"))
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=7)
    p.add_argument("--force-each", action="store_true", dest="force_each",
                   help="one panel per named transform")

    p = add("report", cmd_report, "assemble the result bundle", ("seed",))
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", action="append",
                   help="label=metrics.json (repeatable, e.g. with_elastic=...)")
    p.add_argument("--correlations", help="report.json from the correlate step")

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as e:
        log.error("%s", e)
        return 1
    except Exception as e:  # runtime failure contract
        log.error("%s: %s", type(e).__name__, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
