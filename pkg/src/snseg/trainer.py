"""Training loop: Adam/SGD, ReduceLROnPlateau, early stopping, sweeps.

An "improvement" everywhere means the monitored validation loss dropped
by more than `improvement_threshold` (1e-6) below the best seen so far;
both the scheduler and the early stopper share that rule so float noise
never resets a plateau.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from snseg import lossmetrics
from snseg.augment import AugmentationConfig, apply as augment_apply
from snseg.core import (
    AnnotatedSample,
    ClassCatalog,
    DEFAULT_CATALOG,
    LabelMask,
    RasterImage,
    load_image,
    load_manifest,
    load_mask,
    resolve_sample_paths,
)
from snseg.errors import ConfigError, TrainingDivergedError, ValidationError
from snseg.model import (
    SegModel,
    SegModelConfig,
    BackboneSpec,
    build,
    save_checkpoint,
)
from snseg.preprocess import normalize_image, resize_pair

log = logging.getLogger(__name__)

LOSS_NAMES = ("dice", "jaccard", "categorical_cross_entropy")
OPTIMIZER_NAMES = ("adam", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "dice"
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    sgd_momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 4
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    min_lr: float = 1e-6
    early_stop_patience: int = 10
    improvement_threshold: float = 1e-6
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.loss not in LOSS_NAMES:
            raise ValidationError(f"loss must be one of {LOSS_NAMES}, got {self.loss!r}")
        if self.optimizer not in OPTIMIZER_NAMES:
            raise ValidationError(f"optimizer must be one of {OPTIMIZER_NAMES}, got {self.optimizer!r}")
        if self.learning_rate < self.min_lr:
            raise ValidationError(
                f"learning_rate {self.learning_rate} below min_lr {self.min_lr}"
            )
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValidationError("patience values must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ValidationError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")


@dataclass
class TrainState:
    epoch: int = 0
    train_loss_history: list = field(default_factory=list)
    val_loss_history: list = field(default_factory=list)
    val_miou_history: list = field(default_factory=list)
    lr_history: list = field(default_factory=list)
    best_epoch: int | None = None
    best_val_loss: float | None = None
    best_checkpoint: str | None = None
    stop_reason: str = ""

    def to_json_dict(self) -> dict:
        return dict(self.__dict__)


class PlateauScheduler:
    """ReduceLROnPlateau with an absolute improvement threshold.

    After `patience` consecutive non-improving epochs the lr is multiplied
    by `factor` (floored at `min_lr`) and the counter resets.
    """

    def __init__(self, lr: float, patience: int, factor: float,
                 min_lr: float, threshold: float = 1e-6):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = float("inf")
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


class EarlyStopper:
    """Stop after `patience` consecutive epochs without improvement."""

    def __init__(self, patience: int, threshold: float = 1e-6):
        self.patience = patience
        self.threshold = threshold
        self.best = float("inf")
        self.bad_epochs = 0

    def step(self, val_loss: float) -> bool:
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------------------
# In-memory dataset


class ArrayDataset:
    """Images and masks from a manifest, resized and cached as uint8."""

    def __init__(self, manifest_path: str | Path, input_size: int,
                 catalog: ClassCatalog = DEFAULT_CATALOG,
                 samples: list[AnnotatedSample] | None = None):
        self.catalog = catalog
        if samples is None:
            samples = load_manifest(manifest_path)
        self.samples = samples
        self.images: list[np.ndarray] = []
        self.masks: list[np.ndarray] = []
        for s in samples:
            img_path, mask_path = resolve_sample_paths(s, manifest_path)
            image = load_image(img_path)
            mask = load_mask(mask_path)
            mask.validate_against(catalog)
            if image.height != input_size or image.width != input_size:
                image, mask = resize_pair(image, mask, input_size)
            self.images.append(image.data)
            self.masks.append(mask.data)

    def split_indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.samples) if s.split == split]


def _one_hot_batch(masks: np.ndarray, n_classes: int) -> np.ndarray:
    return np.eye(n_classes, dtype=np.float32)[masks]


def _batches(indices: list[int], batch_size: int):
    for i in range(0, len(indices), batch_size):
        yield indices[i:i + batch_size]


def _forward_loss(model: SegModel, loss_fn, images: np.ndarray, masks: np.ndarray):
    """images NHWC float32, masks NHW uint8 -> scalar torch loss."""
    x = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
    logits = model(x)
    y_hat = torch.softmax(logits, dim=1).permute(0, 2, 3, 1)
    y = torch.from_numpy(_one_hot_batch(masks, model.config.n_classes))
    return loss_fn(y, y_hat)


def _validation_pass(model: SegModel, dataset: ArrayDataset, indices: list[int],
                     loss_fn, batch_size: int, catalog: ClassCatalog):
    model.eval()
    total_loss = 0.0
    reports = []
    with torch.no_grad():
        for batch in _batches(indices, batch_size):
            images = np.stack([
                normalize_image_array(dataset.images[i], model.input_stats) for i in batch
            ])
            masks = np.stack([dataset.masks[i] for i in batch])
            x = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
            y_hat = torch.softmax(model(x), dim=1).permute(0, 2, 3, 1)
            y = torch.from_numpy(_one_hot_batch(masks, model.config.n_classes))
            total_loss += float(loss_fn(y, y_hat)) * len(batch)
            probs = y_hat.numpy()
            for j, i in enumerate(batch):
                pred = LabelMask(np.argmax(probs[j], axis=-1).astype(np.uint8))
                reports.append(lossmetrics.evaluate(pred, LabelMask(dataset.masks[i]), catalog))
    val_loss = total_loss / len(indices)
    ious = [r.mean["iou"] for r in reports if r.mean["iou"] is not None]
    val_miou = float(np.mean(ious)) if ious else float("nan")
    return val_loss, val_miou


def normalize_image_array(arr: np.ndarray, stats=None) -> np.ndarray:
    out = arr.astype(np.float32) / 255.0
    if stats is not None:
        mean, std = stats
        out = (out - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return out


def train(
    model: SegModel,
    manifest_path: str | Path,
    config: TrainConfig,
    aug_config: AugmentationConfig | None = None,
    out_dir: str | Path = "run",
    catalog: ClassCatalog = DEFAULT_CATALOG,
) -> TrainState:
    """Mini-batch training with plateau scheduling and early stopping.

    Writes `history.csv`, `state.json`, and the `best/` checkpoint under
    `out_dir`. The best checkpoint is the one with the lowest validation
    loss. Fully deterministic for a fixed config seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if aug_config is None:
        aug_config = AugmentationConfig.disabled(seed=config.seed)

    dataset = ArrayDataset(manifest_path, model.config.input_size, catalog)
    train_idx = dataset.split_indices("train")
    val_idx = dataset.split_indices("val")
    if not train_idx:
        raise ConfigError("manifest has an empty train split")
    if not val_idx:
        raise ConfigError("manifest has an empty val split")

    if config.deterministic:
        torch.manual_seed(config.seed)
        torch.use_deterministic_algorithms(True, warn_only=True)

    loss_fn = lossmetrics.LOSSES[config.loss]
    if config.optimizer == "adam":
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                                     betas=config.adam_betas)
    else:
        optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate,
                                    momentum=config.sgd_momentum)

    scheduler = PlateauScheduler(config.learning_rate, config.plateau_patience,
                                 config.plateau_factor, config.min_lr,
                                 config.improvement_threshold)
    stopper = EarlyStopper(config.early_stop_patience, config.improvement_threshold)
    state = TrainState()
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed & (2**64 - 1), 0x5FF1E]))

    start = time.monotonic()
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = [train_idx[k] for k in shuffle_rng.permutation(len(train_idx))]
        epoch_loss = 0.0
        for batch in _batches(order, config.batch_size):
            images, masks = [], []
            for i in batch:
                draw_seed = (epoch << 20) ^ i
                img, mk = augment_apply(
                    RasterImage(dataset.images[i]), LabelMask(dataset.masks[i]),
                    aug_config, draw_seed)
                images.append(normalize_image_array(img.data, model.input_stats))
                masks.append(mk.data)
            loss = _forward_loss(model, loss_fn, np.stack(images), np.stack(masks))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite {config.loss} loss at epoch {epoch} "
                    f"(lr={scheduler.lr:g}, batch sample ids="
                    f"{[dataset.samples[i].sample_id for i in batch]})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(batch)

        train_loss = epoch_loss / len(train_idx)
        val_loss, val_miou = _validation_pass(model, dataset, val_idx, loss_fn,
                                              config.batch_size, catalog)

        improved = state.best_val_loss is None or val_loss < state.best_val_loss - config.improvement_threshold
        if improved:
            state.best_val_loss = val_loss
            state.best_epoch = epoch
            save_checkpoint(model, out_dir / "best", catalog,
                            metadata={"epoch": epoch, "val_loss": val_loss,
                                      "val_miou": val_miou,
                                      "train_config": _config_json(config)})
            # stored relative to out_dir so reruns into fresh directories
            # emit identical state files
            state.best_checkpoint = "best"

        lr = scheduler.step(val_loss)
        for group in optimizer.param_groups:
            group["lr"] = lr

        state.epoch = epoch
        state.train_loss_history.append(train_loss)
        state.val_loss_history.append(val_loss)
        state.val_miou_history.append(val_miou)
        state.lr_history.append(lr)
        log.info("epoch %d: train_loss=%.6f val_loss=%.6f val_miou=%.4f lr=%g",
                 epoch, train_loss, val_loss, val_miou, lr)

        if stopper.step(val_loss):
            state.stop_reason = "early_stopped"
            break
    else:
        state.stop_reason = "epochs_exhausted"

    log.info("training finished (%s) in %.1fs, best val loss %.6f at epoch %s",
             state.stop_reason, time.monotonic() - start, state.best_val_loss, state.best_epoch)
    _write_history(state, out_dir / "history.csv")
    (out_dir / "state.json").write_text(json.dumps(state.to_json_dict(), indent=2) + "\n")
    return state


def _config_json(config: TrainConfig) -> dict:
    doc = dict(config.__dict__)
    doc["adam_betas"] = list(config.adam_betas)
    return doc


def _write_history(state: TrainState, path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_loss", "val_miou", "lr"])
        for i in range(state.epoch):
            w.writerow([i + 1, repr(state.train_loss_history[i]),
                        repr(state.val_loss_history[i]),
                        repr(state.val_miou_history[i]),
                        repr(state.lr_history[i])])


# ---------------------------------------------------------------------------
# Backbone / image-size sweep

PUBLISHED_BEST_IOU = 0.73  # reported best-backbone IoU; not reproducible here


def run_backbone_sweep(
    manifest_path: str | Path,
    backbones: list[str],
    image_sizes: list[int],
    config: TrainConfig,
    aug_config: AugmentationConfig | None = None,
    out_dir: str | Path = "sweep",
    catalog: ClassCatalog = DEFAULT_CATALOG,
    decoder_widths: tuple | None = None,
) -> dict:
    """Train one model per (backbone, image_size) cell and rank by val mIoU.

    Individual cell failures are recorded and the sweep continues. Writes
    sweep.json plus sweep.csv (the bar-chart data).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for backbone in backbones:
        for size in image_sizes:
            cell = f"{backbone}_{size}"
            row = {"backbone": backbone, "image_size": size, "status": "ok",
                   "best_val_miou": None, "best_val_loss": None, "error": None}
            try:
                model_cfg = SegModelConfig(backbone=BackboneSpec(backbone),
                                           n_classes=catalog.n_classes,
                                           input_size=size,
                                           decoder_channel_widths=decoder_widths)
                model = build(model_cfg, seed=config.seed)
                state = train(model, manifest_path, config, aug_config,
                              out_dir / cell, catalog)
                best = state.best_epoch - 1 if state.best_epoch else len(state.val_miou_history) - 1
                row["best_val_miou"] = state.val_miou_history[best]
                row["best_val_loss"] = state.best_val_loss
            except Exception as e:  # cell isolation is the contract
                log.warning("sweep cell %s failed: %s", cell, e)
                row["status"] = "failed"
                row["error"] = str(e)
            rows.append(row)

    ranked = sorted(rows, key=lambda r: (r["best_val_miou"] is None,
                                         -(r["best_val_miou"] or 0.0)))
    report = {
        "cells": ranked,
        "reference": {
            "published_best_backbone_iou": PUBLISHED_BEST_IOU,
            "note": "reported on an internal dataset; not reproducible from this artifact",
        },
    }
    (out_dir / "sweep.json").write_text(json.dumps(report, indent=2) + "\n")
    with open(out_dir / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["backbone", "image_size", "best_val_miou", "best_val_loss", "status"])
        for r in ranked:
            w.writerow([r["backbone"], r["image_size"],
                        "" if r["best_val_miou"] is None else repr(r["best_val_miou"]),
                        "" if r["best_val_loss"] is None else repr(r["best_val_loss"]),
                        r["status"]])
    return report
