"""Deterministic resizing, input normalization, and dataset splitting."""

from __future__ import annotations

import numpy as np
from PIL import Image

from snseg.core import AnnotatedSample, LabelMask, RasterImage
from snseg.errors import ValidationError


def resize_pair(
    image: RasterImage,
    mask: LabelMask,
    target: int,
    preserve_aspect: bool = False,
) -> tuple[RasterImage, LabelMask]:
    """Resize an image/mask pair to target x target.

    The image is resampled bilinearly, the mask nearest-neighbor so class
    ids survive exactly. By default non-square inputs are stretched; with
    `preserve_aspect` they are letterboxed against class-0 / black borders.
    """
    if (image.height, image.width) != (mask.height, mask.width):
        raise ValidationError(
            f"image {image.height}x{image.width} and mask {mask.height}x{mask.width} dimensions differ"
        )
    if target < 1:
        raise ValidationError(f"target size must be positive, got {target}")
    if image.height == target and image.width == target:
        return RasterImage(image.data.copy(), image.resolution_microns_per_pixel), LabelMask(mask.data.copy())

    if preserve_aspect:
        scale = target / max(image.height, image.width)
        new_h = max(1, round(image.height * scale))
        new_w = max(1, round(image.width * scale))
        im = Image.fromarray(image.data).resize((new_w, new_h), Image.BILINEAR)
        mk = Image.fromarray(mask.data).resize((new_w, new_h), Image.NEAREST)
        img_out = np.zeros((target, target, 3), dtype=np.uint8)
        mask_out = np.zeros((target, target), dtype=np.uint8)
        top = (target - new_h) // 2
        left = (target - new_w) // 2
        img_out[top:top + new_h, left:left + new_w] = np.asarray(im)
        mask_out[top:top + new_h, left:left + new_w] = np.asarray(mk)
    else:
        im = Image.fromarray(image.data).resize((target, target), Image.BILINEAR)
        mk = Image.fromarray(mask.data).resize((target, target), Image.NEAREST)
        img_out = np.asarray(im)
        mask_out = np.asarray(mk)

    res = image.resolution_microns_per_pixel
    if res is not None:
        res = res * image.width / target
    return RasterImage(img_out, res), LabelMask(mask_out)


def normalize_image(image: RasterImage, stats: tuple | None = None) -> np.ndarray:
    """Map 8-bit samples to float32 in [0, 1] by dividing by 255.

    `stats`, when a backbone declares expected input statistics, is a
    (mean, std) pair of per-channel triples applied after the scaling.
    """
    out = image.data.astype(np.float32) / 255.0
    if stats is not None:
        mean, std = stats
        out = (out - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return out


def split_dataset(
    samples: list[AnnotatedSample],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> list[AnnotatedSample]:
    """Assign train/val/test splits by a seeded shuffle.

    Split sizes are floor-based with the remainder assigned to train, so
    small datasets never starve the training split. Returns new samples in
    the original order with their split fields rewritten.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"split ratios must sum to 1, got {ratios} (sum {sum(ratios)})")
    if any(r < 0 for r in ratios):
        raise ValidationError(f"split ratios must be non-negative, got {ratios}")
    if not samples:
        raise ValidationError("cannot split an empty sample list")

    n = len(samples)
    # epsilon guards float dust, e.g. 10 * 0.3 = 2.9999999999999996
    n_val = int(n * ratios[1] + 1e-9)
    n_test = int(n * ratios[2] + 1e-9)
    n_train = n - n_val - n_test

    order = np.random.default_rng(seed).permutation(n)
    assignment = {}
    for pos, idx in enumerate(order):
        if pos < n_train:
            assignment[int(idx)] = "train"
        elif pos < n_train + n_val:
            assignment[int(idx)] = "val"
        else:
            assignment[int(idx)] = "test"
    return [
        AnnotatedSample(
            image_path=s.image_path,
            mask_path=s.mask_path,
            sample_id=s.sample_id,
            split=assignment[i],
        )
        for i, s in enumerate(samples)
    ]
