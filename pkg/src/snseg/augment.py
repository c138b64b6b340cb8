"""Stochastic training-time transforms applied jointly to image and mask.

Seven transforms: rotation, vertical flip, horizontal flip, random
90-degree rotation, transposition, elastic deformation, and gaussian
noise. Geometric transforms use one sampled parameter set for both image
and mask (bilinear vs nearest resampling respectively); noise touches the
image only. Every application is a pure function of (config, draw_seed).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from snseg.core import LabelMask, RasterImage, save_image, save_mask
from snseg.errors import ValidationError

TRANSFORM_NAMES = (
    "rotation",
    "vertical_flip",
    "horizontal_flip",
    "random_rot90",
    "transpose",
    "elastic",
    "gaussian_noise",
)


@dataclass(frozen=True)
class AugmentationConfig:
    rotation_p: float = 0.5
    rotation_max_degrees: float = 30.0
    vertical_flip_p: float = 0.5
    horizontal_flip_p: float = 0.5
    random_rot90_p: float = 0.5
    transpose_p: float = 0.5
    elastic_p: float = 0.3
    elastic_alpha: float = 40.0
    elastic_sigma: float = 6.0
    gaussian_noise_p: float = 0.3
    gaussian_noise_var: tuple[float, float] = (10.0, 50.0)
    seed: int = 0

    def __post_init__(self):
        for name in TRANSFORM_NAMES:
            p = getattr(self, f"{name}_p")
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name}_p must be in [0, 1], got {p}")
        if self.elastic_alpha <= 0 or self.elastic_sigma <= 0:
            raise ValidationError("elastic alpha and sigma must be positive")
        lo, hi = self.gaussian_noise_var
        if lo < 0 or hi < lo:
            raise ValidationError(f"gaussian_noise_var must be ordered and non-negative, got {self.gaussian_noise_var}")
        if self.rotation_max_degrees < 0:
            raise ValidationError("rotation_max_degrees must be non-negative")

    def probability(self, name: str) -> float:
        return getattr(self, f"{name}_p")

    @classmethod
    def disabled(cls, seed: int = 0) -> "AugmentationConfig":
        return cls(rotation_p=0, vertical_flip_p=0, horizontal_flip_p=0,
                   random_rot90_p=0, transpose_p=0, elastic_p=0,
                   gaussian_noise_p=0, seed=seed)

    def force_only(self, name: str) -> "AugmentationConfig":
        """Copy with a single transform at probability 1, everything else off."""
        if name not in TRANSFORM_NAMES:
            raise ValidationError(f"unknown transform {name!r}; choose from {TRANSFORM_NAMES}")
        kwargs = {f"{n}_p": (1.0 if n == name else 0.0) for n in TRANSFORM_NAMES}
        return AugmentationConfig(
            rotation_max_degrees=self.rotation_max_degrees,
            elastic_alpha=self.elastic_alpha,
            elastic_sigma=self.elastic_sigma,
            gaussian_noise_var=self.gaussian_noise_var,
            seed=self.seed,
            **kwargs,
        )


def _rotate(image: np.ndarray, mask: np.ndarray, degrees: float):
    # image borders reflect, mask borders fill with background class 0
    img = ndimage.rotate(image, degrees, axes=(1, 0), reshape=False, order=1, mode="reflect")
    mk = ndimage.rotate(mask, degrees, axes=(1, 0), reshape=False, order=0, mode="constant", cval=0)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mk.astype(np.uint8)


def _elastic(image: np.ndarray, mask: np.ndarray, alpha: float, sigma: float,
             rng: np.random.Generator):
    h, w = mask.shape
    dx = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="reflect") * alpha
    dy = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="reflect") * alpha
    ys, xs = np.mgrid[0:h, 0:w]
    coords = [ys + dy, xs + dx]
    img = np.stack(
        [ndimage.map_coordinates(image[..., c], coords, order=1, mode="reflect") for c in range(3)],
        axis=-1,
    )
    mk = ndimage.map_coordinates(mask, coords, order=0, mode="reflect")
    return img.astype(np.uint8), mk.astype(np.uint8)


def apply(
    image: RasterImage,
    mask: LabelMask,
    config: AugmentationConfig,
    draw_seed: int,
) -> tuple[RasterImage, LabelMask]:
    """Apply one seeded augmentation draw jointly to an image/mask pair.

    The random stream consumes the same draws whether or not a transform
    fires, so per-transform results are stable under probability changes.
    """
    if (image.height, image.width) != (mask.height, mask.width):
        raise ValidationError(
            f"image {image.height}x{image.width} and mask {mask.height}x{mask.width} dimensions differ"
        )
    rng = np.random.default_rng(np.random.SeedSequence([config.seed & (2**64 - 1), int(draw_seed)]))
    img = image.data.copy()
    mk = mask.data.copy()

    gate = {name: rng.uniform() < config.probability(name) for name in TRANSFORM_NAMES}
    degrees = rng.uniform(-config.rotation_max_degrees, config.rotation_max_degrees)
    k90 = int(rng.integers(1, 4))
    noise_var = rng.uniform(*config.gaussian_noise_var)

    if gate["rotation"] and degrees != 0.0:
        img, mk = _rotate(img, mk, degrees)
    if gate["vertical_flip"]:
        img, mk = img[::-1].copy(), mk[::-1].copy()
    if gate["horizontal_flip"]:
        img, mk = img[:, ::-1].copy(), mk[:, ::-1].copy()
    if gate["random_rot90"]:
        img, mk = np.rot90(img, k90, axes=(0, 1)).copy(), np.rot90(mk, k90).copy()
    if gate["transpose"]:
        img, mk = np.transpose(img, (1, 0, 2)).copy(), mk.T.copy()
    if gate["elastic"]:
        img, mk = _elastic(img, mk, config.elastic_alpha, config.elastic_sigma, rng)
    if gate["gaussian_noise"]:
        noise = rng.normal(0.0, np.sqrt(noise_var), img.shape)
        img = np.clip(np.rint(img.astype(np.float64) + noise), 0, 255).astype(np.uint8)

    return RasterImage(img, image.resolution_microns_per_pixel), LabelMask(mk)


def preview(
    image: RasterImage,
    mask: LabelMask,
    config: AugmentationConfig,
    n: int,
    out_dir: str | Path,
    force_each: bool = False,
) -> list[Path]:
    """Write n augmented variants plus a montage image.

    With `force_each`, variant k applies only the k-th named transform at
    probability 1 (n is capped at the number of transforms), reproducing a
    one-panel-per-technique montage.
    """
    if n < 1:
        raise ValidationError(f"preview needs n >= 1, got {n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written: list[Path] = []
    panels = []
    if force_each:
        names = TRANSFORM_NAMES[: min(n, len(TRANSFORM_NAMES))]
        variants = [
            apply(image, mask, config.force_only(name), draw_seed=i)
            for i, name in enumerate(names)
        ]
        labels = list(names)
    else:
        variants = [apply(image, mask, config, draw_seed=i) for i in range(n)]
        labels = [f"draw_{i:02d}" for i in range(n)]

    for label, (img, mk) in zip(labels, variants):
        img_path = out_dir / f"aug_{label}.png"
        mask_path = out_dir / f"aug_{label}_mask.png"
        save_image(img, img_path)
        save_mask(mk, mask_path)
        written.extend([img_path, mask_path])
        panels.append(img.data)

    # single-row montage of the variant images; panels padded to a common
    # size so transposed non-square variants still fit
    max_h = max(p.shape[0] for p in panels)
    max_w = max(p.shape[1] for p in panels)
    padded = []
    for p in panels:
        canvas = np.zeros((max_h, max_w, 3), dtype=np.uint8)
        canvas[: p.shape[0], : p.shape[1]] = p
        padded.append(canvas)
    montage_path = out_dir / "montage.png"
    save_image(RasterImage(np.concatenate(padded, axis=1)), montage_path)
    written.append(montage_path)
    return written
