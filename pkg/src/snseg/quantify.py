"""TH-stain quantification: positive-pixel detection and optical density.

Brown DAB-like stain is detected by blue normalization (brown has
proportionally little blue) gated by a grayscale ceiling that keeps bright
glass from counting as stain. Optical density per positive pixel follows
Beer-Lambert absorbance, OD = -log10(I / 255), with I = 0 clamped to 1;
region results are OD sums normalized by total region area.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from snseg.core import ClassCatalog, DEFAULT_CATALOG, LabelMask, RasterImage, save_image
from snseg.errors import ValidationError

MAX_PIXEL_OD = float(np.log10(255.0))

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class StainConfig:
    """Thresholds for TH-positive detection.

    A pixel is positive when its blue-normalized value falls below
    `blue_norm_threshold` and its grayscale intensity stays below
    `tissue_intensity_max`. Both are calibration knobs; the defaults suit
    the phantom palette and typical DAB staining.
    """

    blue_norm_threshold: float = 110.0
    tissue_intensity_max: float = 230.0
    gray_weights: tuple[float, float, float] = GRAY_WEIGHTS

    def __post_init__(self):
        if not 0 < self.blue_norm_threshold < 255:
            raise ValidationError(f"blue_norm_threshold must be in (0, 255), got {self.blue_norm_threshold}")
        if not 0 < self.tissue_intensity_max <= 255:
            raise ValidationError(f"tissue_intensity_max must be in (0, 255], got {self.tissue_intensity_max}")


DEFAULT_STAIN = StainConfig()


@dataclass(frozen=True)
class RegionODResult:
    """Area-normalized optical density for one sub-region."""

    region: str
    region_area: int
    positive_pixel_count: int
    summed_od: float
    normalized_od: float

    @property
    def empty(self) -> bool:
        return self.region_area == 0

    def __post_init__(self):
        if self.positive_pixel_count > self.region_area:
            raise ValidationError("positive pixels exceed region area")
        if self.region_area and not 0.0 <= self.normalized_od <= MAX_PIXEL_OD + 1e-12:
            raise ValidationError(f"normalized OD {self.normalized_od} outside [0, log10(255)]")


def blue_normalize(pixel) -> float:
    """255 * B / (R + G + B); a pure black pixel maps to 255 (non-stain)."""
    r, g, b = (float(v) for v in pixel)
    total = r + g + b
    if total == 0:
        return 255.0
    return 255.0 * b / total


def _blue_normalize_raster(rgb: np.ndarray) -> np.ndarray:
    rgb = rgb.astype(np.float64)
    total = rgb.sum(axis=-1)
    out = np.full(total.shape, 255.0)
    np.divide(255.0 * rgb[..., 2], total, out=out, where=total > 0)
    return out


def grayscale(rgb: np.ndarray, weights=GRAY_WEIGHTS) -> np.ndarray:
    """Luma-weighted grayscale, kept as float (no 8-bit quantization)."""
    return rgb.astype(np.float64) @ np.asarray(weights, dtype=np.float64)


def th_positive_mask(image: RasterImage, config: StainConfig = DEFAULT_STAIN) -> np.ndarray:
    """Boolean raster of TH-positive (stained tissue) pixels."""
    blue_norm = _blue_normalize_raster(image.data)
    gray = grayscale(image.data, config.gray_weights)
    return (blue_norm < config.blue_norm_threshold) & (gray < config.tissue_intensity_max)


def optical_density(intensity) -> float | np.ndarray:
    """Beer-Lambert absorbance -log10(I/255) for 8-bit grayscale intensity.

    I below 1 (notably the 0 case) is clamped to 1 before the logarithm.
    """
    arr = np.asarray(intensity, dtype=np.float64)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValidationError(f"intensity outside [0, 255]: min={arr.min()}, max={arr.max()}")
    od = -np.log10(np.maximum(arr, 1.0) / 255.0)
    return float(od) if np.isscalar(intensity) or arr.ndim == 0 else od


def region_od(
    image: RasterImage,
    region_mask: LabelMask,
    region_class: int,
    config: StainConfig = DEFAULT_STAIN,
    region_name: str | None = None,
) -> RegionODResult:
    """Sum OD over TH-positive pixels inside one region, normalized by area.

    The normalizer is the full region area (every pixel of the region),
    not just the positive pixels. An empty region returns the zero-area
    marker result rather than raising.
    """
    if (image.height, image.width) != (region_mask.height, region_mask.width):
        raise ValidationError(
            f"image {image.height}x{image.width} and mask "
            f"{region_mask.height}x{region_mask.width} dimensions differ"
        )
    name = region_name if region_name is not None else str(region_class)
    in_region = region_mask.data == region_class
    area = int(in_region.sum())
    if area == 0:
        return RegionODResult(region=name, region_area=0, positive_pixel_count=0,
                              summed_od=0.0, normalized_od=0.0)
    positive = th_positive_mask(image, config) & in_region
    gray = grayscale(image.data, config.gray_weights)
    summed = float(optical_density(gray[positive]).sum()) if positive.any() else 0.0
    return RegionODResult(
        region=name,
        region_area=area,
        positive_pixel_count=int(positive.sum()),
        summed_od=summed,
        normalized_od=summed / area,
    )


def upscale_mask(mask: LabelMask, factor: int) -> LabelMask:
    """Nearest-neighbor integer upscaling, for applying a low-resolution
    segmentation to a higher-resolution image of the same field."""
    if factor < 1 or int(factor) != factor:
        raise ValidationError(f"upscale factor must be a positive integer, got {factor}")
    return LabelMask(np.repeat(np.repeat(mask.data, factor, axis=0), factor, axis=1))


def quantify_sample(
    image: RasterImage,
    mask: LabelMask,
    catalog: ClassCatalog = DEFAULT_CATALOG,
    config: StainConfig = DEFAULT_STAIN,
    mask_scale: int = 1,
) -> list[RegionODResult]:
    """Per-foreground-region OD results for one image.

    `mask_scale` upsamples the mask by an integer factor first, for masks
    produced at a lower resolution than the image being measured. Regions
    absent from the mask yield the empty marker result.
    """
    if mask_scale != 1:
        mask = upscale_mask(mask, mask_scale)
    mask.validate_against(catalog)
    return [
        region_od(image, mask, cid, config, region_name=catalog.name_of(cid))
        for cid in catalog.foreground_ids
    ]


def write_od_csv(rows: list[dict], path: str | Path) -> None:
    """Write quantification rows (sample_id, region, mask_source, ...) as CSV."""
    fields = ["sample_id", "region", "mask_source", "region_area",
              "positive_pixels", "summed_od", "normalized_od"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in fields})


def od_csv_row(sample_id: str, result: RegionODResult, mask_source: str) -> dict:
    return {
        "sample_id": sample_id,
        "region": result.region,
        "mask_source": mask_source,
        "region_area": result.region_area,
        "positive_pixels": result.positive_pixel_count,
        "summed_od": repr(result.summed_od),
        "normalized_od": repr(result.normalized_od),
    }


OVERLAY_POSITIVE = (128, 0, 160)
OUTLINE_COLORS = {"SNr": (220, 30, 30), "SNCD": (30, 170, 60)}


def overlay_image(
    image: RasterImage,
    mask: LabelMask,
    catalog: ClassCatalog = DEFAULT_CATALOG,
    config: StainConfig = DEFAULT_STAIN,
) -> RasterImage:
    """Paint TH-positive pixels purple and outline regions (red SNr, green SNCD)."""
    out = image.data.copy()
    positive = th_positive_mask(image, config) & (mask.data != 0)
    out[positive] = OVERLAY_POSITIVE
    for idx, cid in enumerate(catalog.foreground_ids):
        region = mask.data == cid
        # boundary = region pixels with a non-region 4-neighbor
        interior = np.zeros_like(region)
        interior[1:-1, 1:-1] = (
            region[1:-1, 1:-1] & region[:-2, 1:-1] & region[2:, 1:-1]
            & region[1:-1, :-2] & region[1:-1, 2:]
        )
        boundary = region & ~interior
        name = catalog.name_of(cid)
        color = OUTLINE_COLORS.get(name, [(220, 30, 30), (30, 170, 60)][idx % 2])
        out[boundary] = color
    return RasterImage(out, image.resolution_microns_per_pixel)


def write_overlay(image: RasterImage, mask: LabelMask, path: str | Path,
                  catalog: ClassCatalog = DEFAULT_CATALOG,
                  config: StainConfig = DEFAULT_STAIN) -> None:
    save_image(overlay_image(image, mask, catalog, config), path)
