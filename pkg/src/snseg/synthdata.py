"""Phantom brain-section generator with exactly known masks and stain OD.

Phantoms stand in for the internal mouse dataset: a bluish Nissl-like
background with two adjacent irregular blobs (SNr, dorsal SNCD) painted in
a brown TH-like stain at controllable intensity. The generator records the
analytic optical-density ground truth from the very pixels it painted, so
the quantification pipeline can be verified end to end.

The OD ground truth is computed here with its own inline arithmetic on the
final 8-bit pixels; it deliberately does not call into `snseg.quantify`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from snseg.core import (
    AnnotatedSample,
    LabelMask,
    RasterImage,
    save_image,
    save_manifest,
    save_mask,
)
from snseg.errors import GenerationError, ValidationError
from snseg.preprocess import split_dataset
from snseg.quantify import RegionODResult

MAX_PLACEMENT_ATTEMPTS = 100
AREA_BOUNDS = (0.005, 0.15)

SNR_CLASS = 1
SNCD_CLASS = 2


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters for one phantom family; (seed, index) pins each sample.

    Intensity fields take either a fixed value or a (lo, hi) range sampled
    per sample, which gives the dataset the OD variance the correlation
    workflow needs. Radii are fractions of the image side.
    """

    image_size: int = 128
    n_samples: int = 16
    seed: int = 0
    nissl_background: tuple[int, int, int] = (120, 130, 216)
    th_stain: tuple[int, int, int] = (120, 80, 40)
    snr_intensity: float | tuple[float, float] = (0.5, 1.0)
    sncd_intensity: float | tuple[float, float] = (0.3, 0.8)
    stain_jitter: float = 0.10
    background_noise: float = 4.0
    center_jitter: float = 0.05
    snr_radii: tuple = ((0.13, 0.19), (0.075, 0.115))
    sncd_radii: tuple = ((0.11, 0.17), (0.045, 0.07))
    boundary_noise: float = 0.08
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    # hemisphere-loss preset: paint mirrored complexes, one side's stain
    # multiplied by this factor (simulated injection side)
    hemisphere_loss: float | None = None

    def __post_init__(self):
        if self.image_size < 32:
            raise ValidationError(f"image_size must be >= 32, got {self.image_size}")
        if self.n_samples < 0:
            raise ValidationError(f"n_samples must be >= 0, got {self.n_samples}")
        for name in ("snr_intensity", "sncd_intensity"):
            v = getattr(self, name)
            lo, hi = (v, v) if isinstance(v, (int, float)) else v
            if not (0.0 <= lo <= hi <= 1.0):
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if self.hemisphere_loss is not None and not 0.0 <= self.hemisphere_loss <= 1.0:
            raise ValidationError(f"hemisphere_loss must be in [0, 1], got {self.hemisphere_loss}")
        if not 0 <= self.stain_jitter < 1:
            raise ValidationError(f"stain_jitter must be in [0, 1), got {self.stain_jitter}")


@dataclass(frozen=True)
class PhantomSample:
    image: RasterImage
    mask: LabelMask
    od_truth: tuple[RegionODResult, RegionODResult]
    injected_side: str | None = None

    def __iter__(self):
        # allows (image, mask, od_truth) unpacking
        return iter((self.image, self.mask, self.od_truth))


def _sample_scalar(rng: np.random.Generator, value) -> float:
    if isinstance(value, (int, float)):
        return float(value)
    lo, hi = value
    return float(rng.uniform(lo, hi))


def _blob_inside(size: int, cx: float, cy: float, rx: float, ry: float,
                 theta: float, harmonics) -> np.ndarray:
    """Rasterize an ellipse whose boundary radius is modulated by low-
    frequency cosine harmonics."""
    ys, xs = np.mgrid[0:size, 0:size]
    dx = xs - cx
    dy = ys - cy
    u = (dx * math.cos(theta) + dy * math.sin(theta)) / rx
    v = (-dx * math.sin(theta) + dy * math.cos(theta)) / ry
    rho = np.sqrt(u * u + v * v)
    phi = np.arctan2(v, u)
    radial = np.ones_like(rho)
    for k, amp, phase in harmonics:
        radial += amp * np.cos(k * phi + phase)
    return rho <= radial


def _draw_harmonics(rng: np.random.Generator, amplitude: float):
    """3 to 6 cosine harmonics with total amplitude `amplitude`."""
    n = int(rng.integers(3, 7))
    raw = rng.uniform(-1.0, 1.0, n)
    total = np.abs(raw).sum()
    coeffs = raw * (amplitude / total) if total > 0 else raw * 0.0
    phases = rng.uniform(0.0, 2.0 * math.pi, n)
    return [(k + 2, float(coeffs[k]), float(phases[k])) for k in range(n)]


def _draw_complex(rng: np.random.Generator, spec: PhantomSpec, cx_rel: float):
    """One SN complex: (snr_inside, sncd_inside) boolean rasters."""
    s = spec.image_size
    cj = spec.center_jitter
    cx = s * (cx_rel + rng.uniform(-cj, cj))
    cy = s * (0.58 + rng.uniform(-cj, cj))

    (rx_lo, rx_hi), (ry_lo, ry_hi) = spec.snr_radii
    snr_rx = s * rng.uniform(rx_lo, rx_hi)
    snr_ry = s * rng.uniform(ry_lo, ry_hi)
    snr_theta = rng.uniform(-0.3, 0.3)
    snr = _blob_inside(s, cx, cy, snr_rx, snr_ry, snr_theta,
                       _draw_harmonics(rng, spec.boundary_noise))

    (rx_lo, rx_hi), (ry_lo, ry_hi) = spec.sncd_radii
    sncd_rx = s * rng.uniform(rx_lo, rx_hi)
    sncd_ry = s * rng.uniform(ry_lo, ry_hi)
    gap = rng.uniform(0.08, 0.3)
    # dorsal placement: above the SNr along the image vertical
    sncd_cy = cy - (snr_ry + sncd_ry) * (1.0 + gap)
    sncd_cx = cx + s * rng.uniform(-0.02, 0.02)
    sncd_theta = rng.uniform(-0.2, 0.2)
    sncd = _blob_inside(s, sncd_cx, sncd_cy, sncd_rx, sncd_ry, sncd_theta,
                        _draw_harmonics(rng, spec.boundary_noise))
    return snr, sncd


def _paint(img: np.ndarray, inside: np.ndarray, stain: np.ndarray,
           alpha_base: float, jitter: float, rng: np.random.Generator) -> None:
    n = int(inside.sum())
    if n == 0 or alpha_base == 0.0:
        return
    alpha = np.clip(alpha_base * (1.0 + rng.uniform(-jitter, jitter, n)), 0.0, 1.0)
    img[inside] = (1.0 - alpha[:, None]) * img[inside] + alpha[:, None] * stain[None, :]


def _analytic_od(pixels: np.ndarray, region: np.ndarray, name: str) -> RegionODResult:
    """Ground-truth OD from final 8-bit pixels, written out longhand."""
    area = int(region.sum())
    if area == 0:
        return RegionODResult(region=name, region_area=0, positive_pixel_count=0,
                              summed_od=0.0, normalized_od=0.0)
    rgb = pixels[region].astype(np.float64)
    total = rgb.sum(axis=1)
    blue_norm = np.where(total > 0, 255.0 * rgb[:, 2] / np.maximum(total, 1e-12), 255.0)
    gray = 0.299 * rgb[:, 0] + 0.587 * rgb[:, 1] + 0.114 * rgb[:, 2]
    positive = (blue_norm < 110.0) & (gray < 230.0)
    od = -np.log10(np.maximum(gray[positive], 1.0) / 255.0)
    summed = float(od.sum())
    return RegionODResult(region=name, region_area=area,
                          positive_pixel_count=int(positive.sum()),
                          summed_od=summed, normalized_od=summed / area)


def generate_phantom(spec: PhantomSpec, index: int) -> PhantomSample:
    """Deterministically generate phantom number `index` of the family.

    Raises GenerationError if no non-overlapping geometry with in-bounds
    region areas is found within 100 attempts.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed & (2**64 - 1), int(index)]))
    s = spec.image_size

    base = np.asarray(spec.nissl_background, dtype=np.float64)
    lum = rng.normal(0.0, spec.background_noise, (s, s))
    img = np.clip(base[None, None, :] + lum[:, :, None], 0.0, 255.0)

    snr_alpha = _sample_scalar(rng, spec.snr_intensity)
    sncd_alpha = _sample_scalar(rng, spec.sncd_intensity)
    injected = None
    if spec.hemisphere_loss is not None:
        injected = "left" if rng.uniform() < 0.5 else "right"

    lo, hi = AREA_BOUNDS
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        if spec.hemisphere_loss is None:
            snr, sncd = _draw_complex(rng, spec, cx_rel=0.5)
        else:
            snr_l, sncd_l = _draw_complex(rng, spec, cx_rel=0.27)
            snr, sncd = snr_l | snr_l[:, ::-1], sncd_l | sncd_l[:, ::-1]
            if (snr_l & snr_l[:, ::-1]).any() or (sncd_l & sncd_l[:, ::-1]).any():
                continue
        if (snr & sncd).any():
            continue
        snr_frac = snr.sum() / (s * s)
        sncd_frac = sncd.sum() / (s * s)
        if lo <= snr_frac <= hi and lo <= sncd_frac <= hi:
            break
    else:
        raise GenerationError(
            f"no valid SNr/SNCD placement after {MAX_PLACEMENT_ATTEMPTS} attempts "
            f"(seed={spec.seed}, index={index}); relax region_geometry"
        )

    stain = np.asarray(spec.th_stain, dtype=np.float64)
    if spec.hemisphere_loss is None:
        _paint(img, snr, stain, snr_alpha, spec.stain_jitter, rng)
        _paint(img, sncd, stain, sncd_alpha, spec.stain_jitter, rng)
    else:
        half = np.zeros((s, s), dtype=bool)
        half[:, : s // 2] = True
        left_factor = spec.hemisphere_loss if injected == "left" else 1.0
        right_factor = spec.hemisphere_loss if injected == "right" else 1.0
        _paint(img, snr & half, stain, snr_alpha * left_factor, spec.stain_jitter, rng)
        _paint(img, snr & ~half, stain, snr_alpha * right_factor, spec.stain_jitter, rng)
        _paint(img, sncd & half, stain, sncd_alpha * left_factor, spec.stain_jitter, rng)
        _paint(img, sncd & ~half, stain, sncd_alpha * right_factor, spec.stain_jitter, rng)

    pixels = np.rint(img).clip(0, 255).astype(np.uint8)
    mask = np.zeros((s, s), dtype=np.uint8)
    mask[snr] = SNR_CLASS
    mask[sncd] = SNCD_CLASS

    od_truth = (_analytic_od(pixels, snr, "SNr"), _analytic_od(pixels, sncd, "SNCD"))
    return PhantomSample(image=RasterImage(pixels), mask=LabelMask(mask),
                         od_truth=od_truth, injected_side=injected)


def hemisphere_loss_spec(spec: PhantomSpec, loss_factor: float = 0.35) -> PhantomSpec:
    """Preset: mirrored SN complexes with one side's stain reduced."""
    return replace(spec, hemisphere_loss=loss_factor)


def generate_dataset(spec: PhantomSpec, out_dir: str | Path) -> list[AnnotatedSample]:
    """Write n_samples image/mask PNG pairs, a manifest, and the OD record.

    Splits follow spec.split_ratios (default 80/10/10) with the remainder
    rule from `preprocess.split_dataset`. `od_truth.json` maps sample ids
    to the generator's analytic per-region OD.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ValidationError(f"cannot create output directory {out_dir}: {e}") from e

    samples = []
    od_records = {}
    for i in range(spec.n_samples):
        phantom = generate_phantom(spec, i)
        sample_id = f"phantom_{i:04d}"
        image_name = f"{sample_id}.png"
        mask_name = f"{sample_id}_mask.png"
        try:
            save_image(phantom.image, out_dir / image_name)
            save_mask(phantom.mask, out_dir / mask_name)
        except OSError as e:
            raise ValidationError(f"failed writing phantom files under {out_dir}: {e}") from e
        samples.append(AnnotatedSample(image_path=image_name, mask_path=mask_name,
                                       sample_id=sample_id, split="train"))
        od_records[sample_id] = {
            "injected_side": phantom.injected_side,
            "regions": {
                r.region: {
                    "region_area": r.region_area,
                    "positive_pixel_count": r.positive_pixel_count,
                    "summed_od": r.summed_od,
                    "normalized_od": r.normalized_od,
                }
                for r in phantom.od_truth
            },
        }

    if samples:
        samples = split_dataset(samples, spec.split_ratios, seed=spec.seed)
    save_manifest(samples, out_dir / "manifest.json")
    (out_dir / "od_truth.json").write_text(json.dumps(od_records, indent=2) + "\n")
    return samples
