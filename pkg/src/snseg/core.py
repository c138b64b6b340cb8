"""Shared domain types: class catalog, rasters, probability maps, manifests.

All types are immutable after construction (array payloads are marked
read-only), so they can be shared freely between worker processes or
threads. Operations here are pure functions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from snseg.errors import ValidationError

SPLITS = ("train", "val", "test", "blind")

DEFAULT_CLASS_ENTRIES = ((0, "background"), (1, "SNr"), (2, "SNCD"))


def _read_only(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered catalog of segmentation classes; id 0 is always background."""

    entries: tuple[tuple[int, str], ...] = DEFAULT_CLASS_ENTRIES

    def __post_init__(self):
        entries = tuple((int(i), str(n)) for i, n in self.entries)
        object.__setattr__(self, "entries", entries)
        ids = [i for i, _ in entries]
        if ids != list(range(len(ids))):
            raise ValidationError(f"class ids must be contiguous from 0, got {ids}")
        if not entries or entries[0][0] != 0:
            raise ValidationError("catalog must contain a background class with id 0")
        names = [n for _, n in entries]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate class names in catalog: {names}")

    @property
    def n_classes(self) -> int:
        return len(self.entries)

    @property
    def foreground_ids(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.entries if i != 0)

    @property
    def foreground_names(self) -> tuple[str, ...]:
        return tuple(n for i, n in self.entries if i != 0)

    def name_of(self, class_id: int) -> str:
        for i, n in self.entries:
            if i == class_id:
                return n
        raise ValidationError(f"class id {class_id} not in catalog")

    def id_of(self, name: str) -> int:
        for i, n in self.entries:
            if n == name:
                return i
        raise ValidationError(f"class name {name!r} not in catalog")

    def to_json(self) -> list[list]:
        return [[i, n] for i, n in self.entries]

    @classmethod
    def from_json(cls, data) -> "ClassCatalog":
        return cls(tuple((int(i), str(n)) for i, n in data))


DEFAULT_CATALOG = ClassCatalog()


@dataclass(frozen=True)
class RasterImage:
    """8-bit RGB raster, shape (height, width, 3)."""

    data: np.ndarray
    resolution_microns_per_pixel: float | None = None

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValidationError(f"image must have shape (H, W, 3), got {arr.shape}")
        if arr.dtype != np.uint8:
            if not np.issubdtype(arr.dtype, np.integer):
                raise ValidationError(f"image samples must be 8-bit integers, got dtype {arr.dtype}")
            if arr.min() < 0 or arr.max() > 255:
                raise ValidationError("image samples outside [0, 255]")
            arr = arr.astype(np.uint8)
        object.__setattr__(self, "data", _read_only(arr))
        res = self.resolution_microns_per_pixel
        if res is not None and not res > 0:
            raise ValidationError(f"resolution must be positive, got {res}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel class-id raster, shape (height, width)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValidationError(f"mask must have shape (H, W), got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValidationError(f"mask values must be integers, got dtype {arr.dtype}")
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValidationError("mask class ids outside [0, 255]")
        object.__setattr__(self, "data", _read_only(arr.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def validate_against(self, catalog: ClassCatalog) -> None:
        """Raise if any pixel holds a class id outside the catalog."""
        bad = self.data >= catalog.n_classes
        if bad.any():
            ij = np.argwhere(bad)[0]
            value = int(self.data[ij[0], ij[1]])
            raise ValidationError(
                f"mask value {value} at pixel (row={ij[0]}, col={ij[1]}) "
                f"is not a class id of the catalog (C={catalog.n_classes})"
            )

    def class_values(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.unique(self.data))


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-pixel class probabilities, shape (height, width, C); rows sum to 1."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValidationError(f"probability map must have shape (H, W, C), got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise ValidationError("probability map contains non-finite values")
        if arr.size:
            if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
                raise ValidationError("probabilities outside [0, 1]")
            err = np.abs(arr.sum(axis=-1) - 1.0).max()
            if err > 1e-6:
                raise ValidationError(f"pixel probabilities do not sum to 1 (max error {err:.3g})")
        object.__setattr__(self, "data", _read_only(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def n_classes(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ClassConfusion:
    """One-vs-rest pixel tallies for a single class."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            v = getattr(self, name)
            if v < 0:
                raise ValidationError(f"confusion count {name} must be non-negative, got {v}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ConfusionCounts:
    """Per-class confusion tallies over one mask pair (or an accumulated set)."""

    per_class: dict[int, ClassConfusion]
    total_pixels: int

    def __post_init__(self):
        for cid, c in self.per_class.items():
            if c.total != self.total_pixels:
                raise ValidationError(
                    f"class {cid}: tp+fp+fn+tn = {c.total} != total pixels {self.total_pixels}"
                )

    def __getitem__(self, class_id: int) -> ClassConfusion:
        return self.per_class[class_id]


@dataclass(frozen=True)
class AnnotatedSample:
    """One image/mask pair in a dataset manifest."""

    image_path: str
    mask_path: str
    sample_id: str
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}, got {self.split!r}")


# ---------------------------------------------------------------------------
# Operations


def one_hot(mask: LabelMask, catalog: ClassCatalog = DEFAULT_CATALOG) -> ProbabilityMap:
    """Encode a label mask as a per-pixel one-hot probability map."""
    mask.validate_against(catalog)
    eye = np.eye(catalog.n_classes, dtype=np.float64)
    return ProbabilityMap(eye[mask.data])


def argmax_decode(probs: ProbabilityMap) -> LabelMask:
    """Assign each pixel its most probable class; ties go to the lowest id."""
    return LabelMask(np.argmax(probs.data, axis=-1).astype(np.uint8))


# ---------------------------------------------------------------------------
# Serialization

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


def save_image(image: RasterImage, path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ValidationError(f"images are written as PNG or TIFF, got {path.suffix!r}")
    Image.fromarray(image.data, mode="RGB").save(path)


def load_image(path: str | Path) -> RasterImage:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"image file not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return RasterImage(arr)


def save_mask(mask: LabelMask, path: str | Path) -> None:
    """Write a mask as single-channel 8-bit PNG whose values are class ids."""
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise ValidationError(f"masks are written as PNG, got {path.suffix!r}")
    Image.fromarray(mask.data, mode="L").save(path)


def load_mask(path: str | Path) -> LabelMask:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"mask file not found: {path}")
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        arr = np.asarray(im)
    return LabelMask(arr)


def save_manifest(samples: list[AnnotatedSample], path: str | Path) -> None:
    """Write the manifest as a JSON array of sample records."""
    _check_unique_ids(samples)
    records = [
        {
            "sample_id": s.sample_id,
            "image_path": s.image_path,
            "mask_path": s.mask_path,
            "split": s.split,
        }
        for s in samples
    ]
    Path(path).write_text(json.dumps(records, indent=2) + "\n")


def load_manifest(path: str | Path) -> list[AnnotatedSample]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest not found: {path}")
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"manifest {path} is not valid JSON: {e}") from e
    if not isinstance(records, list):
        raise ValidationError(f"manifest {path} must be a JSON array")
    samples = []
    for i, rec in enumerate(records):
        try:
            samples.append(
                AnnotatedSample(
                    image_path=rec["image_path"],
                    mask_path=rec["mask_path"],
                    sample_id=rec["sample_id"],
                    split=rec.get("split", "train"),
                )
            )
        except (KeyError, TypeError) as e:
            raise ValidationError(f"manifest record {i} malformed: {e}") from e
    _check_unique_ids(samples)
    return samples


def resolve_sample_paths(sample: AnnotatedSample, manifest_path: str | Path) -> tuple[Path, Path]:
    """Interpret relative sample paths as relative to the manifest directory."""
    base = Path(manifest_path).parent
    image = Path(sample.image_path)
    mask = Path(sample.mask_path)
    return (image if image.is_absolute() else base / image,
            mask if mask.is_absolute() else base / mask)


def _check_unique_ids(samples: list[AnnotatedSample]) -> None:
    seen = set()
    for s in samples:
        if s.sample_id in seen:
            raise ValidationError(f"duplicate sample_id in manifest: {s.sample_id!r}")
        seen.add(s.sample_id)
