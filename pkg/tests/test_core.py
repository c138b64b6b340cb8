import numpy as np
import pytest

from snseg.core import (
    AnnotatedSample,
    ClassCatalog,
    LabelMask,
    ProbabilityMap,
    RasterImage,
    argmax_decode,
    load_image,
    load_manifest,
    load_mask,
    one_hot,
    save_image,
    save_manifest,
    save_mask,
)
from snseg.errors import ValidationError
from tests.conftest import random_mask


class TestClassCatalog:
    def test_default_catalog(self, catalog):
        assert catalog.n_classes == 3
        assert catalog.foreground_ids == (1, 2)
        assert catalog.foreground_names == ("SNr", "SNCD")
        assert catalog.name_of(0) == "background"

    def test_ids_must_be_contiguous(self):
        with pytest.raises(ValidationError, match="contiguous"):
            ClassCatalog(((0, "background"), (2, "SNr")))

    def test_background_must_be_first(self):
        with pytest.raises(ValidationError):
            ClassCatalog(((1, "SNr"), (0, "background")))

    def test_json_round_trip(self, catalog):
        assert ClassCatalog.from_json(catalog.to_json()) == catalog


class TestTypes:
    def test_image_validation(self):
        with pytest.raises(ValidationError, match="shape"):
            RasterImage(np.zeros((4, 4), dtype=np.uint8))
        with pytest.raises(ValidationError, match="0, 255"):
            RasterImage(np.full((2, 2, 3), 300, dtype=np.int32))
        with pytest.raises(ValidationError, match="positive"):
            RasterImage(np.zeros((2, 2, 3), dtype=np.uint8), resolution_microns_per_pixel=-1.0)

    def test_image_is_read_only(self):
        img = RasterImage(np.zeros((2, 2, 3), dtype=np.uint8))
        with pytest.raises(ValueError):
            img.data[0, 0, 0] = 1

    def test_mask_validation(self, catalog):
        with pytest.raises(ValidationError, match="shape"):
            LabelMask(np.zeros((2, 2, 2), dtype=np.uint8))
        mask = LabelMask(np.array([[0, 5]], dtype=np.uint8))
        with pytest.raises(ValidationError, match=r"value 5 at pixel \(row=0, col=1\)"):
            mask.validate_against(catalog)

    def test_probability_map_must_normalize(self):
        bad = np.full((2, 2, 3), 0.5)
        with pytest.raises(ValidationError, match="sum to 1"):
            ProbabilityMap(bad)
        ok = np.full((2, 2, 3), 1.0 / 3.0)
        pm = ProbabilityMap(ok)
        assert pm.n_classes == 3

    def test_sample_split_validation(self):
        with pytest.raises(ValidationError, match="split"):
            AnnotatedSample("a.png", "b.png", "s1", split="bogus")


class TestOneHot:
    def test_single_background_pixel(self, catalog):
        pm = one_hot(LabelMask(np.array([[0]], dtype=np.uint8)), catalog)
        assert pm.data.tolist() == [[[1.0, 0.0, 0.0]]]

    def test_two_foreground_pixels(self, catalog):
        pm = one_hot(LabelMask(np.array([[1, 2]], dtype=np.uint8)), catalog)
        assert pm.data.tolist() == [[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]]

    def test_round_trip_property(self, catalog, rng):
        # one_hot then argmax_decode is the identity on valid masks
        for _ in range(120):
            mask = random_mask(rng)
            decoded = argmax_decode(one_hot(mask, catalog))
            assert (decoded.data == mask.data).all()

    def test_invalid_class_id_names_pixel(self, catalog):
        with pytest.raises(ValidationError, match="value 7"):
            one_hot(LabelMask(np.array([[0, 7]], dtype=np.uint8)), catalog)


class TestArgmaxDecode:
    def test_unique_max(self):
        pm = ProbabilityMap(np.array([[[0.2, 0.5, 0.3]]]))
        assert argmax_decode(pm).data[0, 0] == 1

    def test_tie_breaks_to_lowest_id(self):
        pm = ProbabilityMap(np.array([[[0.4, 0.4, 0.2]]]))
        assert argmax_decode(pm).data[0, 0] == 0


class TestSerialization:
    def test_mask_png_round_trip_is_bit_exact(self, tmp_path, rng):
        mask = random_mask(rng, 32, 32)
        save_mask(mask, tmp_path / "m.png")
        again = load_mask(tmp_path / "m.png")
        assert (again.data == mask.data).all()

    def test_image_png_round_trip(self, tmp_path, rng):
        img = RasterImage(rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8))
        save_image(img, tmp_path / "i.png")
        assert (load_image(tmp_path / "i.png").data == img.data).all()

    def test_image_tiff_round_trip(self, tmp_path, rng):
        img = RasterImage(rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8))
        save_image(img, tmp_path / "i.tif")
        assert (load_image(tmp_path / "i.tif").data == img.data).all()

    def test_manifest_round_trip(self, tmp_path):
        samples = [
            AnnotatedSample("a.png", "a_m.png", "a", "train"),
            AnnotatedSample("b.png", "b_m.png", "b", "val"),
        ]
        save_manifest(samples, tmp_path / "manifest.json")
        assert load_manifest(tmp_path / "manifest.json") == samples

    def test_manifest_rejects_duplicate_ids(self, tmp_path):
        samples = [
            AnnotatedSample("a.png", "a_m.png", "dup", "train"),
            AnnotatedSample("b.png", "b_m.png", "dup", "val"),
        ]
        with pytest.raises(ValidationError, match="duplicate"):
            save_manifest(samples, tmp_path / "manifest.json")

    def test_missing_files_raise(self, tmp_path):
        with pytest.raises(ValidationError, match="not found"):
            load_mask(tmp_path / "nope.png")
        with pytest.raises(ValidationError, match="not found"):
            load_manifest(tmp_path / "nope.json")
