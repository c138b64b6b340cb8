import json

import numpy as np
import pytest

from snseg.core import load_manifest, load_mask
from snseg.errors import GenerationError, ValidationError
from snseg.synthdata import (
    AREA_BOUNDS,
    PhantomSpec,
    generate_dataset,
    generate_phantom,
    hemisphere_loss_spec,
)


class TestGeneratePhantom:
    def test_deterministic_for_seed_and_index(self):
        spec = PhantomSpec(image_size=64, seed=5)
        a = generate_phantom(spec, 2)
        b = generate_phantom(spec, 2)
        assert (a.image.data == b.image.data).all()
        assert (a.mask.data == b.mask.data).all()
        assert a.od_truth == b.od_truth

    def test_indices_differ(self):
        spec = PhantomSpec(image_size=64, seed=5)
        a, b = generate_phantom(spec, 0), generate_phantom(spec, 1)
        assert not (a.mask.data == b.mask.data).all()

    def test_regions_never_overlap_and_within_area_bounds(self):
        spec = PhantomSpec(image_size=96, seed=9)
        lo, hi = AREA_BOUNDS
        for i in range(10):
            s = generate_phantom(spec, i)
            snr = s.mask.data == 1
            sncd = s.mask.data == 2
            assert not (snr & sncd).any()
            for frac in (snr.mean(), sncd.mean()):
                assert lo <= frac <= hi

    def test_zero_intensity_region_has_zero_od(self):
        s = generate_phantom(PhantomSpec(image_size=64, seed=1, sncd_intensity=0.0), 0)
        sncd = s.od_truth[1]
        assert sncd.positive_pixel_count == 0
        assert sncd.normalized_od == 0.0

    def test_full_vs_weak_stain_od_is_strictly_higher(self):
        hi = generate_phantom(PhantomSpec(image_size=64, seed=2, snr_intensity=1.0, sncd_intensity=1.0), 0)
        lo = generate_phantom(PhantomSpec(image_size=64, seed=2, snr_intensity=0.3, sncd_intensity=0.3), 0)
        # identical geometry: intensity is sampled before placement draws
        assert (hi.mask.data == lo.mask.data).all()
        assert hi.od_truth[0].normalized_od > lo.od_truth[0].normalized_od
        assert hi.od_truth[1].normalized_od > lo.od_truth[1].normalized_od

    def test_impossible_geometry_raises_generation_error(self):
        bad = PhantomSpec(image_size=64, seed=0,
                          snr_radii=((0.45, 0.5), (0.4, 0.45)),
                          sncd_radii=((0.4, 0.45), (0.3, 0.4)))
        with pytest.raises(GenerationError, match="100 attempts"):
            generate_phantom(bad, 0)

    def test_mask_matches_painted_blobs_exactly(self, phantom64):
        # every stained pixel lies inside a region of the mask
        from snseg.quantify import th_positive_mask

        positive = th_positive_mask(phantom64.image)
        assert (positive <= (phantom64.mask.data != 0)).all()

    def test_hemisphere_preset_is_mirrored(self):
        spec = hemisphere_loss_spec(PhantomSpec(image_size=64, seed=4), 0.4)
        s = generate_phantom(spec, 0)
        assert s.injected_side in ("left", "right")
        for cid in (1, 2):
            region = s.mask.data == cid
            assert (region == region[:, ::-1]).all()

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            PhantomSpec(image_size=8)
        with pytest.raises(ValidationError):
            PhantomSpec(snr_intensity=(0.5, 2.0))
        with pytest.raises(ValidationError):
            PhantomSpec(n_samples=-1)


class TestGenerateDataset:
    def test_ten_samples_split_8_1_1(self, tmp_path):
        spec = PhantomSpec(image_size=64, n_samples=10, seed=7)
        samples = generate_dataset(spec, tmp_path)
        counts = {s: sum(1 for x in samples if x.split == s) for s in ("train", "val", "test")}
        assert counts == {"train": 8, "val": 1, "test": 1}
        assert load_manifest(tmp_path / "manifest.json") == samples

    def test_zero_samples_empty_manifest(self, tmp_path):
        samples = generate_dataset(PhantomSpec(image_size=64, n_samples=0, seed=0), tmp_path)
        assert samples == []
        assert load_manifest(tmp_path / "manifest.json") == []

    def test_all_masks_use_only_catalog_ids(self, tmp_path):
        spec = PhantomSpec(image_size=64, n_samples=6, seed=3)
        samples = generate_dataset(spec, tmp_path)
        for s in samples:
            mask = load_mask(tmp_path / s.mask_path)
            assert set(np.unique(mask.data)) <= {0, 1, 2}

    def test_od_truth_written_per_sample(self, tmp_path):
        spec = PhantomSpec(image_size=64, n_samples=4, seed=1)
        generate_dataset(spec, tmp_path)
        od = json.loads((tmp_path / "od_truth.json").read_text())
        assert set(od) == {f"phantom_{i:04d}" for i in range(4)}
        for rec in od.values():
            assert set(rec["regions"]) == {"SNr", "SNCD"}

    def test_regenerate_is_byte_identical(self, tmp_path):
        spec = PhantomSpec(image_size=64, n_samples=3, seed=12)
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        generate_dataset(spec, a_dir)
        generate_dataset(spec, b_dir)
        for name in sorted(p.name for p in a_dir.iterdir()):
            assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()
