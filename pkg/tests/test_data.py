import json

import numpy as np
import pytest

from sola import data, supervision
from sola.data import BlendRecipe, DatasetError, generate_dataset, load_dataset, make_source_images


@pytest.fixture(scope="module")
def sources():
    return make_source_images(4, seed=100)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory, sources):
    out = tmp_path_factory.mktemp("ds")
    generate_dataset(sources, BlendRecipe(), n_real=4, n_fake=4, seed=5, out_dir=out)
    return out


class TestSources:
    def test_shapes_and_dtype(self, sources):
        for img in sources:
            assert img.shape == (data.SOURCE_SIZE, data.SOURCE_SIZE, 3)
            assert img.dtype == np.uint8

    def test_deterministic(self):
        a = make_source_images(2, seed=1)
        b = make_source_images(2, seed=1)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_different_seeds_differ(self):
        a = make_source_images(1, seed=1)[0]
        b = make_source_images(1, seed=2)[0]
        assert not np.array_equal(a, b)


class TestRecipe:
    def test_rejects_unknown_family(self):
        with pytest.raises(ValueError, match="family"):
            BlendRecipe(family="star")

    def test_rejects_unknown_donor(self):
        with pytest.raises(ValueError, match="donor"):
            BlendRecipe(donor="paste")

    def test_rejects_bad_area_range(self):
        with pytest.raises(ValueError, match="area"):
            BlendRecipe(area_range=(0.5, 0.2))


class TestGenerate:
    def test_manifest_byte_identical_across_runs(self, tmp_path, sources):
        recipe = BlendRecipe(family="rectangle", blur_sigma=1.0)
        m1 = generate_dataset(sources, recipe, 3, 3, seed=9, out_dir=tmp_path / "a")
        m2 = generate_dataset(sources, recipe, 3, 3, seed=9, out_dir=tmp_path / "b")
        assert m1.read_bytes() == m2.read_bytes()
        img = "images/fake_00001.png"
        assert (tmp_path / "a" / img).read_bytes() == (tmp_path / "b" / img).read_bytes()

    @pytest.mark.parametrize("family", data.FAMILIES)
    def test_mask_area_fraction_in_range(self, tmp_path, sources, family):
        recipe = BlendRecipe(family=family, area_range=(0.08, 0.3))
        generate_dataset(sources, recipe, 0, 6, seed=13, out_dir=tmp_path)
        fakes = [s for s in load_dataset(tmp_path) if s.label == 1]
        assert len(fakes) == 6
        for s in fakes:
            assert 0.08 <= s.mask.mean() <= 0.3

    def test_degenerate_blend_equals_base_with_nonzero_mask(self, tmp_path, sources):
        # zero feather and an unjittered self-donor: pixels identical, mask real
        recipe = BlendRecipe(donor="color-jittered-self", jitter_strength=0.0, blur_sigma=0.0)
        rng = np.random.default_rng(21)
        base = data._random_crop(rng, sources[0], data.IMAGE_SIZE)
        image, mask = data.compose_fake(rng, recipe, base, sources, 0)
        assert mask.sum() > 0
        assert np.max(np.abs(image - base)) < 1e-12

    def test_too_few_sources_raise(self, tmp_path, sources):
        with pytest.raises(ValueError, match="at least 2"):
            generate_dataset(sources[:1], BlendRecipe(), 1, 1, seed=1, out_dir=tmp_path)

    def test_fake_masks_produce_nonzero_first_order_gt(self, small_dataset):
        for s in load_dataset(small_dataset):
            if s.label == 0:
                continue
            gt = supervision.anomaly_ground_truth(s.mask, 16)
            assert sum(g.sum() for g in gt.first_order.values()) > 0


class TestLoad:
    def test_round_trip_matches_manifest(self, small_dataset):
        records = [json.loads(l) for l in (small_dataset / "manifest.jsonl").read_text().splitlines()]
        samples = list(load_dataset(small_dataset))
        assert len(samples) == len(records)
        for s, rec in zip(samples, records):
            assert s.label == rec["label"]
            assert s.name == rec["file"]
            assert (s.mask is not None) == bool(rec["mask"])
            assert s.image.shape == (256, 256, 3)
            assert 0.0 <= s.image.min() and s.image.max() <= 1.0

    def test_shuffled_load_is_deterministic(self, small_dataset):
        a = [s.name for s in load_dataset(small_dataset, shuffle_seed=3)]
        b = [s.name for s in load_dataset(small_dataset, shuffle_seed=3)]
        c = [s.name for s in load_dataset(small_dataset, shuffle_seed=4)]
        assert a == b
        assert a != c

    def test_missing_file_error_names_it(self, tmp_path, sources):
        generate_dataset(sources, BlendRecipe(), 2, 2, seed=7, out_dir=tmp_path)
        (tmp_path / "images" / "fake_00001.png").unlink()
        with pytest.raises(DatasetError, match="fake_00001.png"):
            list(load_dataset(tmp_path))

    def test_corrupt_manifest_line_reported(self, tmp_path, sources):
        generate_dataset(sources, BlendRecipe(), 1, 1, seed=7, out_dir=tmp_path)
        manifest = tmp_path / "manifest.jsonl"
        manifest.write_text(manifest.read_text() + "{not json\n")
        with pytest.raises(DatasetError, match="line 3"):
            list(load_dataset(tmp_path))

    def test_non_binary_mask_rejected(self, tmp_path, sources):
        from PIL import Image

        generate_dataset(sources, BlendRecipe(), 1, 1, seed=7, out_dir=tmp_path)
        bad = np.full((256, 256), 128, dtype=np.uint8)
        Image.fromarray(bad).save(tmp_path / "masks" / "fake_00000.png")
        with pytest.raises(DatasetError, match="not binary"):
            list(load_dataset(tmp_path))
