"""Synthetic slide generation, split bookkeeping, and the binary format."""

import json

import numpy as np
import pytest

from abxmil.errors import ConfigError, ValidationError
from abxmil.synthdata import (
    DatasetConfig,
    config_hash,
    load_dataset,
    make_dataset,
    make_slide,
    region_bins,
    save_dataset,
    slide_from_bytes,
    slide_to_bytes,
    with_regions,
)


def small_config(**over):
    base = dict(n_slides=10, instances_min=30, instances_max=40, witness_rate=0.2,
                raw_dim=8, n_classes=2, separation=3.0, noise_sigma=1.0,
                region_grid=2, n_scales=2, bg_components=2, seed=7)
    base.update(over)
    return DatasetConfig(**base)


class TestMakeSlide:
    def test_full_witness_rate(self):
        cfg = small_config(witness_rate=1.0)
        slide = make_slide(cfg, 1, np.random.default_rng(0))
        assert slide.roles.all()

    def test_class_zero_has_no_witnesses(self):
        slide = make_slide(small_config(), 0, np.random.default_rng(1))
        assert slide.n_discriminative == 0

    def test_witness_count_rounds(self):
        cfg = small_config(instances_min=200, instances_max=200, witness_rate=0.05)
        slide = make_slide(cfg, 1, np.random.default_rng(2))
        assert slide.n_discriminative == 10

    def test_positive_slide_keeps_at_least_one_witness(self):
        cfg = small_config(instances_min=5, instances_max=5, witness_rate=0.01)
        slide = make_slide(cfg, 1, np.random.default_rng(3))
        assert slide.n_discriminative == 1

    def test_roles_partition_instances(self):
        slide = make_slide(small_config(), 1, np.random.default_rng(4))
        assert slide.n_discriminative + len(slide.noisy_indices()) == slide.n_instances

    def test_views_shape_and_scale_zero_is_raw(self):
        slide = make_slide(small_config(), 1, np.random.default_rng(5))
        t, s, d = slide.views.shape
        assert (t, d) == (2, 8) and s == slide.n_instances
        np.testing.assert_array_equal(slide.instances, slide.views[0])

    def test_nonbase_scale_is_rigid_up_to_jitter(self):
        """Orthogonal maps preserve norms, so view-1 norms track raw norms."""
        cfg = small_config(scale_noise=0.0)
        slide = make_slide(cfg, 1, np.random.default_rng(6))
        np.testing.assert_allclose(np.linalg.norm(slide.views[1], axis=1),
                                   np.linalg.norm(slide.views[0], axis=1), atol=1e-9)


class TestMakeDataset:
    def test_seven_three_split(self):
        ds = make_dataset(small_config())
        assert len(ds.train) == 7 and len(ds.test) == 3

    def test_same_seed_same_manifest(self):
        a = make_dataset(small_config())
        b = make_dataset(small_config())
        assert a.manifest == b.manifest

    def test_class_balance(self):
        ds = make_dataset(small_config(n_slides=11, n_classes=3, raw_dim=8))
        counts = np.bincount([s.label for s in ds.all_slides()], minlength=3)
        assert counts.max() - counts.min() <= 1

    def test_manifest_records_hash_and_roles(self):
        cfg = small_config()
        ds = make_dataset(cfg)
        assert ds.manifest["config_hash"] == config_hash(cfg)
        for entry in ds.manifest["slides"]:
            assert entry["n_discriminative"] >= (1 if entry["label"] > 0 else 0)

    def test_validation(self):
        with pytest.raises(ConfigError, match="witness_rate"):
            make_dataset(small_config(witness_rate=1.5))
        with pytest.raises(ConfigError):
            make_dataset(small_config(n_classes=1))


class TestPersistence:
    def test_slide_bytes_roundtrip(self):
        slide = make_slide(small_config(), 1, np.random.default_rng(8), slide_id=3)
        blob = slide_to_bytes(slide)
        back = slide_from_bytes(blob, 3)
        np.testing.assert_array_equal(back.views, slide.views)
        np.testing.assert_array_equal(back.coords, slide.coords)
        np.testing.assert_array_equal(back.region_ids, slide.region_ids)
        np.testing.assert_array_equal(back.roles, slide.roles)
        assert back.label == slide.label
        assert slide_to_bytes(back) == blob

    def test_dataset_roundtrip_bitwise(self, tmp_path):
        ds = make_dataset(small_config())
        save_dataset(ds, tmp_path / "a")
        loaded = load_dataset(tmp_path / "a")
        save_dataset(loaded, tmp_path / "b")
        for entry in ds.manifest["slides"]:
            a = (tmp_path / "a" / entry["file"]).read_bytes()
            b = (tmp_path / "b" / entry["file"]).read_bytes()
            assert a == b
        assert ((tmp_path / "a" / "manifest.json").read_bytes()
                == (tmp_path / "b" / "manifest.json").read_bytes())

    def test_bad_magic_rejected(self):
        slide = make_slide(small_config(), 0, np.random.default_rng(9))
        blob = b"XXXX" + slide_to_bytes(slide)[4:]
        with pytest.raises(ValidationError):
            slide_from_bytes(blob, 0)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ConfigError):
            load_dataset(tmp_path)


class TestRegions:
    def test_grid_assignment(self):
        coords = np.array([[0.1, 0.1], [0.9, 0.1], [0.1, 0.9], [0.9, 0.9]])
        np.testing.assert_array_equal(region_bins(coords, 4), [0, 1, 2, 3])

    def test_rebinning(self):
        slide = make_slide(small_config(), 1, np.random.default_rng(10))
        two = with_regions(slide, 2)
        assert set(np.unique(two.region_ids)) <= {0, 1}
        assert two.views is slide.views  # same payload, new binning


def test_linear_probe_separates_roles_at_4_sigma():
    """Ridge probe on raw views: witnesses vs background > 90% accurate."""
    cfg = small_config(n_slides=30, separation=4.0, witness_rate=0.3)
    ds = make_dataset(cfg)
    xs, ys = [], []
    for slide in ds.all_slides():
        xs.append(slide.instances)
        ys.append(np.where(slide.roles, 1.0, -1.0))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    half = len(x) // 2
    w = np.linalg.solve(x[:half].T @ x[:half] + 1e-3 * np.eye(cfg.raw_dim),
                        x[:half].T @ y[:half])
    acc = np.mean(np.sign(x[half:] @ w) == y[half:])
    assert acc > 0.9
