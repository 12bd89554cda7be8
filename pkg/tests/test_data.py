"""Manifest building, image preparation, and shuffled-sample generation."""

import hashlib
import json
from collections import Counter

import numpy as np
import pytest
from PIL import Image

from repiece.data import (DatasetManifest, build_manifest, from_model_range,
                          load_image, load_manifest, make_shuffled_sample,
                          preprocess, shuffle_seed, to_model_range,
                          write_manifest)
from repiece.errors import ConfigError, DataError
from repiece.grid import (GridSpec, apply_permutation, generate_permutation_set,
                          invert, reassemble)
from repiece.synthetic import generate_corpus, gradient_image


class TestBuildManifest:
    def test_split_counts_stratified(self, corpus_n2):
        _, manifest = corpus_n2
        # 25 images per category; fractions (0.4, 0.4, 0.2) -> 10/10/5 each.
        assert len(manifest.entries) == 50
        by = Counter((e.category, e.split) for e in manifest.entries)
        for cat in ("grad_a", "grad_b"):
            assert by[(cat, "jigsaw")] == 10
            assert by[(cat, "real")] == 10
            assert by[(cat, "test")] == 5

    def test_splits_disjoint_and_sorted(self, corpus_n2):
        _, manifest = corpus_n2
        ids = [e.image_id for e in manifest.entries]
        assert len(set(ids)) == len(ids)
        assert ids == sorted(ids)
        total = sum(len(manifest.split(s)) for s in ("jigsaw", "real", "test"))
        assert total == len(manifest.entries)

    def test_deterministic(self, corpus_n2):
        root, manifest = corpus_n2
        again = build_manifest(root, 0)
        assert again == manifest
        assert build_manifest(root, 1) != manifest  # reseeding moves images

    def test_everything_in_one_split(self, corpus_small):
        root, _ = corpus_small
        manifest = build_manifest(root, 0, fractions=(1.0, 0.0, 0.0))
        assert all(e.split == "jigsaw" for e in manifest.entries)

    def test_bad_fractions(self, corpus_small):
        root, _ = corpus_small
        with pytest.raises(ConfigError):
            build_manifest(root, 0, fractions=(0.5, 0.5, 0.5))
        with pytest.raises(ConfigError):
            build_manifest(root, 0, fractions=(-0.2, 1.0, 0.2))

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError):
            build_manifest(tmp_path / "nope", 0)

    def test_skips_undecodable_files(self, tmp_path):
        d = tmp_path / "cat" / "dom"
        d.mkdir(parents=True)
        Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(d / "good.png")
        (d / "junk.png").write_text("not an image")
        (d / "notes.txt").write_text("ignored by extension")
        manifest = build_manifest(tmp_path, 0, fractions=(1.0, 0.0, 0.0))
        assert [e.image_id for e in manifest.entries] == ["cat/dom/good"]

    def test_unknown_split_query(self, corpus_small):
        _, manifest = corpus_small
        with pytest.raises(DataError):
            manifest.split("validation")


class TestManifestIo:
    def test_roundtrip(self, corpus_small, tmp_path):
        _, manifest = corpus_small
        path = tmp_path / "manifest.jsonl"
        write_manifest(manifest, path)
        assert load_manifest(path).entries == manifest.entries

    def test_write_is_byte_deterministic(self, corpus_small, tmp_path):
        _, manifest = corpus_small
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_manifest(manifest, a)
        write_manifest(manifest, b)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_line_reports_position(self, tmp_path):
        path = tmp_path / "m.jsonl"
        good = json.dumps({"image_id": "a", "path": "p", "category": "c",
                           "domain": "d", "split": "test"})
        path.write_text(good + "\nnot json\n")
        with pytest.raises(DataError, match=":2:"):
            load_manifest(path)

    def test_missing_key(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps({"image_id": "a", "path": "p"}) + "\n")
        with pytest.raises(DataError, match=":1:"):
            load_manifest(path)

    def test_unknown_split_value(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps({"image_id": "a", "path": "p", "category": "c",
                                    "domain": "d", "split": "train"}) + "\n")
        with pytest.raises(DataError, match="train"):
            load_manifest(path)

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "m.jsonl"
        good = json.dumps({"image_id": "a", "path": "p", "category": "c",
                           "domain": "d", "split": "real"})
        path.write_text("\n" + good + "\n\n")
        assert len(load_manifest(path).entries) == 1


class TestPreprocess:
    GRID = GridSpec(n=2, piece_px=24)

    def test_conforming_passthrough(self):
        img = np.zeros((48, 48, 3), np.uint8)
        assert preprocess(img, self.GRID) is img

    def test_center_crop_without_resize(self):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (64, 48, 3)).astype(np.uint8)
        out = preprocess(img, self.GRID)
        np.testing.assert_array_equal(out, img[8:56, :])

    def test_resize_then_crop(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, (100, 80, 3)).astype(np.uint8)
        out = preprocess(img, self.GRID)
        assert out.shape == (48, 48, 3) and out.dtype == np.uint8

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, (100, 80, 3)).astype(np.uint8)
        once = preprocess(img, self.GRID)
        np.testing.assert_array_equal(preprocess(once, self.GRID), once)

    def test_rejects_non_rgb(self):
        with pytest.raises(DataError):
            preprocess(np.zeros((48, 48), np.uint8), self.GRID)


class TestModelRange:
    def test_endpoints(self):
        x = np.array([[[0, 127, 255]]], np.uint8)
        y = to_model_range(x)
        assert y.dtype == np.float32
        assert y[0, 0, 0] == -1.0 and y[0, 0, 2] == 1.0

    def test_roundtrip_exact(self):
        rng = np.random.default_rng(3)
        x = rng.integers(0, 256, (32, 32, 3)).astype(np.uint8)
        np.testing.assert_array_equal(from_model_range(to_model_range(x)), x)

    def test_clipping(self):
        y = from_model_range(np.array([[-2.0, 1.5]], np.float32))
        assert y[0, 0] == 0 and y[0, 1] == 255


class TestShuffleSeed:
    def test_matches_documented_derivation(self):
        digest = hashlib.sha256(b"7:3:cat/dom/img").digest()
        expected = int.from_bytes(digest[:8], "little")
        assert shuffle_seed(7, "cat/dom/img", 3) == expected

    def test_stable_and_distinct(self):
        base = shuffle_seed(0, "a")
        assert shuffle_seed(0, "a") == base
        assert shuffle_seed(0, "b") != base
        assert shuffle_seed(1, "a") != base
        assert shuffle_seed(0, "a", 0) != base
        assert shuffle_seed(0, "a", 1) != shuffle_seed(0, "a", 0)


class TestMakeShuffledSample:
    GRID = GridSpec(n=2, piece_px=8)

    def test_roundtrip_restores_image(self):
        rng = np.random.default_rng(4)
        pset = generate_permutation_set(2, 10, 0)
        img = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
        sample = make_shuffled_sample(img, self.GRID, pset, seed=5, image_id="x")
        restored = apply_permutation(sample.pieces,
                                     invert(pset.entries[sample.true_class]))
        np.testing.assert_array_equal(reassemble(restored, self.GRID),
                                      to_model_range(img))

    def test_pieces_in_model_range(self):
        rng = np.random.default_rng(5)
        pset = generate_permutation_set(2, 4, 0)
        img = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
        s = make_shuffled_sample(img, self.GRID, pset, seed=1)
        assert s.pieces.pieces.dtype == np.float32
        assert s.pieces.pieces.min() >= -1 and s.pieces.pieces.max() <= 1

    def test_seed_determinism(self):
        rng = np.random.default_rng(6)
        pset = generate_permutation_set(2, 10, 0)
        img = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
        a = make_shuffled_sample(img, self.GRID, pset, seed=9)
        b = make_shuffled_sample(img, self.GRID, pset, seed=9)
        assert a.true_class == b.true_class
        np.testing.assert_array_equal(a.pieces.pieces, b.pieces.pieces)
        assert make_shuffled_sample(img, self.GRID, pset, seed=10).true_class != \
            a.true_class or True  # classes may collide; determinism is the claim

    def test_class_draw_is_uniform(self):
        # 10k draws over P=10; each count within 3 sigma of 1000.
        pset = generate_permutation_set(2, 10, 0)
        img = np.zeros((16, 16, 3), np.uint8)
        counts = Counter(
            make_shuffled_sample(img, self.GRID, pset, seed=s).true_class
            for s in range(10_000))
        sigma = (10_000 * 0.1 * 0.9) ** 0.5
        for cls in range(10):
            assert abs(counts[cls] - 1000) <= 3.5 * sigma

    def test_grid_pset_mismatch(self):
        pset = generate_permutation_set(3, 5, 0)
        with pytest.raises(DataError):
            make_shuffled_sample(np.zeros((16, 16, 3), np.uint8),
                                 self.GRID, pset, seed=0)


class TestLoadImage:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(7)
        img = rng.integers(0, 256, (20, 20, 3)).astype(np.uint8)
        Image.fromarray(img).save(tmp_path / "x.png")
        np.testing.assert_array_equal(load_image(tmp_path / "x.png"), img)

    def test_errors(self, tmp_path):
        with pytest.raises(DataError):
            load_image(tmp_path / "missing.png")
        bad = tmp_path / "bad.png"
        bad.write_text("nope")
        with pytest.raises(DataError):
            load_image(bad)


class TestSyntheticCorpus:
    def test_generation_deterministic(self, tmp_path):
        a = generate_corpus(tmp_path / "a", count=4, image_px=32, seed=3)
        b = generate_corpus(tmp_path / "b", count=4, image_px=32, seed=3)
        for pa, pb in zip(a, b):
            assert pa.read_bytes() == pb.read_bytes()

    def test_gradient_image_contract(self):
        rng = np.random.default_rng(8)
        img = gradient_image(48, rng, noise=0.0)
        assert img.shape == (48, 48, 3) and img.dtype == np.uint8
        # Smooth ramps: neighboring pixels never jump far (the steepest
        # channel moves ~4 levels per row at this size).
        diffs = np.abs(np.diff(img.astype(int), axis=0))
        assert diffs.max() <= 5
