import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from mrm.record_io import (
    MASK_ID, PAD_ID, UNK_ID, DimensionError, ManifestError, Record, Vocabulary, detokenize,
    downsample, load_manifest, patchify, read_image, synth_generate, synth_shape_classification,
    tokenize, unpatchify,
)


def _write_png(path, arr, mode="L"):
    Image.fromarray(arr).save(path)


class TestManifest:
    def test_three_lines_in_order(self, tmp_path):
        lines = []
        for i in range(3):
            _write_png(tmp_path / f"im{i}.png", np.full((8, 8), 40 * i, dtype=np.uint8))
            lines.append(json.dumps({"image": f"im{i}.png", "report": f"report {i}"}))
        (tmp_path / "m.jsonl").write_text("\n".join(lines) + "\n")
        recs = load_manifest(tmp_path / "m.jsonl")
        assert [r.report for r in recs] == ["report 0", "report 1", "report 2"]
        assert recs[2].image.shape == (8, 8, 1)
        assert recs[2].image[0, 0, 0] == pytest.approx(80 / 255)

    def test_missing_image_names_line(self, tmp_path):
        _write_png(tmp_path / "a.png", np.zeros((4, 4), dtype=np.uint8))
        (tmp_path / "m.jsonl").write_text(
            json.dumps({"image": "a.png", "report": "x"}) + "\n"
            + json.dumps({"image": "missing.png", "report": "y"}) + "\n")
        with pytest.raises(ManifestError, match="line 2") as err:
            load_manifest(tmp_path / "m.jsonl")
        assert err.value.line == 2

    def test_malformed_line(self, tmp_path):
        (tmp_path / "m.jsonl").write_text("{not json\n")
        with pytest.raises(ManifestError, match="line 1"):
            load_manifest(tmp_path / "m.jsonl")

    def test_missing_keys(self, tmp_path):
        (tmp_path / "m.jsonl").write_text(json.dumps({"image": "a.png"}) + "\n")
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "m.jsonl")

    def test_8bit_endpoints(self, tmp_path):
        arr = np.array([[0, 255], [255, 0]], dtype=np.uint8)
        _write_png(tmp_path / "a.png", arr)
        img = read_image(tmp_path / "a.png")
        assert img[0, 1, 0] == 1.0 and img[0, 0, 0] == 0.0

    def test_16bit_endpoints(self, tmp_path):
        arr = np.array([[0, 65535], [32768, 0]], dtype=np.uint16)
        Image.fromarray(arr).save(tmp_path / "a.png")
        img = read_image(tmp_path / "a.png")
        assert img[0, 1, 0] == 1.0
        assert img[1, 0, 0] == pytest.approx(32768 / 65535)


class TestDownsample:
    def test_block_mean(self):
        np.testing.assert_array_equal(downsample(np.array([[0.0, 1.0], [0.0, 1.0]])), [[0.5]])

    def test_constant(self):
        np.testing.assert_array_equal(downsample(np.full((4, 4), 0.25)), np.full((2, 2), 0.25))

    def test_vitb16_scale(self):
        assert downsample(np.zeros((448, 448, 1))).shape == (224, 224, 1)

    def test_odd_rejected(self):
        with pytest.raises(DimensionError):
            downsample(np.zeros((5, 4)))

    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_preserves_mean(self, h, w, seed):
        img = np.random.default_rng(seed).random((2 * h, 2 * w, 1))
        out = downsample(img)
        assert out.mean() == pytest.approx(img.mean(), abs=1e-12)
        assert out.min() >= 0 and out.max() <= 1


class TestPatchify:
    def test_counts(self):
        assert patchify(np.zeros((4, 4)), 2).shape == (4, 4)
        assert patchify(np.zeros((224, 224)), 16).shape == (196, 256)

    def test_row_major_order(self):
        img = np.arange(16, dtype=float).reshape(4, 4)
        patches = patchify(img, 2)
        # patch 1 is grid cell (0, 1): rows 0-1, cols 2-3
        np.testing.assert_array_equal(patches[1], [2, 3, 6, 7])
        np.testing.assert_array_equal(patches[2], [8, 9, 12, 13])

    def test_round_trip(self):
        img = np.random.default_rng(0).random((32, 32, 1))
        np.testing.assert_array_equal(unpatchify(patchify(img, 4), 4, 8, 8), img)

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
    @settings(max_examples=30)
    def test_bijection(self, p, rows, cols, c):
        img = np.random.default_rng(p * 100 + rows * 10 + cols).random((rows * p, cols * p, c))
        np.testing.assert_array_equal(unpatchify(patchify(img, p), p, rows, cols, c), img)

    def test_non_divisible(self):
        with pytest.raises(DimensionError):
            patchify(np.zeros((6, 6)), 4)


class TestTokenize:
    vocab = Vocabulary(["[PAD]", "[UNK]", "[MASK]", "un", "##able", "able", ".", "the"])

    def test_greedy_longest_match(self):
        assert tokenize("unable", self.vocab) == [3, 4]

    def test_whole_word_preferred(self):
        assert tokenize("able", self.vocab) == [5]

    def test_unknown_word(self):
        assert tokenize("zebra", self.vocab) == [UNK_ID]

    def test_partial_match_is_unk(self):
        # "unx": "un" matches but "##x" does not -> whole word is [UNK]
        assert tokenize("unx", self.vocab) == [UNK_ID]

    def test_lowercase_and_punctuation(self):
        assert tokenize("The Unable.", self.vocab) == [7, 3, 4, 6]

    def test_empty(self):
        assert tokenize("   ", self.vocab) == []

    def test_round_trip_in_vocab(self):
        text = "the unable . able"
        assert detokenize(tokenize(text, self.vocab), self.vocab) == text

    def test_deterministic(self):
        assert tokenize("unable the", self.vocab) == tokenize("unable the", self.vocab)


class TestVocabulary:
    def test_special_indices(self):
        v = Vocabulary.from_words(["a"])
        assert (v.pad_id, v.unk_id, v.mask_id) == (PAD_ID, UNK_ID, MASK_ID) == (0, 1, 2)

    def test_requires_specials(self):
        with pytest.raises(ValueError):
            Vocabulary(["a", "b", "c", "d"])

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            Vocabulary(["[PAD]", "[UNK]", "[MASK]", "a", "a"])

    def test_file_round_trip(self, tmp_path):
        v = Vocabulary.from_words(["x", "##y"])
        v.save(tmp_path / "vocab.txt")
        assert Vocabulary.load(tmp_path / "vocab.txt").tokens == v.tokens


class TestSynth:
    def test_deterministic(self):
        a, _ = synth_generate(4, seed=3, image_size=32)
        b, _ = synth_generate(4, seed=3, image_size=32)
        for x, y in zip(a, b):
            assert x.report == y.report
            assert x.image.tobytes() == y.image.tobytes()

    def test_seeds_differ(self):
        a, _ = synth_generate(4, seed=1, image_size=32)
        b, _ = synth_generate(4, seed=2, image_size=32)
        assert sum(r.image.sum() for r in a) != sum(r.image.sum() for r in b)

    def test_reports_fully_in_vocab(self):
        recs, vocab = synth_generate(50, seed=0, image_size=32)
        for r in recs:
            ids = tokenize(r.report, vocab)
            assert ids and UNK_ID not in ids

    def test_values_and_shape(self):
        recs, _ = synth_generate(10, seed=0, image_size=64)
        for r in recs:
            assert r.image.shape == (64, 64, 1)
            assert 0.0 <= r.image.min() and r.image.max() <= 1.0
            r.check_grid(4)

    def test_report_names_shape_quadrant(self):
        recs, _ = synth_generate(20, seed=5, image_size=64)
        for r in recs:
            n_shapes = r.report.count(" quadrant")
            assert 1 <= n_shapes <= 3

    def test_bad_count(self):
        with pytest.raises(ValueError):
            synth_generate(0, seed=0)

    def test_classification_set(self):
        x, y = synth_shape_classification(20, seed=0, image_size=32)
        assert x.shape == (20, 32, 32, 1) and y.shape == (20, 1)
        assert set(np.unique(y)) <= {0, 1}


def test_record_rejects_out_of_range():
    with pytest.raises(ValueError):
        Record(np.full((4, 4), 1.5), "x")
