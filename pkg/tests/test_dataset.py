import hashlib
import itertools

import numpy as np
import pytest

from chunkmix import dataset as ds
from chunkmix.dataset import DEFAULT_SPEC, DataFormatError, render

BG = np.array(ds.BACKGROUND, dtype=np.float32)


def bbox(labels, jitter=0):
    shape, hue, xpos, size = labels
    r = ds.SIZES[size]
    cx = 8 + ds.X_OFFSETS[xpos]
    cy = 8 + jitter
    return max(0, cy - r), min(16, cy + r), max(0, cx - r), min(16, cx + r)


class TestRender:
    @pytest.mark.parametrize("labels", list(itertools.product(range(3), range(4), range(3), range(2)))[::7])
    def test_outside_bbox_is_background(self, labels):
        img = render(labels)
        r0, r1, c0, c1 = bbox(labels)
        outside = np.ones((16, 16), bool)
        outside[r0:r1, c0:c1] = False
        for ch in range(3):
            assert np.all(img[ch][outside] == BG[ch])

    def test_large_centered_square(self):
        img = render((1, 2, 1, 1))
        hue = np.array(ds.HUES[2], dtype=np.float32)
        for ch in range(3):
            assert np.all(img[ch, 3:13, 3:13] == hue[ch])
            assert np.all(img[ch, :3] == BG[ch]) and np.all(img[ch, 13:] == BG[ch])

    def test_deterministic(self):
        assert render((2, 3, 0, 1)).tobytes() == render((2, 3, 0, 1)).tobytes()

    def test_out_of_range(self):
        with pytest.raises(DataFormatError, match="hue"):
            render((0, 4, 0, 0))

    def test_all_combinations_distinct(self):
        seen = {render(c).tobytes() for c in DEFAULT_SPEC.combinations()}
        assert len(seen) == 72

    def test_factor_identifiability(self):
        for combo in DEFAULT_SPEC.combinations():
            for f, card in enumerate(DEFAULT_SPEC.cardinalities):
                for v in range(card):
                    if v == combo[f]:
                        continue
                    other = list(combo)
                    other[f] = v
                    assert not np.array_equal(render(combo), render(other))

    def test_palette_separation(self):
        hues = np.array(ds.HUES)
        for a, b in itertools.combinations(range(len(hues)), 2):
            assert np.abs(hues[a] - hues[b]).max() >= 0.5


class TestGenerate:
    def test_default_counts(self):
        splits = ds.generate_arrays(0)
        assert len(splits["train"]) == 1440 and len(splits["test"]) == 360

    def test_stratified(self):
        splits = ds.generate_arrays(0, copies_per_combo=5)
        for name in ("train", "test"):
            combos = {tuple(r) for r in splits[name].labels}
            assert len(combos) == 72

    def test_labels_match_images(self):
        splits = ds.generate_arrays(1, copies_per_combo=3)
        for img, lab in zip(splits["test"].images, splits["test"].labels):
            assert any(np.array_equal(img, render(lab, j)) for j in (-1, 0, 1))

    def test_jitter_present(self):
        imgs = ds.generate_arrays(0, copies_per_combo=10)["train"].images[:8]
        assert len({i.tobytes() for i in imgs}) > 1

    def test_bad_copies(self):
        with pytest.raises(ValueError):
            ds.generate_arrays(0, copies_per_combo=0)


class TestFiles:
    def test_round_trip(self, tmp_path):
        manifest = ds.generate(tmp_path, seed=3, copies_per_combo=4)
        splits = ds.generate_arrays(3, copies_per_combo=4)
        for name in ("train", "test"):
            images, labels, m = ds.load(tmp_path, name)
            np.testing.assert_array_equal(images, splits[name].images)
            np.testing.assert_array_equal(labels, splits[name].labels)
            assert m.counts == manifest.counts
        assert m.cardinalities == (3, 4, 3, 2)

    def test_single_copy_has_empty_test_split(self, tmp_path):
        ds.generate(tmp_path, seed=0, copies_per_combo=1)
        images, labels, m = ds.load(tmp_path, "test")
        assert images.shape == (0, 3, 16, 16) and labels.shape == (0, 4)
        assert m.counts == {"train": 72, "test": 0}

    def test_same_seed_identical_bytes(self, tmp_path):
        digests = []
        for sub in ("a", "b"):
            ds.generate(tmp_path / sub, seed=9, copies_per_combo=2)
            digests.append({f: hashlib.sha256((tmp_path / sub / f).read_bytes()).hexdigest()
                            for f in ("train.bin", "test.bin", "manifest.txt")})
        assert digests[0] == digests[1]

    def test_offsets_consistent(self, tmp_path):
        m = ds.generate(tmp_path, seed=0, copies_per_combo=2)
        size = (tmp_path / "train.bin").stat().st_size
        assert size == m.offsets["header_bytes"] + m.counts["train"] * m.offsets["record_bytes"]

    def test_corrupt_magic(self, tmp_path):
        ds.generate(tmp_path, seed=0, copies_per_combo=2)
        p = tmp_path / "train.bin"
        p.write_bytes(b"XXDATA1\n" + p.read_bytes()[8:])
        with pytest.raises(DataFormatError, match="expected b'CMDATA1"):
            ds.load(tmp_path, "train")

    def test_truncated(self, tmp_path):
        ds.generate(tmp_path, seed=0, copies_per_combo=2)
        p = tmp_path / "test.bin"
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(DataFormatError, match="expected .* bytes"):
            ds.load(tmp_path, "test")

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match=str(blocker)):
            ds.generate(blocker / "sub", seed=0, copies_per_combo=1)
