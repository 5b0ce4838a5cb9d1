from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chunkmix import evaluation as ev
from chunkmix.evaluation import EvaluationError
from chunkmix.mixing import Mask, mix
from chunkmix.models import Model

from conftest import ChunkZeroDecoder, IdentityNets
from oracles import breakpoint_interval, brute_force_ap, brute_force_map, grid_bias, two_pass_centroid


# ---------------------------------------------------------------------------
# retrieval

class TestRetrieval:
    def test_perfect_clusters(self):
        x = np.array([[0.0], [0.1], [5.0], [5.1]])
        assert ev.mean_average_precision(x, np.array([0, 0, 1, 1])) == 1.0

    def test_hand_ranking(self):
        # query 0 sees [wrong, right, right]
        x = np.array([[0.0], [2.0], [3.0], [1.0]])
        aps = ev.query_average_precisions(x, np.array([0, 0, 0, 1]))
        assert aps[0] == (1 / 2 + 2 / 3) / 2
        assert Fraction(aps[0]).limit_denominator(100) == Fraction(7, 12)

    def test_ties_break_by_index(self):
        # both neighbours of query 0 sit at the same distance; the lower index ranks first
        x = np.array([[0.0], [1.0], [-1.0]])
        assert ev.query_average_precisions(x, np.array([0, 1, 0]))[0] == 0.5
        assert ev.query_average_precisions(x, np.array([0, 0, 1]))[0] == 1.0

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 65))
        x = rng.integers(-2, 3, size=(n, int(rng.integers(1, 4))))  # small ints: many exact ties
        labels = rng.integers(0, int(rng.integers(2, 5)), size=n)
        labels[:3] = (0, 0, 1)   # two classes present and at least one query with a relevant item
        ours = ev.query_average_precisions(x, labels)
        oracle = brute_force_ap(x, labels)
        for a, b in zip(ours, oracle):
            assert (b is None and np.isnan(a)) or a == b
        assert ev.mean_average_precision(x, labels) == brute_force_map(x, labels)

    def test_random_features_near_prior(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(360, 8))
        labels = np.repeat([0, 1], 180)
        assert 0.48 <= ev.mean_average_precision(x, labels) <= 0.52

    def test_single_class_rejected(self):
        with pytest.raises(EvaluationError, match="2 label classes"):
            ev.mean_average_precision(np.zeros((4, 2)), np.zeros(4))

    def test_too_few_items(self):
        with pytest.raises(EvaluationError):
            ev.mean_average_precision(np.zeros((1, 2)), np.zeros(1))

    def test_all_singletons_rejected(self):
        with pytest.raises(EvaluationError, match="relevant"):
            ev.mean_average_precision(np.arange(3.0)[:, None], np.arange(3))


class TestBestChunkTable:
    def test_single_chunk(self):
        rng = np.random.default_rng(1)
        table = ev.best_chunk_table(rng.normal(size=(20, 3)), rng.integers(0, 2, size=(20, 2)), 1, 3)
        np.testing.assert_array_equal(table.best_chunk, [0, 0])
        assert table.as_array().shape == (2, 3)

    def test_selects_informative_chunk(self):
        rng = np.random.default_rng(2)
        labels = np.column_stack([np.repeat([0, 1], 20), np.tile([0, 1], 20)])
        feats = rng.normal(size=(40, 6)) * 0.1
        feats[:, 2:4] += labels[:, :1] * 3   # chunk 1 encodes factor 0
        feats[:, 4:6] += labels[:, 1:] * 3   # chunk 2 encodes factor 1
        table = ev.best_chunk_table(feats, labels, 3, 2)
        np.testing.assert_array_equal(table.best_chunk, [1, 2])
        assert table.as_array().shape == (2, 5)
        assert table.average == pytest.approx(1.0)

    def test_ties_pick_lowest_chunk(self):
        feats = np.tile(np.arange(8.0)[:, None], (1, 4))   # two identical chunks
        table = ev.best_chunk_table(feats, np.repeat([0, 1], 4)[:, None], 2, 2)
        assert table.best_chunk[0] == 0

    def test_tsv(self):
        feats = np.arange(8.0)[:, None]
        text = ev.best_chunk_table(feats, np.repeat([0, 1], 4)[:, None], 1, 1).to_tsv(["size"])
        lines = text.splitlines()
        assert lines[0] == "factor\tchunk0\tbest_chunk\tbest_mAP"
        assert lines[1].startswith("size\t") and lines[-1].startswith("average\t")

    def test_mismatched_rows(self):
        with pytest.raises(EvaluationError, match="label rows"):
            ev.FeatureMatrix(np.zeros((3, 2)), np.zeros((4, 1)), 1, 2)

    def test_non_finite(self):
        with pytest.raises(EvaluationError, match="non-finite"):
            ev.FeatureMatrix(np.full((3, 2), np.nan), np.zeros((3, 1)), 1, 2)


# ---------------------------------------------------------------------------
# probe

class TestProbe:
    def test_hand_example(self):
        f = np.array([[2.0, 0.0], [4.0, 0.0], [0.0, 2.0], [0.0, 4.0]])
        c = np.array([1, 1, -1, -1])
        probe = ev.fit_probe(f, c, normalize=False)
        np.testing.assert_array_equal(probe.w, [3.0, -3.0])
        assert probe.b == -5.0
        acc, _ = ev.linear_probe(f, c, f, c, normalize=False)
        assert acc == 1.0

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_oracles(self, seed):
        rng = np.random.default_rng(seed)
        f = rng.normal(size=(16, 3)) * rng.uniform(0.5, 3.0, size=3) + rng.normal(size=3)
        c = np.where(rng.random(16) < 0.5, 1, -1)
        c[:2] = (1, -1)
        probe = ev.fit_probe(f, c)
        np.testing.assert_allclose(probe.w, two_pass_centroid(f, c), rtol=0, atol=1e-12)

        s = (f / probe.scales) @ probe.w
        b_grid, grid_loss = grid_bias(s, c.astype(float))
        ours_loss = ev.hinge_loss(s, c.astype(float), probe.b)[0]
        assert ours_loss <= grid_loss + 1e-9
        lo, hi = breakpoint_interval(s, c, b_grid)
        assert lo - 1e-3 <= probe.b <= hi + 1e-3

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-3, 1e3), st.integers(0, 10_000))
    def test_positive_rescaling_invariance(self, scale, seed):
        rng = np.random.default_rng(seed)
        f = rng.normal(size=(24, 4))
        c = np.where(np.arange(24) % 2 == 0, 1, -1)
        test = rng.normal(size=(50, 4))
        a = ev.fit_probe(f, c).predict(test)
        b = ev.fit_probe(f * scale, c).predict(test * scale)
        assert a.tobytes() == b.tobytes()

    def test_scales_positive(self):
        f = np.zeros((6, 3))
        f[:3, 0] = 1.0
        probe = ev.fit_probe(f, np.array([1, 1, 1, -1, -1, -1]))
        assert np.all(probe.scales > 0)

    def test_uninformative(self):
        rng = np.random.default_rng(0)
        f, t = rng.normal(size=(400, 4)), rng.normal(size=(2000, 4))
        c = np.where(rng.random(400) < 0.5, 1, -1)
        ct = np.where(rng.random(2000) < 0.5, 1, -1)
        acc, _ = ev.linear_probe(f, c, t, ct)
        assert 0.45 < acc < 0.55

    def test_single_class(self):
        with pytest.raises(EvaluationError, match="both classes"):
            ev.fit_probe(np.zeros((3, 2)), np.ones(3))

    def test_bad_labels(self):
        with pytest.raises(EvaluationError, match=r"\+1 or -1"):
            ev.fit_probe(np.zeros((3, 2)), np.array([1, -1, 0]))

    def test_probe_factor_separable(self):
        y = np.repeat([0, 1, 2], 10)
        x = np.eye(3)[y] + np.random.default_rng(0).normal(size=(30, 3)) * 0.05
        assert ev.probe_factor(x, y, x, y) == 1.0


# ---------------------------------------------------------------------------
# grids

@pytest.fixture(scope="module")
def small_model():
    return Model.init(0, widths=(8, 8, 8))


@pytest.fixture
def sources():
    rng = np.random.default_rng(5)
    return rng.random((3, 3, 16, 16)), rng.random((4, 3, 16, 16))


def cell(grid, i, j):
    return grid[:, i * 16:(i + 1) * 16, j * 16:(j + 1) * 16]


class TestTransferGrid:
    def test_shape_and_borders(self, small_model, sources):
        rows, cols = sources
        grid = ev.transfer_grid(small_model, rows, cols, 1)
        assert grid.shape == (3, 64, 80)
        assert np.all(cell(grid, 0, 0) == 0)
        for j in range(4):
            np.testing.assert_array_equal(cell(grid, 0, j + 1), cols[j])
        for i in range(3):
            np.testing.assert_array_equal(cell(grid, i + 1, 0), rows[i])

    def test_identity_whole_feature(self, sources):
        rows, cols = sources
        grid = ev.transfer_grid(IdentityNets(), rows, cols, [0, 1, 2, 3])
        for i in range(3):
            for j in range(4):
                np.testing.assert_array_equal(cell(grid, i + 1, j + 1), cols[j])

    def test_self_mix_reconstructs(self, small_model, sources):
        x = sources[0][:1]
        recon = small_model.decode(small_model.encode(x), "infer").numpy()[0]
        for k in range(small_model.n):
            grid = ev.transfer_grid(small_model, x, x, k)
            assert cell(grid, 1, 1).tobytes() == recon.tobytes()

    def test_composed_swaps_give_source(self, small_model, sources):
        a, b = sources[0][:1], sources[1][:1]
        fa, fb = small_model.encode(a), small_model.encode(b)
        cur = fb
        for k in range(small_model.n):
            bits = np.zeros((1, small_model.n), dtype=np.int64)
            bits[0, k] = 1
            cur = mix(fa, cur, Mask(bits))
        target = small_model.decode(fa, "infer").numpy()
        assert small_model.decode(cur, "infer").numpy().tobytes() == target.tobytes()
        grid = ev.transfer_grid(small_model, b, a, list(range(small_model.n)))
        assert cell(grid, 1, 1).tobytes() == target[0].tobytes()

    def test_chunk_out_of_range(self, small_model, sources):
        with pytest.raises(EvaluationError, match="out of range"):
            ev.transfer_grid(small_model, *sources, 4)

    def test_empty_sources(self, small_model, sources):
        with pytest.raises(EvaluationError):
            ev.transfer_grid(small_model, sources[0][:0], sources[1], 0)


class TestPPM:
    def test_rounding_half_up(self):
        img = ev.to_bytes_image(np.array([0.5 / 255, 0.0, 1.0, 254.5 / 255]).reshape(1, 1, 4).repeat(3, 0))
        np.testing.assert_array_equal(img[0, :, 0], [1, 0, 255, 255])

    def test_round_trip_and_sources(self, tmp_path, small_model, sources):
        rows, cols = sources
        grid = ev.transfer_grid(small_model, rows, cols, 0)
        path = tmp_path / "g.ppm"
        ev.write_ppm(path, grid)
        assert path.read_bytes().startswith(b"P6\n80 64\n255\n")
        img = ev.read_ppm(path)
        assert img.shape == (64, 80, 3)
        for j in range(4):
            assert img[:16, (j + 1) * 16:(j + 2) * 16].tobytes() == ev.to_bytes_image(cols[j]).tobytes()
        for i in range(3):
            assert img[(i + 1) * 16:(i + 2) * 16, :16].tobytes() == ev.to_bytes_image(rows[i]).tobytes()

    def test_not_ppm(self, tmp_path):
        p = tmp_path / "x.ppm"
        p.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(EvaluationError, match="binary PPM"):
            ev.read_ppm(p)


# ---------------------------------------------------------------------------
# shortcut diagnostics

class TestShortcut:
    def test_chunk_zero_decoder(self, small_splits):
        rep = ev.shortcut_report(ChunkZeroDecoder(), small_splits["test"].images, pairs=1024)
        assert rep.sensitivity[0] > 1e-3
        np.testing.assert_array_equal(rep.dead, [False, True, True, True])

    @pytest.mark.parametrize("seed", range(3))
    def test_untrained_has_no_dead_chunks(self, seed, small_splits):
        rep = ev.shortcut_report(Model.init(seed), small_splits["test"].images, mode="train")
        assert rep.dead_count == 0

    def test_train_mode_leaves_running_stats(self, small_model, small_splits):
        before = {k: v.copy() for k, v in small_model.state_arrays().items()}
        ev.shortcut_report(small_model, small_splits["test"].images, pairs=16, mode="train")
        for k, v in small_model.state_arrays().items():
            assert v.tobytes() == before[k].tobytes()

    def test_tsv(self, small_splits):
        text = ev.shortcut_report(ChunkZeroDecoder(), small_splits["test"].images, pairs=32).to_tsv()
        lines = text.splitlines()
        assert lines[0] == "chunk\tsensitivity\tcls_accuracy\tdead" and len(lines) == 5


def test_encode_images_batches_consistently(small_model, small_splits):
    imgs = small_splits["test"].images[:10]
    np.testing.assert_allclose(ev.encode_images(small_model, imgs, batch=3),
                               ev.encode_images(small_model, imgs), rtol=1e-10, atol=1e-18)


def test_curve_tsv():
    assert ev.curve_tsv([(2, 0.5), (4, 0.61234)]) == "chunk_size\tmean_mAP\n2\t0.5000\n4\t0.6123\n"
