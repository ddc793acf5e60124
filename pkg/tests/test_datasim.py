import itertools

import numpy as np
import pytest

from bbsoftmax.datasim import (
    Basket,
    BasketSet,
    LabeledData,
    SplitSpec,
    gen_synthetic,
    geometric_probs,
    load_baskets,
    overlap_probs,
    overlap_ratio,
    save_baskets,
    single_basket,
    split_dataset,
    to_labeled,
)


class TestSplitSpec:
    def test_probs_must_sum_to_one(self):
        with pytest.raises(ValueError):
            SplitSpec(2, (0.5, 0.6), seed=0)

    def test_negative_prob_rejected(self):
        with pytest.raises(ValueError):
            SplitSpec(2, (1.5, -0.5), seed=0)

    def test_length_must_match_parts(self):
        with pytest.raises(ValueError):
            SplitSpec(3, (0.5, 0.5), seed=0)


class TestOverlapProbs:
    def test_extremes_and_interior(self):
        assert overlap_probs(1.0) == (0.0, 1.0)
        assert overlap_probs(0.0) == (1.0, 0.0)
        assert overlap_probs(0.3) == pytest.approx((0.7, 0.3))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            overlap_probs(1.2)


class TestGeometricProbs:
    def test_last_probability_value(self):
        probs = geometric_probs(10)
        assert probs[9] == pytest.approx(2 / (3**10 - 1), rel=1e-12)

    def test_ratio_is_three(self):
        probs = geometric_probs(10)
        for a, b in zip(probs, probs[1:]):
            assert a / b == pytest.approx(3.0, rel=1e-12)

    def test_two_parts(self):
        assert geometric_probs(2) == pytest.approx((0.75, 0.25))

    def test_sums_to_one(self):
        for k in (2, 5, 10):
            assert sum(geometric_probs(k)) == pytest.approx(1.0, abs=1e-12)


class TestOverlapRatio:
    def _basket(self, globals_):
        n = len(globals_)
        return Basket(np.zeros((n, 2), dtype=np.float32),
                      np.arange(1, n + 1), np.asarray(globals_))

    def test_identical_sets(self):
        a = self._basket([1, 2, 3])
        assert overlap_ratio(a, a) == 1.0

    def test_disjoint_sets(self):
        assert overlap_ratio(self._basket([1, 2]), self._basket([3, 4])) == 0.0

    def test_partial(self):
        a = self._basket([1, 2, 3])
        b = self._basket([3, 4])
        assert overlap_ratio(a, b) == pytest.approx(0.25)


class TestSplitDataset:
    def test_no_overlap_probs_give_disjoint_baskets(self):
        data = gen_synthetic(40, 4, 3, 0.1, seed=0)
        bs = split_dataset(data, SplitSpec(2, (1.0, 0.0), seed=1))
        a, b = bs.baskets
        assert not (a.class_set & b.class_set)

    def test_full_overlap_probs_put_every_class_in_both(self):
        data = gen_synthetic(40, 4, 3, 0.1, seed=0)
        bs = split_dataset(data, SplitSpec(2, (0.0, 1.0), seed=1))
        a, b = bs.baskets
        assert a.class_set == b.class_set
        assert overlap_ratio(a, b) == 1.0

    def test_half_overlap_statistics(self):
        data = gen_synthetic(10_000, 2, 2, 0.0, seed=2)
        bs = split_dataset(data, SplitSpec(2, overlap_probs(0.5), seed=3))
        measured = overlap_ratio(bs.baskets[0], bs.baskets[1])
        assert measured == pytest.approx(0.5, abs=0.02)

    def test_sample_multiset_preserved(self):
        data = gen_synthetic(30, 5, 4, 0.2, seed=4)
        bs = split_dataset(data, SplitSpec(3, (0.2, 0.5, 0.3), seed=5))
        assert bs.total_samples() == len(data)
        orig = np.sort(data.features.reshape(-1))
        got = np.sort(np.concatenate([b.features for b in bs.baskets])
                      .reshape(-1))
        np.testing.assert_array_equal(orig, got)

    def test_each_class_occupies_drawn_basket_count(self):
        data = gen_synthetic(200, 5, 2, 0.0, seed=6)
        bs = split_dataset(data, SplitSpec(3, (0.2, 0.5, 0.3), seed=7))
        counts = {}
        for b in bs.baskets:
            for g in b.class_set:
                counts[g] = counts.get(g, 0) + 1
        assert set(counts) == set(range(1, 201))
        assert all(1 <= c <= 3 for c in counts.values())
        # with 5 samples per class nothing caps below the draw
        assert any(c > 1 for c in counts.values())

    def test_within_basket_class_unique_and_labels_contiguous(self):
        data = gen_synthetic(50, 6, 3, 0.1, seed=8)
        bs = split_dataset(data, SplitSpec(4, (0.1, 0.2, 0.3, 0.4), seed=9))
        for b in bs.baskets:
            per_label = {}
            for l, g in zip(b.local_labels, b.global_classes):
                per_label.setdefault(int(l), set()).add(int(g))
            assert all(len(v) == 1 for v in per_label.values())
            assert sorted(per_label) == list(range(1, b.num_classes + 1))

    def test_multiplicity_capped_by_sample_count(self):
        data = gen_synthetic(30, 1, 2, 0.0, seed=10)
        bs = split_dataset(data, SplitSpec(3, (0.0, 0.0, 1.0), seed=11))
        counts = {}
        for b in bs.baskets:
            for g in b.class_set:
                counts[g] = counts.get(g, 0) + 1
        assert all(c == 1 for c in counts.values())

    def test_multiplicity_frequencies_match_probs(self):
        probs = (0.55, 0.3, 0.15)
        data = gen_synthetic(10_000, 3, 2, 0.0, seed=12)
        bs = split_dataset(data, SplitSpec(3, probs, seed=13))
        counts = np.zeros(10_001, dtype=int)
        for b in bs.baskets:
            for g in b.class_set:
                counts[g] += 1
        freq = np.bincount(counts[1:], minlength=4)[1:] / 10_000
        np.testing.assert_allclose(freq, probs, atol=0.02)

    def test_empty_dataset_rejected(self):
        data = LabeledData(np.empty((0, 3), dtype=np.float32),
                           np.empty(0, dtype=np.int64))
        with pytest.raises(ValueError):
            split_dataset(data, SplitSpec(2, (0.5, 0.5), seed=0))

    def test_deterministic_given_seed(self):
        data = gen_synthetic(60, 4, 3, 0.1, seed=14)
        spec = SplitSpec(2, (0.4, 0.6), seed=15)
        a = split_dataset(data, spec)
        b = split_dataset(data, spec)
        for x, y in zip(a.baskets, b.baskets):
            np.testing.assert_array_equal(x.features, y.features)
            np.testing.assert_array_equal(x.global_classes, y.global_classes)


class TestGenSynthetic:
    def test_zero_spread_collapses_to_centers(self):
        data = gen_synthetic(2, 5, 2, 0.0, seed=0)
        for cls in (1, 2):
            feats = data.features[data.labels == cls]
            cos = feats @ feats[0]
            np.testing.assert_allclose(cos, 1.0, atol=1e-6)

    def test_samples_unit_norm(self):
        data = gen_synthetic(20, 3, 8, 0.3, seed=1)
        norms = np.linalg.norm(data.features, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-5)

    def test_within_class_tighter_than_between(self):
        data = gen_synthetic(200, 4, 16, 0.1, seed=2)
        feats = data.features.astype(np.float64)
        within, between = [], []
        rng = np.random.default_rng(0)
        for _ in range(2000):
            i, j = rng.integers(len(feats), size=2)
            cos = float(feats[i] @ feats[j])
            (within if data.labels[i] == data.labels[j] else between).append(
                cos)
        for cls in range(1, 201):
            grp = feats[data.labels == cls]
            within.append(float(grp[0] @ grp[1]))
        assert np.mean(within) > np.mean(between)

    def test_deterministic(self):
        a = gen_synthetic(5, 2, 4, 0.2, seed=42)
        b = gen_synthetic(5, 2, 4, 0.2, seed=42)
        np.testing.assert_array_equal(a.features, b.features)

    def test_validation(self):
        with pytest.raises(ValueError):
            gen_synthetic(0, 1, 2, 0.1, 0)
        with pytest.raises(ValueError):
            gen_synthetic(1, 1, 2, -0.1, 0)


class TestBasketFileRoundtrip:
    def _sample_set(self, seed=0):
        data = gen_synthetic(25, 4, 5, 0.15, seed=seed)
        return split_dataset(data, SplitSpec(2, (0.5, 0.5), seed=seed + 1))

    def test_roundtrip_bit_identical(self, tmp_path):
        bs = self._sample_set()
        path = tmp_path / "set.bbs"
        save_baskets(path, bs)
        loaded = load_baskets(path)
        assert loaded.dim == bs.dim
        assert loaded.num_baskets == bs.num_baskets
        for a, b in zip(bs.baskets, loaded.baskets):
            np.testing.assert_array_equal(a.features, b.features)
            np.testing.assert_array_equal(a.local_labels, b.local_labels)
            np.testing.assert_array_equal(a.global_classes, b.global_classes)

    def test_truncated_file_reports_truncation(self, tmp_path):
        bs = self._sample_set()
        path = tmp_path / "set.bbs"
        save_baskets(path, bs)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) - 7])
        with pytest.raises(ValueError, match="truncated"):
            load_baskets(path)

    def test_bad_magic_reported_distinctly(self, tmp_path):
        path = tmp_path / "bad.bbs"
        path.write_bytes(b"NOPE" + b"\0" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_baskets(path)

    def test_trailing_data_rejected(self, tmp_path):
        bs = self._sample_set()
        path = tmp_path / "set.bbs"
        save_baskets(path, bs)
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(ValueError, match="trailing"):
            load_baskets(path)

    def test_header_class_count_mismatch(self, tmp_path):
        bs = self._sample_set()
        path = tmp_path / "set.bbs"
        save_baskets(path, bs)
        blob = bytearray(path.read_bytes())
        # first basket header starts after magic + 3 u32; bump its N_m
        blob[16] += 1
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="claims"):
            load_baskets(path)

    def test_empty_basket_list_rejected_on_save(self, tmp_path):
        with pytest.raises(ValueError):
            save_baskets(tmp_path / "x.bbs", BasketSet([], 4))

    def test_single_basket_and_flatten_roundtrip(self, tmp_path):
        data = gen_synthetic(10, 3, 4, 0.1, seed=3)
        bs = single_basket(data)
        assert bs.num_baskets == 1
        back = to_labeled(bs)
        assert sorted(back.labels.tolist()) == sorted(data.labels.tolist())
        assert back.features.shape == data.features.shape
