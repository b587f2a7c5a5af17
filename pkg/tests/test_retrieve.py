import numpy as np
import pytest

from orthosplat.embed import normalize_feature
from orthosplat.retrieve import (GalleryIndex, RankedResult,
                                 average_precision, meter_error,
                                 metrics_row, neighbor_relevant_ids, rank,
                                 recall_at_k, write_metrics_csv)


def make_index(rng, m=30, d=16):
    feats = np.array([normalize_feature(rng.normal(size=d)) for _ in range(m)])
    geotags = rng.uniform(0, 100, (m, 2))
    return GalleryIndex(list(range(m)), feats, geotags)


class TestRank:
    def test_exact_match_first(self):
        rng = np.random.default_rng(60)
        index = make_index(rng)
        res = rank(index.features[7], index, 5)
        assert res.ids[0] == 7
        assert abs(res.scores[0] - 1.0) < 1e-9

    def test_k_larger_than_gallery(self):
        rng = np.random.default_rng(61)
        index = make_index(rng, m=10)
        res = rank(index.features[0], index, 99)
        assert len(res.ids) == 10

    def test_agrees_with_brute_force(self):
        rng = np.random.default_rng(62)
        index = make_index(rng, m=50)
        for _ in range(100):
            q = normalize_feature(rng.normal(size=16))
            res = rank(q, index, 50)
            scores = index.features @ q
            oracle = sorted(range(50), key=lambda i: (-scores[i], i))
            assert res.ids == oracle

    def test_scale_invariance(self):
        rng = np.random.default_rng(63)
        index = make_index(rng)
        q = rng.normal(size=16)
        assert rank(q, index, 10).ids == rank(3.7 * q, index, 10).ids

    def test_tie_break_ascending_id(self):
        feats = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        index = GalleryIndex([5, 2, 9], feats, np.zeros((3, 2)))
        res = rank(np.array([1.0, 0.0]), index, 3)
        assert res.ids == [2, 5, 9]

    def test_scores_non_increasing(self):
        rng = np.random.default_rng(64)
        index = make_index(rng)
        res = rank(rng.normal(size=16), index, 30)
        assert np.all(np.diff(res.scores) <= 1e-12)

    def test_empty_gallery_rejected(self):
        with pytest.raises(ValueError):
            rank(np.ones(4), GalleryIndex([], np.empty((0, 4)),
                                          np.empty((0, 2))), 1)


class TestRecallAtK:
    def make(self, ranks, total=20):
        results = []
        truths = []
        for r in ranks:
            ids = list(range(total))
            ids.remove(99) if 99 in ids else None
            ids.insert(r - 1, 99)
            results.append(RankedResult(ids, np.linspace(1, 0, len(ids))))
            truths.append(99)
        return results, truths

    def test_always_rank_one(self):
        results, truths = self.make([1, 1, 1])
        assert recall_at_k(results, truths, 1) == 1.0

    def test_rank_two(self):
        results, truths = self.make([2, 2])
        assert recall_at_k(results, truths, 1) == 0.0
        assert recall_at_k(results, truths, 5) == 1.0

    def test_mixed_fixture(self):
        results, truths = self.make([1, 2, 3, 11])
        assert recall_at_k(results, truths, 10) == 0.75

    def test_monotone_in_k(self):
        rng = np.random.default_rng(65)
        results, truths = self.make(list(rng.integers(1, 15, size=10)))
        values = [recall_at_k(results, truths, k) for k in range(1, 16)]
        assert all(b >= a for a, b in zip(values, values[1:]))


class TestAveragePrecision:
    def result(self, n=20):
        return RankedResult(list(range(n)), np.linspace(1, 0, n))

    def test_single_relevant_rank_one(self):
        assert average_precision(self.result(), {0}) == 1.0

    def test_single_relevant_rank_r(self):
        for r in (1, 2, 3, 7, 20):
            ap = average_precision(self.result(), {r - 1})
            assert abs(ap - 1.0 / r) < 1e-12

    def test_two_relevant_by_hand(self):
        ap = average_precision(self.result(), {0, 2})
        assert abs(ap - (1.0 + 2.0 / 3.0) / 2.0) < 1e-12

    def test_range_and_perfect_condition(self):
        rng = np.random.default_rng(66)
        for _ in range(30):
            rel = set(rng.choice(20, size=rng.integers(1, 6), replace=False))
            ap = average_precision(self.result(), rel)
            assert 0.0 < ap <= 1.0
            top = set(range(len(rel)))
            assert (average_precision(self.result(), top) == 1.0) == (rel != top) \
                or average_precision(self.result(), rel) <= 1.0
        assert average_precision(self.result(), {0, 1, 2}) == 1.0

    def test_empty_relevant_rejected(self):
        with pytest.raises(ValueError):
            average_precision(self.result(), set())


class TestMeterError:
    def test_identical(self):
        assert meter_error([3.0, 4.0], [3.0, 4.0]) == 0.0

    def test_three_four_five(self):
        assert meter_error([0.0, 0.0], [3.0, 4.0]) == 5.0

    def test_unset_geotag(self):
        assert meter_error(None, [0.0, 0.0]) is None
        assert meter_error([0.0, 0.0], None) is None


class TestNeighborRelevance:
    def test_within_one_stride(self):
        geotags = np.array([[0, 0], [8, 0], [16, 0], [0, 8], [20, 20]],
                           dtype=float)
        feats = np.tile(normalize_feature(np.ones(4)), (5, 1))
        index = GalleryIndex([0, 1, 2, 3, 4], feats, geotags)
        rel = neighbor_relevant_ids(index, 0, 8.0)
        assert rel == {0, 1, 3}


class TestMetricsCsv:
    def test_byte_identical_and_aggregate(self, tmp_path):
        rng = np.random.default_rng(67)
        index = make_index(rng, m=12)
        rows = []
        for s in range(4):
            for it in range(3):
                res = rank(normalize_feature(rng.normal(size=16)), index)
                rows.append(metrics_row(f"scene_{s:03d}", res, s, index,
                                        index.geotags[s], it))
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_metrics_csv(a, rows)
        write_metrics_csv(b, list(reversed(rows)))
        assert a.read_bytes() == b.read_bytes()
        lines = a.read_text().splitlines()
        assert lines[0].startswith("scene_id,rank_of_truth,r@1")
        agg = [ln for ln in lines if ln.startswith("aggregate")]
        assert len(agg) == 3
