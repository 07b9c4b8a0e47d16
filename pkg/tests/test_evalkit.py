import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iidreid.datasets import ReIDData
from iidreid.evalkit import (
    EvalProtocol,
    average_precision,
    cmc,
    cmc_curve,
    darken,
    distance_matrix,
    illumination_accuracy,
    intra_inter_distances,
    low_light_sweep,
    mean_average_precision,
    rank_gallery,
    write_eval_report,
    write_per_query_csv,
)
from iidreid.exceptions import InvalidParameterError
from iidreid.illumsynth import gamma_adjust
from oracles import loop_ap, loop_cmc, loop_distance_matrix, loop_intra_inter, loop_map, loop_rankings


def random_instance(rng):
    nq, ng = int(rng.integers(1, 21)), int(rng.integers(1, 51))
    dim = int(rng.integers(1, 6))
    q, g = rng.normal(size=(nq, dim)), rng.normal(size=(ng, dim))
    if rng.random() < 0.3:
        q, g = np.round(q), np.round(g)  # plenty of distance ties
    n_ids = int(rng.integers(1, 6))
    return (q, g, rng.integers(0, n_ids, nq), rng.integers(0, n_ids, ng),
            rng.integers(0, 3, nq), rng.integers(0, 3, ng))


class TestDistanceMatrix:
    def test_zero_diagonal_and_symmetry(self):
        x = np.random.default_rng(0).normal(size=(6, 3))
        d = distance_matrix(x, x)
        np.testing.assert_array_equal(np.diag(d), 0)
        np.testing.assert_allclose(d, d.T)

    def test_hand_example(self):
        np.testing.assert_allclose(distance_matrix([[0, 0]], [[3, 4], [6, 8]]), [[5, 10]])

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            q, g = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
            np.testing.assert_allclose(distance_matrix(q, g), loop_distance_matrix(q, g), atol=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidParameterError):
            distance_matrix(np.zeros((2, 3)), np.zeros((2, 4)))

    def test_nonnegative(self):
        assert (distance_matrix(np.random.default_rng(2).normal(size=(5, 2)), np.zeros((3, 2))) >= 0).all()


class TestRetrievalMetrics:
    def test_top1_everywhere(self):
        r = rank_gallery([[0.1, 0.9], [0.8, 0.2]], [0, 1], [0, 1])
        assert cmc(r, 1) == 1.0 and mean_average_precision(r) == 1.0

    def test_first_match_ranks_one_and_three(self):
        dist = [[0.0, 1.0, 2.0, 3.0], [0.0, 1.0, 2.0, 3.0]]
        r = rank_gallery(dist, [0, 1], [0, 2, 1, 3])
        assert cmc(r, 1) == 0.5 and cmc(r, 5) == 1.0

    def test_hand_average_precision(self):
        flags = np.zeros(10, bool)
        flags[[0, 2]] = True
        assert average_precision(flags) == pytest.approx((1 + 2 / 3) / 2)

    def test_camera_filter(self):
        # the nearest gallery entry shares identity and camera, so it is dropped
        r = rank_gallery([[0.0, 1.0, 2.0]], [7], [7, 3, 7], [0], [0, 1, 1])
        assert r.order[0].tolist() == [1, 2]
        assert cmc(r, 1) == 0.0 and cmc(r, 2) == 1.0

    def test_camera_filter_off(self):
        r = rank_gallery([[0.0, 1.0, 2.0]], [7], [7, 3, 7], [0], [0, 1, 1], exclude_same_camera=False)
        assert cmc(r, 1) == 1.0

    def test_queries_without_match_are_excluded(self):
        r = rank_gallery([[0.0, 1.0], [0.0, 1.0]], [0, 5], [0, 1])
        assert r.skipped == [1] and r.n_scored == 1 and cmc(r, 1) == 1.0

    def test_stable_ties(self):
        r = rank_gallery([[1.0, 1.0, 1.0]], [0], [1, 0, 0])
        assert r.order[0].tolist() == [0, 1, 2]
        assert mean_average_precision(r) == pytest.approx((1 / 2 + 2 / 3) / 2)

    def test_bad_k_and_empty_ap(self):
        r = rank_gallery([[0.0]], [0], [0])
        with pytest.raises(InvalidParameterError):
            cmc(r, 0)
        with pytest.raises(InvalidParameterError):
            average_precision([False, False])

    def test_shape_check(self):
        with pytest.raises(InvalidParameterError):
            rank_gallery(np.zeros((2, 3)), [0], [0, 1, 2])

    def test_brute_force_oracles(self):
        rng = np.random.default_rng(3)
        for _ in range(150):
            q, g, qi, gi, qc, gc = random_instance(rng)
            d = distance_matrix(q, g)
            rows = loop_rankings(d, qi, gi, qc, gc)
            r = rank_gallery(d, qi, gi, qc, gc)
            assert [m.tolist() for m in r.matches] == [row for row in rows if any(row)]
            for k in (1, 5, 10):
                assert cmc(r, k) == loop_cmc(rows, k)
            assert mean_average_precision(r) == pytest.approx(loop_map(rows), abs=1e-9)

    @settings(max_examples=50)
    @given(st.integers(0, 10_000))
    def test_cmc_monotone_and_bounds(self, seed):
        q, g, qi, gi, qc, gc = random_instance(np.random.default_rng(seed))
        r = rank_gallery(distance_matrix(q, g), qi, gi, qc, gc)
        curve = cmc_curve(r, 20)
        assert np.all(np.diff(curve) >= 0)
        m = mean_average_precision(r)
        assert 0 <= m <= 1 and 0 <= curve[0] <= 1

    @settings(max_examples=50)
    @given(st.integers(0, 10_000))
    def test_gallery_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        q, g, qi, gi, qc, gc = random_instance(rng)
        q, g = q + rng.normal(scale=1e-3, size=q.shape), g + rng.normal(scale=1e-3, size=g.shape)
        perm = rng.permutation(len(g))
        a = rank_gallery(distance_matrix(q, g), qi, gi, qc, gc)
        b = rank_gallery(distance_matrix(q, g[perm]), qi, gi[perm], qc, gc[perm])
        assert cmc(a, 1) == cmc(b, 1)
        assert mean_average_precision(a) == pytest.approx(mean_average_precision(b))

    def test_ap_matches_oracle_on_flags(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            flags = rng.random(30) < 0.2
            flags[rng.integers(30)] = True
            assert average_precision(flags) == pytest.approx(loop_ap(flags.tolist()), abs=1e-12)


class TestIlluminationAccuracy:
    def test_exact(self):
        assert illumination_accuracy([0, 4, 8], [0, 4, 8]) == 1.0

    def test_rounding_rule(self):
        assert illumination_accuracy([2.4, 3.0], [2, 5]) == 0.5

    def test_clamping(self):
        assert illumination_accuracy([-3.0, 11.2], [0, 8]) == 1.0

    def test_empty(self):
        with pytest.raises(InvalidParameterError):
            illumination_accuracy([], [])


class TestIntraInter:
    def test_identical_pair(self):
        intra, _ = intra_inter_distances([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]], [0, 0, 1])
        assert intra == 0.0

    def test_hand_example(self):
        # points on a line with d(1,2)=2, d(1,3)=4, d(2,3)=6
        x = [[0.0], [2.0], [-4.0]]
        assert intra_inter_distances(x, ["A", "A", "B"]) == pytest.approx((2.0, 5.0))

    def test_loop_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = int(rng.integers(4, 21))
            f = rng.normal(size=(n, 3))
            ids = rng.integers(0, 3, n)
            ids[:2] = [0, 1]
            ids[2] = 0
            np.testing.assert_allclose(intra_inter_distances(f, ids), loop_intra_inter(f, ids), atol=1e-6)

    def test_degenerate(self):
        with pytest.raises(InvalidParameterError):
            intra_inter_distances([[0.0], [1.0]], [0, 0])
        with pytest.raises(InvalidParameterError):
            intra_inter_distances([[0.0], [1.0]], [0, 1])


class TestDarkening:
    def test_identity(self):
        imgs = np.random.default_rng(6).integers(0, 256, (2, 4, 4, 3), dtype=np.uint8)
        np.testing.assert_array_equal(darken(imgs, 1.0), imgs)

    def test_darkens_with_inverse_exponent(self):
        imgs = np.full((1, 2, 2, 3), 128, np.uint8)
        np.testing.assert_array_equal(darken(imgs, 0.5), gamma_adjust(imgs[0], 2.0)[None])
        assert darken(imgs, 0.25).mean() < darken(imgs, 0.6).mean() < 128

    def test_rejects_nonpositive(self):
        with pytest.raises(InvalidParameterError):
            darken(np.zeros((1, 2, 2, 3), np.uint8), 0)


def test_protocol_validation():
    with pytest.raises(InvalidParameterError):
        EvalProtocol(feature_source="z")
    with pytest.raises(InvalidParameterError):
        EvalProtocol(distance="cosine")


def test_low_light_sweep_empty(tmp_path):
    data = ReIDData(np.zeros((2, 64, 32, 3), np.uint8), [0, 0], [0, 1], [4, 4], ["query", "gallery"])
    assert low_light_sweep(None, data, []) == []


def test_reports(tmp_path):
    r = rank_gallery([[0.0, 1.0, 2.0]], [1], [1, 0, 1])
    out = write_eval_report({"cmc1": np.float64(1.0), "curve": np.arange(3)}, tmp_path / "r" / "eval_report.json")
    assert '"cmc1": 1.0' in out.read_text()
    write_per_query_csv(r, tmp_path / "q.csv")
    lines = (tmp_path / "q.csv").read_text().splitlines()
    assert lines[0] == "query,first_match_rank,average_precision" and lines[1].startswith("0,1,")
