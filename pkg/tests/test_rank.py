import json
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracle
from seqmatch.rank import (
    NONE_CANDIDATE, RERANK_OFFSET, THRESHOLD_GRID, EnsembleKeyError, RankingError, apply_threshold,
    average_precision, ensemble, evaluate, lists_from_scores, mean_average_precision, mrr,
    rank_pool, rank_scores, read_scores, recall_at_n, select_threshold, two_stage, write_scores,
)


def gold_at(rank, size=10, extra=()):
    """Pool whose gold candidates sit at the given 1-based ranks."""
    ids = [f"c{i:03d}" for i in range(size)]
    scores = [1.0 - i / size for i in range(size)]
    gold = {ids[r - 1] for r in (rank, *extra)}
    return rank_scores("ctx", ids, scores, gold)


class TestRankPool:
    def test_single_candidate(self):
        rl = rank_pool(lambda c, cands: [0.01], "q", [SimpleNamespace(id="a", tokens=("x",))])
        assert rl.candidate_ids == ("a",)

    def test_equal_scores_order_by_id(self):
        assert rank_scores("q", ["b", "c", "a"], [0.5, 0.5, 0.5]).candidate_ids == ("a", "b", "c")

    def test_permutation_invariant(self):
        cands = [SimpleNamespace(id=f"r{i}", tokens=(str(i),)) for i in range(6)]
        scorer = lambda c, toks: [((int(t[0]) * 7) % 5) / 5 for t in toks]
        a = rank_pool(scorer, "q", cands)
        b = rank_pool(scorer, "q", cands[::-1])
        assert a == b

    def test_empty_pool(self):
        with pytest.raises(RankingError):
            rank_pool(lambda c, t: [], "q", [])


class TestRecall:
    def test_rank_one(self):
        assert recall_at_n([gold_at(1)], 1) == 1.0

    def test_rank_eleven_of_hundred(self):
        rl = gold_at(11, size=100)
        assert recall_at_n([rl], 10) == 0.0 and recall_at_n([rl], 50) == 1.0

    def test_two_contexts(self):
        assert recall_at_n([gold_at(1), gold_at(3)], 1) == 0.5

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            recall_at_n([gold_at(1)], 0)


class TestMrr:
    def test_rank_four(self):
        assert mrr([gold_at(4)]) == 0.25

    def test_two_contexts(self):
        assert mrr([gold_at(1), gold_at(2)]) == 0.75

    def test_no_gold_counts_zero(self):
        assert mrr([rank_scores("q", ["a"], [0.3])]) == 0.0


class TestMap:
    def test_golds_at_one_and_three(self):
        rl = gold_at(1, extra=(3,))
        expected = float(oracle.pool_ap(list(rl.candidate_ids), list(rl.scores), rl.gold_ids))
        assert expected == pytest.approx((1 + 2 / 3) / 2)
        assert average_precision(rl) == expected

    def test_single_gold_is_reciprocal_rank(self):
        assert average_precision(gold_at(5)) == 0.2

    def test_all_golds_on_top(self):
        assert average_precision(gold_at(1, extra=(2, 3))) == 1.0


@st.composite
def pools(draw, max_size=10):
    size = draw(st.integers(1, max_size))
    ids = [f"r{i}" for i in draw(st.permutations(range(size)))]
    # a coarse score lattice forces plenty of ties
    scores = draw(st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), min_size=size, max_size=size))
    gold = draw(st.sets(st.sampled_from(ids), max_size=size))
    return ids, scores, gold


@settings(max_examples=200, deadline=None)
@given(st.lists(pools(), min_size=1, max_size=6))
def test_metrics_match_brute_force_oracle(sample):
    lists = [rank_scores(f"q{k}", ids, sc, g) for k, (ids, sc, g) in enumerate(sample)]
    for n in (1, 2, 5, 10):
        assert recall_at_n(lists, n) == float(oracle.recall(sample, n))
    assert mrr(lists) == float(oracle.mrr(sample))
    assert mean_average_precision(lists) == float(oracle.mean_ap(sample))


@settings(max_examples=100, deadline=None)
@given(st.lists(pools(max_size=15), min_size=1, max_size=6))
def test_metric_invariants(sample):
    lists = [rank_scores(f"q{k}", ids, sc, g) for k, (ids, sc, g) in enumerate(sample)]
    recalls = [recall_at_n(lists, n) for n in range(1, 17)]
    assert recalls == sorted(recalls)
    if all(g for _, _, g in sample):
        assert recall_at_n(lists, max(len(i) for i, _, _ in sample)) == 1.0
    m = mrr(lists)
    assert m >= recalls[0] - 1e-15
    for k in (1, 10):
        rk = recall_at_n(lists, k)
        assert m <= rk + (1 - rk) / (k + 1) + 1e-12


class TestThreshold:
    def test_grid(self):
        assert len(THRESHOLD_GRID) == 50
        assert THRESHOLD_GRID[0] == 0.50 and THRESHOLD_GRID[-1] == 0.99

    def test_all_confident_golds_pick_lowest(self):
        lists = [rank_scores(f"q{i}", ["a", "b"], [0.995, 0.1], {"a"}) for i in range(3)]
        assert select_threshold(lists) == 0.50

    def test_single_empty_gold_context(self):
        rl = rank_scores("q", ["a", "b"], [0.6, 0.2])
        for theta in THRESHOLD_GRID:
            (shifted,) = apply_threshold([rl], theta)
            correct = shifted.candidate_ids[0] == NONE_CANDIDATE
            assert correct == (theta > 0.6)
        assert select_threshold([rl]) == 0.61

    def test_none_prediction_on_gold_pool_costs_a_rank(self):
        rl = rank_scores("q", ["a", "b"], [0.4, 0.2], {"a"})
        (shifted,) = apply_threshold([rl], 0.5)
        assert shifted.gold_ranks() == [2]


class TestEnsemble:
    def test_mean(self):
        out = ensemble([{("q", "a"): 0.2}, {("q", "a"): 0.4}])
        assert out[("q", "a")] == pytest.approx(0.3)

    def test_single_is_identity(self):
        t = {("q", "a"): 0.2, ("q", "b"): 0.7}
        assert ensemble([t]) == t

    def test_self_mean_keeps_ranking(self):
        t = {("q", c): s for c, s in zip("abcde", [0.1, 0.9, 0.5, 0.5, 0.3])}
        assert lists_from_scores(ensemble([t, t])) == lists_from_scores(t)

    def test_key_mismatch_lists_difference(self):
        with pytest.raises(EnsembleKeyError) as exc:
            ensemble([{("q", "a"): 0.1, ("q", "b"): 0.2}, {("q", "a"): 0.1, ("q", "c"): 0.2}])
        assert exc.value.difference == {("q", "b"), ("q", "c")}

    @settings(max_examples=50)
    @given(st.lists(st.lists(st.floats(0, 1), min_size=4, max_size=4), min_size=1, max_size=5),
           st.randoms())
    def test_permutation_invariant(self, columns, rnd):
        tables = [{("q", f"c{i}"): v for i, v in enumerate(col)} for col in columns]
        shuffled = tables[:]
        rnd.shuffle(shuffled)
        assert ensemble(tables) == ensemble(shuffled)

    def test_score_file_round_trip(self, tmp_path):
        lists = [rank_scores("q1", ["a", "b"], [0.25, 0.75]), rank_scores("q2", ["c"], [0.5])]
        write_scores(tmp_path / "s.jsonl", lists)
        first = json.loads((tmp_path / "s.jsonl").read_text().splitlines()[0])
        assert set(first) == {"context_id", "candidate_id", "score"}
        assert lists_from_scores(read_scores(tmp_path / "s.jsonl")) == lists


class TestTwoStage:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.ids = [f"r{i:02d}" for i in range(20)]
        self.s1 = rng.random(20)
        self.s2 = rng.random(20)

    def rerank(self, idx):
        return self.s2[idx]

    def test_full_n_equals_second_stage(self):
        got = two_stage(self.s1, self.rerank, self.ids, 20, "q")
        assert got.candidate_ids == rank_scores("q", self.ids, self.s2).candidate_ids

    def test_top_n_membership_matches_stage_one(self):
        got = two_stage(self.s1, self.rerank, self.ids, 5, "q")
        first = rank_scores("q", self.ids, self.s1)
        assert set(got.candidate_ids[:5]) == set(first.candidate_ids[:5])
        assert got.candidate_ids[5:] == first.candidate_ids[5:]

    def test_gold_outside_prefilter_stays_below_n(self):
        first = rank_scores("q", self.ids, self.s1)
        gold = first.candidate_ids[10]
        got = two_stage(self.s1, self.rerank, self.ids, 5, "q", {gold})
        assert got.gold_ranks()[0] > 5

    def test_scores_non_increasing(self):
        got = two_stage(self.s1, self.rerank, self.ids, 7, "q")
        assert all(a >= b for a, b in zip(got.scores, got.scores[1:]))
        assert got.scores[0] <= 1 + RERANK_OFFSET

    def test_n_out_of_range(self):
        with pytest.raises(RankingError):
            two_stage(self.s1, self.rerank, self.ids, 21)


def test_evaluate_report():
    report = evaluate([gold_at(1), gold_at(20, size=60)])
    assert report.r1 == 0.5 and report.r10 == 0.5 and report.r50 == 1.0
    assert report.criterion == pytest.approx((0.5 + (1 + 1 / 20) / 2) / 2)
    assert set(report.to_json()) >= {"R@1", "R@10", "R@50", "MRR", "MAP", "criterion"}
    assert not math.isnan(report.criterion)
