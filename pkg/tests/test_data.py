import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqmatch.data import (
    DataFormatError, Dialogue, Example, augment, batchify, debatchify, ingest, prepare_examples,
    read_examples, sample_negatives, serialize_context, truncate, write_jsonl,
)
from seqmatch.embedding import EOT, EOU, UNK_ID, Vocabulary


def dialogue(n, speakers=None, did="d"):
    speakers = speakers or ["A" if i % 2 == 0 else "B" for i in range(n)]
    return Dialogue(did, tuple((s, (f"w{i}", f"x{i}")) for i, s in enumerate(speakers)))


def positives(n):
    return [Example(("ctx", str(i)), (f"r{i}",), 1, f"d{i}", 1) for i in range(n)]


class TestIngest:
    def test_three_dialogues(self, tmp_path):
        path = tmp_path / "d.jsonl"
        rows = [{"id": f"d{i}", "utterances": [{"speaker": "A", "tokens": "hi there"},
                                               {"speaker": "B", "tokens": ["yo"]}]} for i in range(3)]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        out = ingest(path)
        assert len(out) == 3
        assert out[0].utterances[0] == ("A", ("hi", "there"))

    def test_truncated_line_is_named(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"id": "a", "utterances": []}\n{"id": "b", "utter\n')
        with pytest.raises(DataFormatError, match=r"d\.jsonl:2:"):
            ingest(path)

    def test_pool_with_hundred_candidates(self, tmp_path):
        path = tmp_path / "p.jsonl"
        rec = {"id": "c", "context": [{"speaker": "A", "tokens": "q"}],
               "candidates": [{"id": f"r{i}", "tokens": f"t{i}"} for i in range(100)],
               "gold_ids": ["r17"]}
        path.write_text(json.dumps(rec) + "\n")
        (pool,) = ingest(path, "pool-json-lines")
        assert len(pool.candidates) == 100 and pool.gold_ids == ("r17",)

    def test_pool_gold_must_be_a_candidate(self, tmp_path):
        path = tmp_path / "p.jsonl"
        rec = {"id": "c", "context": [], "candidates": [{"id": "r1", "tokens": "a"}], "gold_ids": ["r9"]}
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(DataFormatError, match=":1:"):
            ingest(path, "pool-json-lines")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            ingest(tmp_path / "x", "csv")


class TestSerialize:
    def test_single_utterance(self):
        assert serialize_context([("A", ("a", "b"))]) == ["a", "b", EOU, EOT]

    def test_same_speaker_twice_has_one_turn_marker(self):
        out = serialize_context([("A", ("a",)), ("A", ("b",))])
        assert out == ["a", EOU, "b", EOU, EOT]

    def test_speaker_change(self):
        out = serialize_context([("A", ("a",)), ("B", ("b",))])
        assert out == ["a", EOU, EOT, "b", EOU, EOT]

    def test_empty(self):
        with pytest.raises(ValueError):
            serialize_context([])


class TestAugment:
    def test_length_ten_gives_nine(self):
        assert len(augment(dialogue(10))) == 9

    def test_minimum(self):
        assert len(augment(dialogue(2))) == 1

    def test_context_prefix(self):
        d = dialogue(5)
        for ex in augment(d):
            assert ex.context == tuple(serialize_context(d.utterances[:ex.turn]))
            assert ex.context.count(EOU) == ex.turn
            assert ex.response == d.utterances[ex.turn][1]
            assert ex.label == 1

    @given(st.integers(2, 30))
    def test_count_property(self, n):
        assert len(augment(dialogue(n))) == n - 1


class TestSampleNegatives:
    pool = [(f"r{i}",) for i in range(30)]

    def test_ratio_four(self):
        out = sample_negatives(positives(10), self.pool, 4, seed=0)
        assert len(out) == 50
        assert sum(ex.label == 0 for ex in out) == 40

    def test_balanced(self):
        out = sample_negatives(positives(10), self.pool, 1, seed=0)
        labels = Counter(ex.label for ex in out)
        assert labels[0] == labels[1] == 10

    def test_gold_excluded(self):
        out = sample_negatives(positives(20), self.pool, 9, seed=3)
        for ex in out:
            if ex.label == 0:
                gold = next(p for p in out if p.label == 1 and p.dialogue_id == ex.dialogue_id)
                assert ex.response != gold.response

    def test_pool_too_small(self):
        with pytest.raises(ValueError):
            sample_negatives(positives(2), self.pool[:3], 4, seed=0)

    def test_ratio_below_one(self):
        with pytest.raises(ValueError):
            sample_negatives(positives(2), self.pool, 0.5, seed=0)

    def test_seeded(self):
        a = sample_negatives(positives(10), self.pool, 4, seed=1)
        b = sample_negatives(positives(10), self.pool, 4, seed=1)
        c = sample_negatives(positives(10), self.pool, 4, seed=2)
        assert a == b
        assert Counter(e.response for e in a) != Counter(e.response for e in c)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 20), st.integers(0, 2**32 - 1))
    def test_exact_count_property(self, ratio, n, seed):
        out = sample_negatives(positives(n), self.pool, ratio, seed)
        assert sum(ex.label == 0 for ex in out) == ratio * n
        assert len({ex.response for ex in out if ex.label == 0 and ex.dialogue_id == "d0"}) == ratio

    def test_fractional_ratio(self):
        out = sample_negatives(positives(2000), self.pool, 2.5, seed=0)
        achieved = sum(ex.label == 0 for ex in out) / 2000
        assert abs(achieved - 2.5) < 0.1


class TestTruncate:
    def test_context_keeps_tail(self):
        assert truncate([1, 2, 3, 4, 5], [], 3, 1)[0] == [3, 4, 5]

    def test_response_keeps_head(self):
        assert truncate([1], [1, 2, 3, 4, 5], 1, 3)[1] == [1, 2, 3]

    def test_short_unchanged(self):
        assert truncate([1, 2], [3], 5, 5) == ([1, 2], [3])

    def test_keep_first(self):
        assert truncate([1, 2, 3, 4, 5], [], 3, 1, keep_context="first")[0] == [1, 2, 3]

    @given(st.lists(st.integers(), max_size=40), st.lists(st.integers(), max_size=40),
           st.integers(1, 20), st.integers(1, 20))
    def test_idempotent(self, c, r, max_c, max_r):
        once = truncate(c, r, max_c, max_r)
        assert truncate(*once, max_c, max_r) == once


class TestBatchify:
    vocab = Vocabulary([f"t{i}" for i in range(10)])

    def ex(self, n_ctx, n_resp):
        return Example(tuple(f"t{i % 10}" for i in range(n_ctx)), tuple(f"t{i % 10}" for i in range(n_resp)), 1)

    def test_sizes(self):
        assert [len(b) for b in batchify([self.ex(2, 2)] * 5, 2, self.vocab)] == [2, 2, 1]

    def test_padding(self):
        (b,) = batchify([self.ex(3, 1), self.ex(7, 1)], 2, self.vocab)
        assert b.context_ids.shape == (2, 7)
        assert b.context_mask.sum(axis=1).tolist() == [3, 7]

    def test_no_unk_for_known_tokens(self):
        (b,) = batchify([self.ex(4, 3)], 1, self.vocab)
        assert not np.any(b.context_ids == UNK_ID)

    @settings(max_examples=30)
    @given(st.lists(st.tuples(st.integers(1, 12), st.integers(1, 6)), min_size=1, max_size=9),
           st.integers(1, 4))
    def test_round_trip(self, lengths, bs):
        exs = [self.ex(c, r) for c, r in lengths]
        got = [row for b in batchify(exs, bs, self.vocab) for row in debatchify(b)]
        assert got == [(self.vocab.encode(e.context), self.vocab.encode(e.response), 1) for e in exs]


def test_prepare_examples_counts_and_io(tmp_path):
    exs, stats = prepare_examples([dialogue(10, did=f"d{i}") for i in range(3)], 4, 0, 8, 2)
    assert stats.positives == 27 and stats.negatives == 108
    assert stats.ratio_achieved == 4.0
    assert all(len(e.context) <= 8 and len(e.response) <= 2 for e in exs)
    write_jsonl(tmp_path / "e.jsonl", (e.to_json() for e in exs))
    assert read_examples(tmp_path / "e.jsonl") == exs
