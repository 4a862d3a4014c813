"""Scoring candidate pools with a trained model."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import DataFormatError, PoolRecord, make_batch, serialize_context, truncate
from .embedding import Vocabulary
from .rank import RankedList, rank_scores, two_stage
from .siamese import EncodedTable, Siamese, pair_classify


def pool_context(record: PoolRecord, max_c: int, keep_context: str = "last") -> list[str]:
    ctx, _ = truncate(serialize_context(record.context), (), max_c, 1, keep_context)
    return ctx


def score_candidates(model, vocab: Vocabulary, context: Sequence[str],
                     candidates: Sequence[Sequence[str]], max_r: int, flags=None,
                     batch_size: int = 256) -> np.ndarray:
    """p_positive of each candidate given one (already truncated) context."""
    out = []
    for i in range(0, len(candidates), batch_size):
        chunk = [list(c)[:max_r] for c in candidates[i:i + batch_size]]
        batch = make_batch([context] * len(chunk), chunk, [0] * len(chunk), vocab)
        out.append(model.score_batch(batch, flags))
    return np.concatenate(out) if out else np.zeros(0)


def rank_record(model, vocab: Vocabulary, record: PoolRecord, max_c: int, max_r: int,
                flags=None, keep_context: str = "last") -> RankedList:
    ctx = pool_context(record, max_c, keep_context)
    scores = score_candidates(model, vocab, ctx, [c.tokens for c in record.candidates], max_r, flags)
    return rank_scores(record.id, [c.id for c in record.candidates], scores, record.gold_ids)


def rank_records(model, vocab: Vocabulary, records: Sequence[PoolRecord], max_c: int, max_r: int,
                 flags=None, keep_context: str = "last") -> list[RankedList]:
    return [rank_record(model, vocab, r, max_c, max_r, flags, keep_context) for r in records]


def pool_sentences(records: Sequence[PoolRecord], max_r: int) -> list[tuple[str, list[str]]]:
    """Unique (candidate id, truncated tokens) across pools.

    Candidate ids are global: the same id must carry the same tokens in every
    pool, otherwise a cached encoding would be ambiguous.
    """
    seen: dict[str, list[str]] = {}
    for rec in records:
        for c in rec.candidates:
            toks = list(c.tokens)[:max_r]
            if seen.setdefault(c.id, toks) != toks:
                raise DataFormatError(f"candidate id {c.id!r} has different tokens in pool {rec.id!r}")
    return list(seen.items())


def siamese_scores(model: Siamese, vocab: Vocabulary, record: PoolRecord, table: EncodedTable,
                   max_c: int, keep_context: str = "last") -> np.ndarray:
    """Stage-1 p_positive for every candidate using cached candidate vectors."""
    table.check(model)
    ctx = pool_context(record, max_c, keep_context)
    ids = np.array([vocab.encode(ctx)])
    vc = model.encode(ids, np.ones(ids.shape)).data.astype(np.float32)
    vr = table.lookup([c.id for c in record.candidates])
    return pair_classify(model, np.repeat(vc, len(vr), axis=0), vr)


def two_stage_record(siamese: Siamese, s_vocab: Vocabulary, table: EncodedTable, esim,
                     e_vocab: Vocabulary, record: PoolRecord, n: int, max_c: int, max_r: int,
                     flags=None, keep_context: str = "last") -> RankedList:
    stage1 = siamese_scores(siamese, s_vocab, record, table, max_c, keep_context)
    ctx = pool_context(record, max_c, keep_context)
    cands = record.candidates

    def rerank(indices):
        return score_candidates(esim, e_vocab, ctx, [cands[i].tokens for i in indices], max_r, flags)

    return two_stage(stage1, rerank, [c.id for c in cands], n, record.id, record.gold_ids)
