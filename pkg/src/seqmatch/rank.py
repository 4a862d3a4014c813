"""Candidate ranking, Recall@N / MRR / MAP, thresholding, ensembling, two-stage retrieval."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

THRESHOLD_GRID = tuple(round(0.50 + 0.01 * i, 2) for i in range(50))

# stage-2 scores are lifted by this offset so that reranked candidates always
# outrank the stage-1 remainder while keeping scores non-increasing
RERANK_OFFSET = 2.0


class RankingError(ValueError):
    pass


@dataclass(frozen=True)
class RankedList:
    context_id: str
    candidate_ids: tuple
    scores: tuple
    gold_ids: frozenset = frozenset()

    def gold_ranks(self) -> list[int]:
        """1-based ranks of gold candidates, ascending."""
        return [r for r, c in enumerate(self.candidate_ids, start=1) if c in self.gold_ids]

    @property
    def top_score(self) -> float:
        return self.scores[0]


def rank_scores(context_id, candidate_ids: Sequence, scores: Sequence[float],
                gold_ids: Iterable = ()) -> RankedList:
    """Sort candidates by descending score, ties by ascending candidate id."""
    if len(candidate_ids) == 0:
        raise RankingError(f"context {context_id!r}: empty candidate pool")
    if len(candidate_ids) != len(scores):
        raise RankingError(f"context {context_id!r}: {len(candidate_ids)} ids, {len(scores)} scores")
    if len(set(candidate_ids)) != len(candidate_ids):
        raise RankingError(f"context {context_id!r}: duplicate candidate ids")
    order = sorted(range(len(candidate_ids)), key=lambda i: (-float(scores[i]), candidate_ids[i]))
    return RankedList(context_id, tuple(candidate_ids[i] for i in order),
                      tuple(float(scores[i]) for i in order), frozenset(gold_ids))


def rank_pool(scorer: Callable, context, candidates: Sequence, context_id="",
              gold_ids: Iterable = ()) -> RankedList:
    """Score every candidate independently and rank them.

    ``scorer(context, [candidate tokens...])`` returns one p_positive per
    candidate; ``candidates`` are objects with ``id`` and ``tokens``.
    """
    if not candidates:
        raise RankingError(f"context {context_id!r}: empty candidate pool")
    scores = np.asarray(scorer(context, [c.tokens for c in candidates]), dtype=np.float64)
    return rank_scores(context_id, [c.id for c in candidates], scores, gold_ids)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def recall_at_n(lists: Sequence[RankedList], n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    if not lists:
        return 0.0
    hits = sum(1 for rl in lists if any(c in rl.gold_ids for c in rl.candidate_ids[:n]))
    return hits / len(lists)


# MRR and MAP are accumulated as exact fractions and rounded once, so the
# result does not depend on the order of the lists.

def _rr(rl: RankedList) -> Fraction:
    ranks = rl.gold_ranks()
    return Fraction(1, ranks[0]) if ranks else Fraction(0)


def _ap(rl: RankedList) -> Fraction:
    ranks = rl.gold_ranks()
    if not ranks:
        return Fraction(0)
    return sum((Fraction(k, r) for k, r in enumerate(ranks, start=1)), Fraction(0)) / len(ranks)


def reciprocal_rank(rl: RankedList) -> float:
    return float(_rr(rl))


def average_precision(rl: RankedList) -> float:
    return float(_ap(rl))


def mrr(lists: Sequence[RankedList]) -> float:
    """Mean reciprocal rank of the first gold; gold-less contexts count 0."""
    if not lists:
        return 0.0
    return float(sum((_rr(rl) for rl in lists), Fraction(0)) / len(lists))


def mean_average_precision(lists: Sequence[RankedList]) -> float:
    if not lists:
        return 0.0
    return float(sum((_ap(rl) for rl in lists), Fraction(0)) / len(lists))


@dataclass
class MetricReport:
    r1: float
    r10: float
    r50: float
    mrr: float
    map: float | None = None
    count: int = 0
    threshold: float | None = None

    @property
    def criterion(self) -> float:
        return (self.r10 + self.mrr) / 2.0

    def to_json(self) -> dict:
        out = {"R@1": self.r1, "R@10": self.r10, "R@50": self.r50, "MRR": self.mrr,
               "criterion": self.criterion, "count": self.count}
        if self.map is not None:
            out["MAP"] = self.map
        if self.threshold is not None:
            out["threshold"] = self.threshold
        return out


def evaluate(lists: Sequence[RankedList], with_map: bool = True) -> MetricReport:
    return MetricReport(r1=recall_at_n(lists, 1), r10=recall_at_n(lists, 10),
                        r50=recall_at_n(lists, 50), mrr=mrr(lists),
                        map=mean_average_precision(lists) if with_map else None,
                        count=len(lists))


# ---------------------------------------------------------------------------
# "no correct candidate" thresholding
# ---------------------------------------------------------------------------

NONE_CANDIDATE = "__none__"


def apply_threshold(lists: Sequence[RankedList], theta: float) -> list[RankedList]:
    """Add a virtual "none" candidate at rank 1 wherever the top score is below ``theta``.

    The virtual candidate is gold exactly when the pool has no gold; other
    candidates shift down one rank.  Pools above the threshold are unchanged,
    so a gold-less pool there scores zero.
    """
    out = []
    for rl in lists:
        if rl.top_score < theta:
            gold = rl.gold_ids or frozenset([NONE_CANDIDATE])
            out.append(RankedList(rl.context_id, (NONE_CANDIDATE,) + rl.candidate_ids,
                                  (math.inf,) + rl.scores, gold))
        else:
            out.append(rl)
    return out


def select_threshold(lists: Sequence[RankedList], grid: Sequence[float] = THRESHOLD_GRID) -> float:
    """Grid value maximising (R@10 + MRR) / 2 on dev lists; lowest wins ties."""
    best_theta, best = grid[0], -1.0
    for theta in grid:
        shifted = apply_threshold(lists, theta)
        value = (recall_at_n(shifted, 10) + mrr(shifted)) / 2.0
        if value > best:
            best_theta, best = theta, value
    return best_theta


# ---------------------------------------------------------------------------
# score files and ensembling
# ---------------------------------------------------------------------------

ScoreKey = tuple[str, str]


class EnsembleKeyError(ValueError):
    def __init__(self, difference: set):
        self.difference = difference
        shown = sorted(difference)[:20]
        super().__init__(f"score files cover different (context, candidate) keys; "
                         f"symmetric difference ({len(difference)}): {shown}")


def read_scores(path) -> dict[ScoreKey, float]:
    scores: dict[ScoreKey, float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                key = (str(obj["context_id"]), str(obj["candidate_id"]))
                scores[key] = float(obj["score"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad score record ({exc})") from None
    return scores


def lists_from_scores(scores: Mapping[ScoreKey, float],
                      golds: Mapping[str, Iterable] | None = None) -> list[RankedList]:
    """Group a score table by context and rank each group, ordered by context id."""
    grouped: dict[str, list] = defaultdict(list)
    for (ctx, cand), s in scores.items():
        grouped[ctx].append((cand, s))
    golds = golds or {}
    out = []
    for ctx in sorted(grouped):
        cands, vals = zip(*grouped[ctx])
        out.append(rank_scores(ctx, list(cands), list(vals), golds.get(ctx, ())))
    return out


def score_records(lists: Iterable[RankedList]) -> list[dict]:
    return [{"context_id": rl.context_id, "candidate_id": c, "score": s}
            for rl in lists for c, s in zip(rl.candidate_ids, rl.scores)]


def write_scores(path, lists: Iterable[RankedList]):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in score_records(lists):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def ensemble(tables: Sequence[Mapping[ScoreKey, float]]) -> dict[ScoreKey, float]:
    """Per-key arithmetic mean of p_positive across models.

    The sum is exactly rounded (``math.fsum``), so the result does not depend
    on the order of the inputs.
    """
    if not tables:
        raise ValueError("nothing to ensemble")
    keys = set(tables[0])
    diff: set = set()
    for t in tables[1:]:
        diff |= keys ^ set(t)
    if diff:
        raise EnsembleKeyError(diff)
    n = len(tables)
    return {k: math.fsum(t[k] for t in tables) / n for k in sorted(keys)}


# ---------------------------------------------------------------------------
# two-stage retrieval
# ---------------------------------------------------------------------------

def two_stage(stage1_scores: Sequence[float], rerank: Callable[[list[int]], Sequence[float]],
              candidate_ids: Sequence, n: int, context_id="", gold_ids: Iterable = ()) -> RankedList:
    """Prefilter by stage-1 scores, rerank the top ``n`` with a second scorer.

    ``rerank(indices)`` returns stage-2 scores for the given candidate
    positions.  The final list is the stage-2 order over the top ``n``
    followed by the stage-1 order of the remainder.
    """
    if not 1 <= n <= len(candidate_ids):
        raise RankingError(f"top-n {n} outside 1..{len(candidate_ids)}")
    first = rank_scores(context_id, list(candidate_ids), list(stage1_scores), gold_ids)
    position = {c: i for i, c in enumerate(candidate_ids)}
    head = [position[c] for c in first.candidate_ids[:n]]
    second = rank_scores(context_id, [candidate_ids[i] for i in head],
                         [float(s) for s in rerank(head)], gold_ids)
    ids = second.candidate_ids + first.candidate_ids[n:]
    scores = tuple(RERANK_OFFSET + s for s in second.scores) + first.scores[n:]
    return RankedList(context_id, ids, scores, frozenset(gold_ids))
