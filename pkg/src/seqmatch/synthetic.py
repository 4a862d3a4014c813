"""Small synthetic dialogue corpora with a learnable next-utterance rule.

Every utterance ends with a key token and the next utterance opens with the
same key, so the correct response is recoverable by token-level matching
against the end of the context.  Keys are never reused across the corpus,
which keeps every pool unambiguous.  Topic and filler words add distractors.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import Candidate, Dialogue, Example, PoolRecord, augment, sample_negatives, truncate_example


def _vocab_parts(n_keys: int, n_topics: int, words_per_topic: int, n_filler: int):
    keys = [f"k{i}" for i in range(n_keys)]
    topics = [[f"t{i}w{j}" for j in range(words_per_topic)] for i in range(n_topics)]
    filler = [f"f{i}" for i in range(n_filler)]
    return keys, topics, filler


def make_dialogues(n_dialogues: int = 20, seed: int = 0, n_keys: int = 120, n_topics: int = 6,
                   words_per_topic: int = 8, n_filler: int = 12, min_turns: int = 3,
                   max_turns: int = 6, prefix: str = "d") -> list[Dialogue]:
    rng = np.random.default_rng(seed)
    keys, topics, filler = _vocab_parts(n_keys, n_topics, words_per_topic, n_filler)
    turns = rng.integers(min_turns, max_turns + 1, size=n_dialogues)
    if turns.sum() > n_keys:
        raise ValueError(f"{n_keys} keys cannot cover {int(turns.sum())} utterances")
    order = [keys[i] for i in rng.permutation(n_keys)]
    out = []
    for d, n_turns in enumerate(turns.tolist()):
        topic = topics[int(rng.integers(n_topics))]
        dkeys, order = order[:n_turns], order[n_turns:]
        speaker = "A"
        utts = []
        for t in range(n_turns):
            body = [topic[int(rng.integers(len(topic)))] for _ in range(int(rng.integers(1, 3)))]
            if rng.random() < 0.5:
                body.append(filler[int(rng.integers(len(filler)))])
            toks = ([dkeys[t - 1]] if t else []) + body + [dkeys[t]]
            utts.append((speaker, tuple(toks)))
            if rng.random() < 0.8:
                speaker = "B" if speaker == "A" else "A"
        out.append(Dialogue(f"{prefix}{d}", tuple(utts)))
    return out


def corpus_tokens(n_keys: int = 120, n_topics: int = 6, words_per_topic: int = 8,
                  n_filler: int = 12) -> list[str]:
    keys, topics, filler = _vocab_parts(n_keys, n_topics, words_per_topic, n_filler)
    return keys + [w for t in topics for w in t] + filler


def make_pools(dialogues: Sequence[Dialogue], pool_size: int = 10, seed: int = 0,
               max_c: int = 300, max_r: int = 30) -> tuple[list[Example], list[PoolRecord]]:
    """Pools of one gold plus ``pool_size - 1`` sampled negatives per turn.

    Negatives come from other dialogues only, so no negative repeats an
    utterance (and its keys) already present in the context.  Returns the
    pairs as labelled training examples (the "memorised" set) and the same
    pairs as ranking pools.  Candidate ids are assigned after a shuffle so the
    id tie-break carries no information about the gold.
    """
    per_dialogue = [augment(d) for d in dialogues]
    examples, pools = [], []
    rng = np.random.default_rng(seed)
    for k, (d, positives) in enumerate(zip(dialogues, per_dialogue)):
        others = [ex.response for j, exs in enumerate(per_dialogue) if j != k for ex in exs]
        mixed = sample_negatives(positives, others, pool_size - 1, seed=[seed, k])
        for i, pos in enumerate(positives):
            group = mixed[i * pool_size:(i + 1) * pool_size]
            examples.extend(truncate_example(ex, max_c, max_r) for ex in group)
            perm = rng.permutation(pool_size)
            cands = [None] * pool_size
            gold = ""
            for slot, ex in zip(perm, group):
                cid = f"c{slot}"
                cands[slot] = Candidate(cid, ex.response)
                if ex.label == 1:
                    gold = cid
            context = d.utterances[:pos.turn]
            pools.append(PoolRecord(f"{pos.dialogue_id}/{pos.turn}", tuple(context), tuple(cands), (gold,)))
    return examples, pools
