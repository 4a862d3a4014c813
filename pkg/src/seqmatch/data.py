"""Dialogue ingestion, augmentation, negative sampling, truncation, batching.

Input files are JSON lines with pre-tokenised text.  A ``tokens`` field may be
a list of strings or a single whitespace-separated string.

dialogue-json-lines::

    {"id": "d1", "utterances": [{"speaker": "A", "tokens": ["hi"]}, ...]}

pool-json-lines::

    {"id": "c1", "context": [{"speaker": "A", "tokens": [...]}, ...],
     "candidates": [{"id": "r1", "tokens": [...]}, ...], "gold_ids": ["r1"]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .embedding import EOT, EOU, PAD_ID, Vocabulary


class DataFormatError(ValueError):
    pass


Utterance = tuple[str, tuple[str, ...]]


@dataclass(frozen=True)
class Dialogue:
    id: str
    utterances: tuple[Utterance, ...]


@dataclass(frozen=True)
class Candidate:
    id: str
    tokens: tuple[str, ...]


@dataclass(frozen=True)
class PoolRecord:
    id: str
    context: tuple[Utterance, ...]
    candidates: tuple[Candidate, ...]
    gold_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class Example:
    context: tuple[str, ...]
    response: tuple[str, ...]
    label: int
    dialogue_id: str = ""
    turn: int = 0

    def to_json(self) -> dict:
        return {"context": list(self.context), "response": list(self.response),
                "label": self.label, "dialogue_id": self.dialogue_id, "turn": self.turn}

    @classmethod
    def from_json(cls, obj: dict) -> "Example":
        return cls(tuple(_tokens(obj["context"])), tuple(_tokens(obj["response"])),
                   int(obj["label"]), str(obj.get("dialogue_id", "")), int(obj.get("turn", 0)))


@dataclass
class Batch:
    context_ids: np.ndarray
    context_mask: np.ndarray
    response_ids: np.ndarray
    response_mask: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.labels.shape[0]


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def _tokens(value) -> list[str]:
    if isinstance(value, str):
        return value.split()
    if isinstance(value, list) and all(isinstance(t, str) for t in value):
        return list(value)
    raise DataFormatError(f"tokens must be a string or a list of strings, got {type(value).__name__}")


def _utterances(items) -> tuple[Utterance, ...]:
    if not isinstance(items, list):
        raise DataFormatError("utterances must be a list")
    return tuple((str(u["speaker"]), tuple(_tokens(u["tokens"]))) for u in items)


def _parse_dialogue(obj: dict) -> Dialogue:
    return Dialogue(str(obj["id"]), _utterances(obj["utterances"]))


def _parse_pool(obj: dict) -> PoolRecord:
    cands = tuple(Candidate(str(c["id"]), tuple(_tokens(c["tokens"]))) for c in obj["candidates"])
    ids = [c.id for c in cands]
    if len(set(ids)) != len(ids):
        raise DataFormatError("candidate ids are not unique")
    gold = tuple(str(g) for g in obj.get("gold_ids", []))
    unknown = set(gold) - set(ids)
    if unknown:
        raise DataFormatError(f"gold ids {sorted(unknown)} are not candidates")
    return PoolRecord(str(obj["id"]), _utterances(obj["context"]), cands, gold)


_PARSERS = {"dialogue-json-lines": _parse_dialogue, "pool-json-lines": _parse_pool}


def ingest(path, format: str = "dialogue-json-lines") -> list:
    """Parse a JSON-lines file into Dialogues or PoolRecords.

    Blank lines are ignored.  Any malformed line raises
    :class:`DataFormatError` naming the file and line number.
    """
    try:
        parse = _PARSERS[format]
    except KeyError:
        raise ValueError(f"unknown format {format!r}; expected one of {sorted(_PARSERS)}") from None
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(parse(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, DataFormatError) as exc:
                detail = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
                raise DataFormatError(f"{path}:{lineno}: {detail}") from None
    return records


def write_jsonl(path, objs: Iterable[dict]):
    with open(path, "w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def read_examples(path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(Example.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# serialisation and augmentation
# ---------------------------------------------------------------------------

def serialize_context(utterances: Sequence[Utterance]) -> list[str]:
    """Flatten utterances, closing each with __eou__ and each speaker turn with __eot__."""
    if not utterances:
        raise ValueError("cannot serialise an empty context")
    out: list[str] = []
    for k, (speaker, tokens) in enumerate(utterances):
        out.extend(tokens)
        out.append(EOU)
        if k + 1 == len(utterances) or utterances[k + 1][0] != speaker:
            out.append(EOT)
    return out


def augment(dialogue: Dialogue) -> list[Example]:
    """Every utterance after the first becomes a positive response to its prefix."""
    utts = dialogue.utterances
    if len(utts) < 2:
        raise ValueError(f"dialogue {dialogue.id!r} has fewer than 2 utterances")
    return [Example(tuple(serialize_context(utts[:t])), tuple(utts[t][1]), 1, dialogue.id, t)
            for t in range(1, len(utts))]


def sample_negatives(positives: Sequence[Example], pool: Sequence[Sequence[str]],
                     ratio: float, seed) -> list[Example]:
    """Interleave each positive with ``ratio`` sampled negatives.

    Negatives are drawn uniformly without replacement from ``pool``, skipping
    entries identical to the gold response.  A fractional ratio gives each
    positive ``floor(ratio)`` negatives plus one more with probability equal
    to the fractional part.
    """
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    if len(pool) < math.ceil(ratio):
        raise ValueError(f"pool of {len(pool)} responses is smaller than ratio {ratio}")
    pool = [tuple(p) for p in pool]
    rng = np.random.default_rng(seed)
    base, frac = int(math.floor(ratio)), ratio - math.floor(ratio)
    out: list[Example] = []
    for pos in positives:
        k = base + (1 if frac > 0 and rng.random() < frac else 0)
        chosen = _draw_excluding(rng, pool, pos.response, k)
        out.append(pos)
        out.extend(Example(pos.context, pool[j], 0, pos.dialogue_id, pos.turn) for j in chosen)
    return out


def _draw_excluding(rng: np.random.Generator, pool: list[tuple], gold: tuple, k: int) -> list[int]:
    n = len(pool)
    draw = rng.choice(n, size=min(n, 2 * k + 4), replace=False)
    picked = [int(j) for j in draw if pool[j] != gold][:k]
    if len(picked) == k:
        return picked
    allowed = np.array([j for j in range(n) if pool[j] != gold])
    if allowed.size < k:
        raise ValueError(f"only {allowed.size} pool entries differ from the gold response; need {k}")
    return [int(j) for j in rng.choice(allowed, size=k, replace=False)]


def truncate(context: Sequence, response: Sequence, max_c: int, max_r: int,
             keep_context: str = "last") -> tuple[list, list]:
    """Context keeps its last ``max_c`` tokens, response its first ``max_r``.

    ``keep_context="first"`` cuts the context from the end instead.
    """
    if max_c < 1 or max_r < 1:
        raise ValueError("maximum lengths must be >= 1")
    ctx = list(context)
    if len(ctx) > max_c:
        ctx = ctx[-max_c:] if keep_context == "last" else ctx[:max_c]
    return ctx, list(response)[:max_r]


def truncate_example(ex: Example, max_c: int, max_r: int, keep_context: str = "last") -> Example:
    c, r = truncate(ex.context, ex.response, max_c, max_r, keep_context)
    return Example(tuple(c), tuple(r), ex.label, ex.dialogue_id, ex.turn)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def pad_ids(rows: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    if any(len(r) == 0 for r in rows):
        raise ValueError("cannot batch an empty token sequence")
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(rows), width))
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
        mask[i, :len(r)] = 1.0
    return ids, mask


def make_batch(contexts: Sequence[Sequence[str]], responses: Sequence[Sequence[str]],
               labels: Sequence[int], vocab: Vocabulary) -> Batch:
    c_ids, c_mask = pad_ids([vocab.encode(c) for c in contexts])
    r_ids, r_mask = pad_ids([vocab.encode(r) for r in responses])
    return Batch(c_ids, c_mask, r_ids, r_mask, np.asarray(labels, dtype=np.int64))


def batchify(examples: Sequence[Example], batch_size: int, vocab: Vocabulary) -> list[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [make_batch([e.context for e in chunk], [e.response for e in chunk],
                       [e.label for e in chunk], vocab)
            for chunk in (examples[i:i + batch_size] for i in range(0, len(examples), batch_size))]


def debatchify(batch: Batch) -> list[tuple[list[int], list[int], int]]:
    """Recover (context ids, response ids, label) at real positions."""
    out = []
    for i in range(len(batch)):
        c = batch.context_ids[i][batch.context_mask[i] > 0].tolist()
        r = batch.response_ids[i][batch.response_mask[i] > 0].tolist()
        out.append((c, r, int(batch.labels[i])))
    return out


@dataclass
class PrepareStats:
    dialogues: int = 0
    positives: int = 0
    negatives: int = 0
    ratio_target: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def ratio_achieved(self) -> float:
        return self.negatives / self.positives if self.positives else 0.0

    def to_json(self) -> dict:
        return {"dialogues": self.dialogues, "positives": self.positives,
                "negatives": self.negatives, "total": self.positives + self.negatives,
                "ratio_target": self.ratio_target, "ratio_achieved": self.ratio_achieved,
                **self.extra}


def prepare_examples(dialogues: Sequence[Dialogue], ratio: float, seed, max_c: int, max_r: int,
                     keep_context: str = "last") -> tuple[list[Example], PrepareStats]:
    """augment -> sample negatives from all corpus responses -> truncate."""
    positives = [ex for d in dialogues if len(d.utterances) >= 2 for ex in augment(d)]
    pool = [ex.response for ex in positives]
    mixed = sample_negatives(positives, pool, ratio, seed)
    examples = [truncate_example(ex, max_c, max_r, keep_context) for ex in mixed]
    stats = PrepareStats(dialogues=len(dialogues), positives=len(positives),
                         negatives=len(mixed) - len(positives), ratio_target=ratio)
    return examples, stats
