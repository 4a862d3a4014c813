"""Vocabulary, pretrained embedding tables and the input projection layer."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .layers import glorot_uniform
from .tensor import ParamStore, ShapeError, Tensor, concat, gather_rows, matmul, relu, add

PAD, UNK, EOU, EOT = "<pad>", "<unk>", "__eou__", "__eot__"
RESERVED = (PAD, UNK, EOU, EOT)
PAD_ID, UNK_ID = 0, 1

OOV_SCALE = 0.1


class EmbeddingFormatError(ValueError):
    pass


class Vocabulary:
    """Dense token <-> index mapping with the reserved tokens at 0..3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._itos: list[str] = []
        self._stoi: dict[str, int] = {}
        for tok in RESERVED:
            self.add(tok)
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        idx = self._stoi.get(token)
        if idx is None:
            idx = len(self._itos)
            self._itos.append(token)
            self._stoi[token] = idx
        return idx

    def update(self, tokens: Iterable[str]):
        for tok in tokens:
            self.add(tok)

    def __len__(self):
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def index(self, token: str) -> int:
        return self._stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._itos[i] for i in ids]

    @property
    def tokens(self) -> list[str]:
        return list(self._itos)

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self._itos).encode("utf-8")).hexdigest()

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self._itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:len(RESERVED)]) != RESERVED:
            raise EmbeddingFormatError(f"{path}: reserved tokens missing from the first lines")
        vocab = cls()
        for tok in lines[len(RESERVED):]:
            vocab.add(tok)
        if len(vocab) != len(lines):
            raise EmbeddingFormatError(f"{path}: duplicate tokens")
        return vocab


def handle_oov(token: str, dim: int) -> np.ndarray:
    """Deterministic row in [-0.1, 0.1] seeded from a hash of the token."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.uniform(-OOV_SCALE, OOV_SCALE, size=dim)


@dataclass
class LoadResult:
    table: np.ndarray
    loaded: int
    skipped: int
    oov_rows: list[int] = field(default_factory=list)


def _looks_like_header(fields: list[str]) -> bool:
    return len(fields) == 2 and all(f.isdigit() for f in fields)


def load_embedding_file(path, vocab: Vocabulary, expected_dim: int) -> LoadResult:
    """Read a word-per-line text embedding file into a |V| x d table.

    Tokens the vocabulary does not know are skipped and counted.  Vocabulary
    tokens the file does not cover get a hashed OOV row; the PAD row is zero.
    A leading ``count dim`` header line (fastText ``.vec``) is ignored.
    """
    table = np.zeros((len(vocab), expected_dim))
    filled = np.zeros(len(vocab), dtype=bool)
    loaded = skipped = 0
    seen_any = False
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.rstrip(" ").split(" ")
            if lineno == 1 and expected_dim != 1 and _looks_like_header(fields):
                continue
            seen_any = True
            token, values = fields[0], fields[1:]
            if len(values) != expected_dim:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: expected {expected_dim} values, found {len(values)}")
            try:
                row = np.array([float(v) for v in values])
            except ValueError as exc:
                raise EmbeddingFormatError(f"{path}:{lineno}: {exc}") from None
            if token not in vocab:
                skipped += 1
                continue
            idx = vocab.index(token)
            if idx == PAD_ID:
                continue
            table[idx] = row
            filled[idx] = True
            loaded += 1
    if not seen_any:
        raise EmbeddingFormatError(f"{path}: no embedding rows")
    oov = [i for i in range(len(vocab)) if i != PAD_ID and not filled[i]]
    for i in oov:
        table[i] = handle_oov(vocab.token(i), expected_dim)
    return LoadResult(table=table, loaded=loaded, skipped=skipped, oov_rows=oov)


def random_table(vocab: Vocabulary, dim: int) -> np.ndarray:
    """Table with every non-PAD row drawn by :func:`handle_oov`."""
    table = np.zeros((len(vocab), dim))
    for i in range(1, len(vocab)):
        table[i] = handle_oov(vocab.token(i), dim)
    return table


@dataclass
class EmbeddingSet:
    """k embedding tables over one vocabulary, concatenated per token."""

    tables: list[Tensor]

    @classmethod
    def create(cls, store: ParamStore, arrays: Sequence[np.ndarray],
               trainable: Sequence[bool], prefix: str = "emb") -> "EmbeddingSet":
        if not arrays:
            raise ValueError("at least one embedding table is required")
        rows = {a.shape[0] for a in arrays}
        if len(rows) != 1:
            raise ShapeError(f"embedding tables disagree on vocabulary size: {sorted(rows)}")
        tables = []
        for i, (arr, flag) in enumerate(zip(arrays, trainable)):
            arr = np.array(arr, dtype=store.dtype)
            arr[PAD_ID] = 0.0
            tables.append(store.add(f"{prefix}.{i}", arr, trainable=flag))
        return cls(tables)

    @property
    def widths(self) -> list[int]:
        return [t.shape[1] for t in self.tables]

    @property
    def width(self) -> int:
        return sum(self.widths)

    @property
    def vocab_size(self) -> int:
        return self.tables[0].shape[0]


def lookup_concat(emb: EmbeddingSet, ids) -> Tensor:
    """Row t is the concatenation of every table's row for ``ids[t]``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= emb.vocab_size):
        raise IndexError(f"token id outside vocabulary of size {emb.vocab_size}")
    return concat([gather_rows(t, ids, skip_id=PAD_ID) for t in emb.tables], axis=-1)


@dataclass
class ProjectionLayer:
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, store: ParamStore, in_dim: int, d_h: int, rng: np.random.Generator,
               prefix: str = "proj") -> "ProjectionLayer":
        return cls(store.add(f"{prefix}.W", glorot_uniform(rng, in_dim, d_h)),
                   store.add(f"{prefix}.b", np.zeros(d_h)))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


def project(layer: ProjectionLayer, x: Tensor) -> Tensor:
    """ReLU(x W + b): reduces the concatenated embedding width to d_h."""
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"project: input width {x.shape[-1]} != layer width {layer.in_dim}")
    return relu(add(matmul(x, layer.weight), layer.bias))
