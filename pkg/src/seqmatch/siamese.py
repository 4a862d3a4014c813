"""Siamese sentence encoder with multi-head self-attention pooling.

Context and response go through the same projection + BiLSTM.  Each head of
the attention network produces a distribution over positions; the weighted
sums of hidden states are flattened into one vector per sentence.  Pairs are
classified from ``[v_c; v_r; |v_c - v_r|; v_c * v_r]`` by an MLP with two
ReLU hidden layers (the second with an additive shortcut).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Batch, pad_ids
from .embedding import EmbeddingSet, ProjectionLayer, Vocabulary, lookup_concat, project
from .layers import BiLSTM, Linear, bilstm_encode
from .tensor import (ParamStore, ShapeError, Tensor, absolute, add, concat, dropout,
                     masked_softmax, matmul, mul, relu, reshape, sub, swapaxes)

CACHE_MAGIC = b"SQMENC01"


class StaleCacheError(RuntimeError):
    """Cached encodings were produced by different parameters."""


@dataclass
class SiameseConfig:
    d_h: int = 400
    d_m: int = 4
    d_a: int = 256
    mlp_hidden: int = 400
    dropout: float = 0.0

    @property
    def vector_width(self) -> int:
        return 2 * self.d_h * self.d_m

    def to_json(self) -> dict:
        return asdict(self)


def self_attention(w1: Linear, w2: Linear, H: Tensor, mask) -> Tensor:
    """A = softmax over positions of W2 ReLU(W1 H + b1) + b2, shape (B, T, d_m)."""
    logits = w2(relu(w1(H)))
    return masked_softmax(logits, np.asarray(mask)[..., :, None], axis=-2)


def attentive_pool(A: Tensor, H: Tensor) -> Tensor:
    """V = A^T H flattened row-major to (B, d_m * 2 d_h)."""
    V = matmul(swapaxes(A, -1, -2), H)
    return reshape(V, V.shape[:-2] + (V.shape[-2] * V.shape[-1],))


class Siamese:
    kind = "siamese"

    def __init__(self, store: ParamStore, config: SiameseConfig, embeddings: EmbeddingSet,
                 proj: ProjectionLayer, encoder: BiLSTM, att1: Linear, att2: Linear,
                 mlp1: Linear, mlp2: Linear, mlp_out: Linear):
        self.params = store
        self.config = config
        self.embeddings = embeddings
        self.proj = proj
        self.encoder = encoder
        self.att1 = att1
        self.att2 = att2
        self.mlp1 = mlp1
        self.mlp2 = mlp2
        self.mlp_out = mlp_out

    @classmethod
    def create(cls, tables: Sequence[np.ndarray], trainable: Sequence[bool],
               config: SiameseConfig, seed=0, dtype=np.float64) -> "Siamese":
        rng = np.random.default_rng(seed)
        store = ParamStore(dtype)
        c = config
        emb = EmbeddingSet.create(store, tables, trainable)
        proj = ProjectionLayer.create(store, emb.width, c.d_h, rng)
        encoder = BiLSTM.create(store, "enc", c.d_h, c.d_h, rng)
        att1 = Linear.create(store, "att.1", 2 * c.d_h, c.d_a, rng)
        att2 = Linear.create(store, "att.2", c.d_a, c.d_m, rng)
        mlp1 = Linear.create(store, "mlp.1", 4 * c.vector_width, c.mlp_hidden, rng)
        mlp2 = Linear.create(store, "mlp.2", c.mlp_hidden, c.mlp_hidden, rng)
        out = Linear.create(store, "mlp.out", c.mlp_hidden, 2, rng)
        return cls(store, config, emb, proj, encoder, att1, att2, mlp1, mlp2, out)

    def hidden_states(self, ids, mask, rng=None) -> Tensor:
        p = self.config.dropout if rng is not None else 0.0
        x = project(self.proj, dropout(lookup_concat(self.embeddings, ids), p, rng))
        return bilstm_encode(self.encoder, x, mask)

    def encode(self, ids, mask, rng=None) -> Tensor:
        H = self.hidden_states(ids, mask, rng)
        return attentive_pool(self_attention(self.att1, self.att2, H, mask), H)

    def classify(self, vc: Tensor, vr: Tensor, rng=None) -> Tensor:
        if vc.shape != vr.shape:
            raise ShapeError(f"pair_classify: vector shapes {vc.shape} and {vr.shape} differ")
        p = self.config.dropout if rng is not None else 0.0
        x = concat([vc, vr, absolute(sub(vc, vr)), mul(vc, vr)], axis=-1)
        h = _shortcut(self.mlp1, dropout(x, p, rng))
        h = _shortcut(self.mlp2, h)
        return masked_softmax(self.mlp_out(h), None, axis=-1)

    def forward(self, batch: Batch, flags=None, rng=None) -> Tensor:
        vc = self.encode(batch.context_ids, batch.context_mask, rng)
        vr = self.encode(batch.response_ids, batch.response_mask, rng)
        return self.classify(vc, vr, rng)

    def score_batch(self, batch: Batch, flags=None) -> np.ndarray:
        return self.forward(batch).data[:, 1].astype(np.float64)


def _shortcut(layer: Linear, x: Tensor) -> Tensor:
    out = relu(layer(x))
    return add(out, x) if out.shape == x.shape else out


def pair_classify(model: Siamese, vc, vr) -> np.ndarray:
    """p_positive for already-encoded vectors (rows of ``vc`` against rows of ``vr``)."""
    dt = model.params.dtype
    vc = Tensor(np.atleast_2d(np.asarray(vc, dtype=dt)))
    vr = Tensor(np.atleast_2d(np.asarray(vr, dtype=dt)))
    return model.classify(vc, vr).data[:, 1].astype(np.float64)


# ---------------------------------------------------------------------------
# corpus encoding cache
# ---------------------------------------------------------------------------

@dataclass
class EncodedTable:
    ids: list[str]
    vectors: np.ndarray  # (count, 2 d_h d_m) float32
    d_h: int
    d_m: int
    checksum: str

    def __len__(self):
        return len(self.ids)

    def lookup(self, ids: Sequence[str]) -> np.ndarray:
        index = {k: i for i, k in enumerate(self.ids)}
        missing = [k for k in ids if k not in index]
        if missing:
            raise KeyError(f"ids not in encoded table: {missing[:5]}")
        return self.vectors[[index[k] for k in ids]]

    def save(self, path):
        header = json.dumps({"d_h": self.d_h, "d_m": self.d_m, "count": len(self.ids),
                             "dim": int(self.vectors.shape[1]) if self.ids else 2 * self.d_h * self.d_m,
                             "checksum": self.checksum, "ids": self.ids}, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CACHE_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(np.ascontiguousarray(self.vectors, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "EncodedTable":
        raw = Path(path).read_bytes()
        if raw[:len(CACHE_MAGIC)] != CACHE_MAGIC:
            raise ValueError(f"{path}: not an encoded-corpus cache")
        (n,) = struct.unpack_from("<I", raw, len(CACHE_MAGIC))
        start = len(CACHE_MAGIC) + 4
        header = json.loads(raw[start:start + n])
        payload = np.frombuffer(raw[start + n:], dtype="<f4")
        count, dim = header["count"], header["dim"]
        if payload.size != count * dim:
            raise ValueError(f"{path}: payload holds {payload.size} floats, header says {count}x{dim}")
        return cls(list(header["ids"]), payload.reshape(count, dim).astype(np.float32),
                   header["d_h"], header["d_m"], header["checksum"])

    def check(self, model: Siamese):
        checksum = model.params.checksum()
        if checksum != self.checksum:
            raise StaleCacheError("encoded corpus was built with different siamese parameters")


def encode_corpus(model: Siamese, sentences: Sequence[tuple[str, Sequence[str]]],
                  vocab: Vocabulary, batch_size: int = 64) -> EncodedTable:
    """Encode each (id, tokens) sentence once into a float32 table."""
    c = model.config
    ids = [sid for sid, _ in sentences]
    if len(set(ids)) != len(ids):
        raise ValueError("sentence ids must be unique")
    rows = []
    for i in range(0, len(sentences), batch_size):
        chunk = sentences[i:i + batch_size]
        tok_ids, mask = pad_ids([vocab.encode(toks) for _, toks in chunk])
        rows.append(model.encode(tok_ids, mask).data.astype(np.float32))
    vectors = np.concatenate(rows) if rows else np.zeros((0, c.vector_width), dtype=np.float32)
    return EncodedTable(ids, vectors, c.d_h, c.d_m, model.params.checksum())
