"""ESIM cross-attention scorer for (context, response) pairs.

The pipeline per batch is: multi-embedding lookup and ReLU projection, a
shared BiLSTM encoder, dot-product soft alignment in both directions, the
heuristic matching features ``[s; d; s - d; s * d]`` through a ReLU layer, a
composition BiLSTM, masked max+mean pooling and a tanh MLP with a 2-way
softmax.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import Batch
from .embedding import EmbeddingSet, ProjectionLayer, lookup_concat, project
from .layers import BiLSTM, Linear, bilstm_encode
from .tensor import (ParamStore, ShapeError, Tensor, concat, dropout, masked_max,
                     masked_mean, masked_softmax, matmul, mul, relu, sub, swapaxes, tanh)


@dataclass(frozen=True)
class AblationFlags:
    # False gives the "-CtxDec" variant: no context-side local matching or composition
    ctx_compose: bool = True


@dataclass
class EsimConfig:
    d_h: int = 300
    ctx_compose: bool = True
    tie_composition: bool = True
    dropout: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class MatchState:
    cs: Tensor
    rs: Tensor
    e: Tensor
    alpha: Tensor
    beta: Tensor
    cd: Tensor
    rd: Tensor
    cl: Tensor | None
    rl: Tensor
    pooled: Tensor
    probs: Tensor


def attention_scores(cs: Tensor, rs: Tensor) -> Tensor:
    """e[i, j] = <cs_i, rs_j>, batched over the leading axis when present."""
    if cs.shape[-1] != rs.shape[-1]:
        raise ShapeError(f"attention_scores: state widths {cs.shape[-1]} and {rs.shape[-1]} differ")
    return matmul(cs, swapaxes(rs, -1, -2))


def align(e: Tensor, cs: Tensor, rs: Tensor, c_mask, r_mask):
    """Soft alignment both ways.

    Returns ``(alpha, beta, cd, rd)``: alpha normalises each context row over
    real response positions, beta each response column over real context
    positions; ``cd``/``rd`` are the resulting dual vectors.
    """
    c_mask = np.asarray(c_mask)
    r_mask = np.asarray(r_mask)
    alpha = masked_softmax(e, r_mask[..., None, :], axis=-1)
    beta = masked_softmax(e, c_mask[..., :, None], axis=-2)
    cd = matmul(alpha, rs)
    rd = matmul(swapaxes(beta, -1, -2), cs)
    return alpha, beta, cd, rd


def local_match(ff: Linear, s: Tensor, d: Tensor) -> Tensor:
    """ReLU(F([s; d; s - d; s * d])) per position."""
    if s.shape != d.shape:
        raise ShapeError(f"local_match: states {s.shape} vs dual vectors {d.shape}")
    return relu(ff(concat([s, d, sub(s, d), mul(s, d)], axis=-1)))


def _pool(x: Tensor, mask: np.ndarray) -> Tensor:
    m = mask[..., None]
    return concat([masked_max(x, m, axis=-2), masked_mean(x, m, axis=-2)], axis=-1)


class ESIM:
    kind = "esim"

    def __init__(self, store: ParamStore, config: EsimConfig, embeddings: EmbeddingSet,
                 proj: ProjectionLayer, encoder: BiLSTM, ff: Linear, comp: BiLSTM,
                 comp_ctx: BiLSTM, mlp_hidden: Linear, mlp_out: Linear):
        self.params = store
        self.config = config
        self.embeddings = embeddings
        self.proj = proj
        self.encoder = encoder
        self.ff = ff
        self.comp = comp
        self.comp_ctx = comp_ctx
        self.mlp_hidden = mlp_hidden
        self.mlp_out = mlp_out

    @classmethod
    def create(cls, tables: Sequence[np.ndarray], trainable: Sequence[bool], config: EsimConfig,
               seed=0, dtype=np.float64) -> "ESIM":
        rng = np.random.default_rng(seed)
        store = ParamStore(dtype)
        d_h = config.d_h
        emb = EmbeddingSet.create(store, tables, trainable)
        proj = ProjectionLayer.create(store, emb.width, d_h, rng)
        encoder = BiLSTM.create(store, "enc", d_h, d_h, rng)
        ff = Linear.create(store, "match", 8 * d_h, d_h, rng)
        comp = BiLSTM.create(store, "comp", d_h, d_h, rng)
        comp_ctx = comp if config.tie_composition else BiLSTM.create(store, "comp_ctx", d_h, d_h, rng)
        hidden = Linear.create(store, "mlp.hidden", 8 * d_h, d_h, rng)
        out = Linear.create(store, "mlp.out", d_h, 2, rng)
        return cls(store, config, emb, proj, encoder, ff, comp, comp_ctx, hidden, out)

    def flags(self) -> AblationFlags:
        return AblationFlags(ctx_compose=self.config.ctx_compose)

    def match(self, batch: Batch, flags: AblationFlags | None = None,
              rng: np.random.Generator | None = None) -> MatchState:
        flags = flags or self.flags()
        p = self.config.dropout if rng is not None else 0.0
        cm, rm = batch.context_mask, batch.response_mask
        xc = project(self.proj, dropout(lookup_concat(self.embeddings, batch.context_ids), p, rng))
        xr = project(self.proj, dropout(lookup_concat(self.embeddings, batch.response_ids), p, rng))
        cs = bilstm_encode(self.encoder, xc, cm)
        rs = bilstm_encode(self.encoder, xr, rm)
        e = attention_scores(cs, rs)
        alpha, beta, cd, rd = align(e, cs, rs, cm, rm)
        rl = local_match(self.ff, rs, rd)
        cl = local_match(self.ff, cs, cd) if flags.ctx_compose else None
        probs, pooled = compose_and_classify(self, cl if flags.ctx_compose else cs, rl, cm, rm,
                                             flags, rng)
        return MatchState(cs, rs, e, alpha, beta, cd, rd, cl, rl, pooled, probs)

    def forward(self, batch: Batch, flags: AblationFlags | None = None,
                rng: np.random.Generator | None = None) -> Tensor:
        """(B, 2) probabilities ``(p_negative, p_positive)``."""
        return self.match(batch, flags, rng).probs

    def score_batch(self, batch: Batch, flags: AblationFlags | None = None) -> np.ndarray:
        return self.forward(batch, flags).data[:, 1].astype(np.float64)


def compose_and_classify(model: ESIM, c_side: Tensor, rl: Tensor, c_mask, r_mask,
                         flags: AblationFlags, rng: np.random.Generator | None = None):
    """Compose, pool and classify; returns ``(probs, pooled)``.

    ``c_side`` holds the context's local matching vectors, or its encoded
    states when ``flags.ctx_compose`` is off, in which case those states are
    pooled directly.  Pooled order is [c_max; c_mean; r_max; r_mean].
    """
    p = model.config.dropout if rng is not None else 0.0
    rv = bilstm_encode(model.comp, rl, r_mask)
    if flags.ctx_compose:
        c_side = bilstm_encode(model.comp_ctx, c_side, c_mask)
    pooled = concat([_pool(c_side, c_mask), _pool(rv, r_mask)], axis=-1)
    hidden = tanh(model.mlp_hidden(dropout(pooled, p, rng)))
    return masked_softmax(model.mlp_out(hidden), None, axis=-1), pooled
