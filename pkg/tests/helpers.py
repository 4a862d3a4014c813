"""Shared fixtures for model tests: a toy vocabulary and tiny models."""

import numpy as np

from seqmatch.data import make_batch
from seqmatch.embedding import Vocabulary, random_table
from seqmatch.esim import ESIM, EsimConfig
from seqmatch.siamese import Siamese, SiameseConfig

WORDS = [f"w{i}" for i in range(12)]


def toy_vocab() -> Vocabulary:
    return Vocabulary(WORDS)


def tiny_esim(d_h=4, seed=0, **cfg) -> tuple[ESIM, Vocabulary]:
    vocab = toy_vocab()
    tables = [random_table(vocab, 5) * 5, random_table(vocab, 3) * 5]
    return ESIM.create(tables, [True, True], EsimConfig(d_h=d_h, **cfg), seed=seed), vocab


def tiny_siamese(d_h=4, d_m=2, d_a=3, seed=0, **cfg) -> tuple[Siamese, Vocabulary]:
    vocab = toy_vocab()
    config = SiameseConfig(d_h=d_h, d_m=d_m, d_a=d_a, mlp_hidden=cfg.pop("mlp_hidden", 6), **cfg)
    return Siamese.create([random_table(vocab, 5) * 5], [True], config, seed=seed), vocab


def two_example_batch(vocab: Vocabulary):
    return make_batch([["w1", "w2", "w3", "w4"], ["w5", "w6"]], [["w2", "w7"], ["w8", "w9", "w5"]],
                      [1, 0], vocab)


def jitter(model, scale=0.05, seed=123):
    """Nudge every trainable parameter off exact zeros and ties.

    Zero-initialised biases make ReLU units sit exactly at their kink and
    masked max pooling see exact ties; finite differences are meaningless
    there, so gradient checks run at a generic nearby point.
    """
    rng = np.random.default_rng(seed)
    for p in model.params.trainable().values():
        p.data += rng.normal(scale=scale, size=p.shape)
    for t in model.embeddings.tables:
        t.data[0] = 0.0
