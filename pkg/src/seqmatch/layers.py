"""Parameterised building blocks shared by the two model families."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ParamStore, Tensor, add, concat, lstm, matmul


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, store: ParamStore, prefix: str, in_dim: int, out_dim: int,
               rng: np.random.Generator) -> "Linear":
        return cls(store.add(f"{prefix}.W", glorot_uniform(rng, in_dim, out_dim)),
                   store.add(f"{prefix}.b", np.zeros(out_dim)))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)


@dataclass
class LSTMCell:
    w_in: Tensor
    w_rec: Tensor
    bias: Tensor

    @classmethod
    def create(cls, store: ParamStore, prefix: str, in_dim: int, d_h: int,
               rng: np.random.Generator) -> "LSTMCell":
        # uniform in +-1/sqrt(d_h); forget-gate bias starts at 1
        bound = 1.0 / np.sqrt(d_h)
        bias = np.zeros(4 * d_h)
        bias[d_h:2 * d_h] = 1.0
        return cls(store.add(f"{prefix}.Wx", rng.uniform(-bound, bound, (in_dim, 4 * d_h))),
                   store.add(f"{prefix}.Wh", rng.uniform(-bound, bound, (d_h, 4 * d_h))),
                   store.add(f"{prefix}.b", bias))


@dataclass
class BiLSTM:
    forward: LSTMCell
    backward: LSTMCell

    @classmethod
    def create(cls, store: ParamStore, prefix: str, in_dim: int, d_h: int,
               rng: np.random.Generator) -> "BiLSTM":
        return cls(LSTMCell.create(store, f"{prefix}.fw", in_dim, d_h, rng),
                   LSTMCell.create(store, f"{prefix}.bw", in_dim, d_h, rng))

    @property
    def hidden(self) -> int:
        return self.forward.w_rec.shape[0]


def bilstm_encode(cell: BiLSTM, x: Tensor, mask) -> Tensor:
    """Forward and backward hidden states side by side: (B, T, 2 d_h)."""
    fw = lstm(x, mask, cell.forward.w_in, cell.forward.w_rec, cell.forward.bias)
    bw = lstm(x, mask, cell.backward.w_in, cell.backward.w_rec, cell.backward.bias, reverse=True)
    return concat([fw, bw], axis=-1)
