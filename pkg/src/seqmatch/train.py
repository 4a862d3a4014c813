"""Cross-entropy training with Adam, epoch loop and checkpoint files.

Checkpoint layout (all integers little-endian)::

    b"SQMCKPT1" | u64 header length | JSON header | raw parameter payloads

The header records the model kind and config, d_h, the vocabulary hash,
embedding widths, the payload dtype and, per parameter, its name, shape,
byte offset and length.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Example, PoolRecord, batchify
from .embedding import Vocabulary, random_table
from .esim import ESIM, AblationFlags, EsimConfig
from .pipeline import rank_records
from .rank import MetricReport, evaluate
from .siamese import Siamese, SiameseConfig
from .tensor import ShapeError, Tensor, backward, log, mean_all, pick

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"SQMCKPT1"
PROB_FLOOR = 1e-12


class CheckpointError(ValueError):
    """Checkpoint is malformed or incompatible with the target model."""


@dataclass
class Hyperparams:
    lr: float = 4e-4
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    d_h: int = 300
    max_c: int = 300
    max_r: int = 30
    ratio: float = 4.0
    ctx_compose: bool = True
    tie_composition: bool = True
    keep_context: str = "last"
    dropout: float = 0.0
    precision: str = "float64"
    clip: float = 0.0
    emb_dim: int = 300
    d_m: int = 4
    d_a: int = 256
    mlp_hidden: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def seed_streams(seed: int) -> dict[str, int]:
    """Independent integer seeds per purpose, all derived from one seed."""
    names = ("init", "shuffle", "sampling", "dropout")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def build_model(kind: str, vocab: Vocabulary, hp: Hyperparams,
                tables: Sequence[np.ndarray] | None = None,
                trainable: Sequence[bool] | None = None):
    if tables is None:
        tables, trainable = [random_table(vocab, hp.emb_dim)], [True]
    trainable = list(trainable) if trainable is not None else [True] * len(tables)
    seed = seed_streams(hp.seed)["init"]
    if kind == "esim":
        cfg = EsimConfig(d_h=hp.d_h, ctx_compose=hp.ctx_compose,
                         tie_composition=hp.tie_composition, dropout=hp.dropout)
        return ESIM.create(tables, trainable, cfg, seed=seed, dtype=hp.dtype)
    if kind == "siamese":
        cfg = SiameseConfig(d_h=hp.d_h, d_m=hp.d_m, d_a=hp.d_a,
                            mlp_hidden=hp.mlp_hidden or hp.d_h, dropout=hp.dropout)
        return Siamese.create(tables, trainable, cfg, seed=seed, dtype=hp.dtype)
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# loss and optimiser
# ---------------------------------------------------------------------------

def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of -log p[label] with probabilities floored at 1e-12."""
    labels = np.asarray(labels, dtype=np.int64)
    return -mean_all(log(pick(probs, labels), floor=PROB_FLOOR))


class Adam:
    """Bias-corrected Adam.

    Parameters whose gradient is ``None`` (nothing reached them) are skipped
    and keep their moment estimates untouched.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 clip: float = 0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], lr: float | None = None):
        lr = self.lr if lr is None else lr
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        for k, g in grads.items():
            if g.shape != params[k].shape:
                raise ShapeError(f"{k}: gradient {g.shape} vs parameter {params[k].shape}")
        if self.clip > 0:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.clip:
                grads = {k: g * (self.clip / norm) for k, g in grads.items()}
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, g in grads.items():
            p = params[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p.data)
                self.v[k] = np.zeros_like(p.data)
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def adam_step(state: Adam, params: dict[str, Tensor], lr: float | None = None):
    state.step(params, lr)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _model_header(model, vocab: Vocabulary) -> dict:
    return {
        "format": "seqmatch-checkpoint",
        "version": 1,
        "kind": model.kind,
        "config": model.config.to_json(),
        "d_h": model.config.d_h,
        "vocab_hash": vocab.hash(),
        "vocab_size": len(vocab),
        "embedding_widths": model.embeddings.widths,
        "embedding_trainable": [bool(t.requires_grad) for t in model.embeddings.tables],
    }


def save_checkpoint(path, model, vocab: Vocabulary, meta: dict | None = None):
    dtype = np.dtype(model.params.dtype).newbyteorder("<")
    header = _model_header(model, vocab)
    header["dtype"] = dtype.str
    header["meta"] = meta or {}
    entries, chunks, offset = [], [], 0
    for name, p in model.params.items():
        blob = np.ascontiguousarray(p.data, dtype=dtype).tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    header["params"] = entries
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in chunks:
            fh.write(blob)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<Q", raw, len(CKPT_MAGIC))
    start = len(CKPT_MAGIC) + 8
    header = json.loads(raw[start:start + n])
    body = start + n
    dtype = np.dtype(header["dtype"])
    arrays = {}
    for e in header["params"]:
        a = body + e["offset"]
        arrays[e["name"]] = np.frombuffer(raw[a:a + e["nbytes"]], dtype=dtype).reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path, model, vocab: Vocabulary) -> dict:
    """Load parameters into ``model`` after validating the header against it."""
    header, arrays = read_checkpoint(path)
    if header.get("kind") != model.kind:
        raise CheckpointError(f"checkpoint holds a {header.get('kind')} model, not {model.kind}")
    if header["d_h"] != model.config.d_h:
        raise CheckpointError(f"checkpoint d_h {header['d_h']} != model d_h {model.config.d_h}")
    if header["vocab_hash"] != vocab.hash():
        raise CheckpointError("vocabulary hash does not match the checkpoint")
    if header["embedding_widths"] != model.embeddings.widths:
        raise CheckpointError(f"embedding widths {header['embedding_widths']} "
                              f"!= {model.embeddings.widths}")
    try:
        model.params.load_state_dict(arrays)
    except (KeyError, ShapeError) as exc:
        raise CheckpointError(str(exc)) from None
    return header


def model_from_checkpoint(path, vocab: Vocabulary, **overrides):
    """Rebuild a model from its checkpoint; ``overrides`` patch the stored config."""
    header, _ = read_checkpoint(path)
    if header["vocab_hash"] != vocab.hash():
        raise CheckpointError("vocabulary hash does not match the checkpoint")
    dtype = np.dtype(header["dtype"]).newbyteorder("=")
    tables = [np.zeros((header["vocab_size"], w)) for w in header["embedding_widths"]]
    config = dict(header["config"], **overrides)
    if header["kind"] == "esim":
        model = ESIM.create(tables, header["embedding_trainable"], EsimConfig(**config), dtype=dtype)
    elif header["kind"] == "siamese":
        model = Siamese.create(tables, header["embedding_trainable"], SiameseConfig(**config), dtype=dtype)
    else:
        raise CheckpointError(f"unknown model kind {header['kind']!r}")
    load_checkpoint(path, model, vocab)
    return model


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    steps: int = 0
    best_epoch: int | None = None
    best_criterion: float | None = None
    checkpoint: Path | None = None


def evaluate_model(model, vocab: Vocabulary, pools: Sequence[PoolRecord], hp: Hyperparams,
                   flags: AblationFlags | None = None) -> MetricReport:
    lists = rank_records(model, vocab, pools, hp.max_c, hp.max_r, flags, hp.keep_context)
    return evaluate(lists)


def train(model, vocab: Vocabulary, examples: Sequence[Example], hp: Hyperparams,
          dev_pools: Sequence[PoolRecord] | None = None, out_dir=None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``model`` in place and keep the best epoch by dev (R@10 + MRR) / 2.

    Without dev pools the last epoch is kept.  When ``out_dir`` is given the
    kept parameters are written to ``out_dir/model.ckpt`` and the per-epoch
    log to ``out_dir/train_log.jsonl``.  On return the model holds the kept
    parameters.
    """
    if not examples:
        raise ValueError("training set is empty")
    seeds = seed_streams(hp.seed)
    shuffle_rng = np.random.default_rng(seeds["shuffle"])
    drop_rng = np.random.default_rng(seeds["dropout"]) if hp.dropout > 0 else None
    opt = Adam(hp.lr, clip=hp.clip)
    params = model.params.trainable()
    flags = AblationFlags(ctx_compose=hp.ctx_compose) if model.kind == "esim" else None
    result = TrainResult()
    best_state = None
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        log_path.write_text("")

    for epoch in range(1, hp.epochs + 1):
        order = shuffle_rng.permutation(len(examples))
        batches = batchify([examples[i] for i in order], hp.batch_size, vocab)
        losses = []
        for batch in batches:
            model.params.zero_grad()
            loss = cross_entropy(model.forward(batch, flags, drop_rng), batch.labels)
            backward(loss)
            opt.step(params)
            losses.append(float(loss.data) * len(batch))
            result.steps += 1
        entry = {"epoch": epoch, "loss": sum(losses) / len(examples), "steps": result.steps}
        if dev_pools:
            report = evaluate_model(model, vocab, dev_pools, hp, flags)
            entry.update({"R@1": report.r1, "R@10": report.r10, "R@50": report.r50,
                          "MRR": report.mrr, "criterion": report.criterion})
            improved = result.best_criterion is None or report.criterion > result.best_criterion
        else:
            improved = True
        if improved:
            result.best_epoch = epoch
            result.best_criterion = entry.get("criterion")
            best_state = model.params.state_dict()
        result.log.append(entry)
        logger.info("epoch %d loss %.6f criterion %s", epoch, entry["loss"], entry.get("criterion"))
        if out_dir is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if on_epoch is not None:
            on_epoch(entry)

    model.params.load_state_dict(best_state)
    if out_dir is not None:
        result.checkpoint = out_dir / "model.ckpt"
        save_checkpoint(result.checkpoint, model, vocab,
                        meta={"epoch": result.best_epoch, "criterion": result.best_criterion,
                              "hyperparams": asdict(hp)})
    return result
