import json
import math

import numpy as np
import pytest

from helpers import tiny_esim, tiny_siamese, two_example_batch
from seqmatch.embedding import Vocabulary, random_table
from seqmatch.synthetic import corpus_tokens, make_dialogues, make_pools
from seqmatch.tensor import ShapeError, Tensor
from seqmatch.train import (
    Adam, CheckpointError, Hyperparams, build_model, cross_entropy, evaluate_model, load_checkpoint,
    model_from_checkpoint, read_checkpoint, save_checkpoint, seed_streams, train,
)


class TestCrossEntropy:
    def test_certain(self):
        assert float(cross_entropy(Tensor([[0.0, 1.0]]), [1]).data) == 0.0

    def test_half(self):
        assert float(cross_entropy(Tensor([[0.5, 0.5]]), [0]).data) == pytest.approx(0.693147, abs=1e-6)

    def test_batch_mean(self):
        loss = cross_entropy(Tensor([[0.0, 1.0], [0.5, 0.5]]), [1, 1])
        assert float(loss.data) == pytest.approx(math.log(2) / 2)

    def test_zero_probability_is_floored(self):
        loss = float(cross_entropy(Tensor([[1.0, 0.0]]), [1]).data)
        assert loss == pytest.approx(-math.log(1e-12))


class TestAdam:
    def param(self, value, grad):
        p = Tensor(np.array(value, dtype=float), requires_grad=True)
        p.grad = np.array(grad, dtype=float)
        return p

    def test_zero_gradient_is_identity(self):
        p = self.param([1.0, -2.0], [0.0, 0.0])
        Adam(0.1).step({"p": p})
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_closed_form(self):
        # m_hat = g, v_hat = g^2  =>  update = lr * g / (|g| + eps)
        lr, g = 0.01, np.array([0.3, -4.0, 1e-3])
        p = self.param([0.0, 0.0, 0.0], g)
        Adam(lr).step({"p": p})
        np.testing.assert_allclose(p.data, -lr * g / (np.abs(g) + 1e-8), rtol=1e-12)
        np.testing.assert_allclose(np.abs(p.data), lr, rtol=1e-4)

    def test_second_step_against_reference_recurrence(self):
        g1, g2, lr = 0.5, -0.2, 0.1
        p = self.param([1.0], [g1])
        opt = Adam(lr)
        opt.step({"p": p})
        p.grad = np.array([g2])
        opt.step({"p": p})
        m, v, x = 0.0, 0.0, 1.0
        for t, g in enumerate([g1, g2], start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p.data[0] == pytest.approx(x, rel=1e-12)
        assert opt.t == 2

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Adam(0.1).step({"p": self.param([1.0, 2.0], [1.0])})

    def test_untouched_parameters_are_skipped(self):
        p = Tensor(np.ones(2), requires_grad=True)
        Adam(0.1).step({"p": p})
        np.testing.assert_array_equal(p.data, 1.0)

    def test_clip(self):
        p = self.param([0.0], [100.0])
        opt = Adam(0.1, clip=1.0)
        opt.step({"p": p})
        np.testing.assert_allclose(opt.m["p"], [0.1])


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        Hyperparams(lr=0)
    with pytest.raises(ValueError):
        Hyperparams(batch_size=0)
    with pytest.raises(ValueError):
        Hyperparams(precision="float16")


def test_seed_streams_are_distinct_and_stable():
    a, b = seed_streams(3), seed_streams(3)
    assert a == b
    assert len(set(a.values())) == len(a)
    assert seed_streams(4) != a


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model, vocab = tiny_esim()
        save_checkpoint(tmp_path / "m.ckpt", model, vocab, meta={"note": 1})
        other, _ = tiny_esim(seed=99)
        header = load_checkpoint(tmp_path / "m.ckpt", other, vocab)
        assert header["meta"] == {"note": 1}
        for name, p in model.params.items():
            assert p.data.tobytes() == other.params[name].data.tobytes(), name

    def test_rebuild_from_checkpoint(self, tmp_path):
        model, vocab = tiny_siamese()
        save_checkpoint(tmp_path / "s.ckpt", model, vocab)
        again = model_from_checkpoint(tmp_path / "s.ckpt", vocab)
        assert again.params.checksum() == model.params.checksum()
        b = two_example_batch(vocab)
        np.testing.assert_array_equal(again.score_batch(b), model.score_batch(b))

    def test_wrong_d_h(self, tmp_path):
        model, vocab = tiny_esim(d_h=4)
        save_checkpoint(tmp_path / "m.ckpt", model, vocab)
        with pytest.raises(CheckpointError, match="d_h"):
            load_checkpoint(tmp_path / "m.ckpt", tiny_esim(d_h=5)[0], vocab)

    def test_wrong_vocabulary(self, tmp_path):
        model, vocab = tiny_esim()
        save_checkpoint(tmp_path / "m.ckpt", model, vocab)
        with pytest.raises(CheckpointError, match="vocabulary"):
            load_checkpoint(tmp_path / "m.ckpt", model, Vocabulary(["other"]))

    def test_wrong_kind(self, tmp_path):
        model, vocab = tiny_esim()
        save_checkpoint(tmp_path / "m.ckpt", model, vocab)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.ckpt", tiny_siamese()[0], vocab)

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"garbage")
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / "x")

    def test_float32_precision(self, tmp_path):
        vocab = Vocabulary(corpus_tokens())
        hp = Hyperparams(d_h=4, emb_dim=4, precision="float32")
        model = build_model("esim", vocab, hp)
        save_checkpoint(tmp_path / "m.ckpt", model, vocab)
        header, arrays = read_checkpoint(tmp_path / "m.ckpt")
        assert header["dtype"] == "<f4"
        assert all(a.dtype == np.float32 for a in arrays.values())


@pytest.fixture(scope="module")
def small_corpus():
    dialogues = make_dialogues(4, seed=5)
    examples, pools = make_pools(dialogues, pool_size=5, seed=5)
    return Vocabulary(corpus_tokens()), examples, pools


def small_hp(**kw):
    base = dict(lr=0.003, batch_size=8, epochs=3, d_h=6, emb_dim=6, d_m=2, d_a=4, seed=1)
    base.update(kw)
    return Hyperparams(**base)


class TestTrainLoop:
    def test_one_batch_one_step(self, small_corpus):
        vocab, examples, _ = small_corpus
        hp = small_hp(epochs=1, batch_size=len(examples))
        assert train(build_model("esim", vocab, hp), vocab, examples, hp).steps == 1

    def test_empty_dataset(self, small_corpus):
        vocab, _, _ = small_corpus
        with pytest.raises(ValueError):
            train(build_model("esim", vocab, small_hp()), vocab, [], small_hp())

    def test_log_and_best_checkpoint(self, small_corpus, tmp_path):
        vocab, examples, pools = small_corpus
        hp = small_hp()
        model = build_model("esim", vocab, hp)
        result = train(model, vocab, examples, hp, dev_pools=pools, out_dir=tmp_path)
        log = [json.loads(line) for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
        assert [e["epoch"] for e in log] == [1, 2, 3]
        assert set(log[0]) >= {"epoch", "loss", "R@1", "R@10", "R@50", "MRR", "criterion"}
        assert result.best_criterion == max(e["criterion"] for e in log)
        reloaded = model_from_checkpoint(result.checkpoint, vocab)
        assert evaluate_model(reloaded, vocab, pools, hp).criterion == result.best_criterion

    def test_same_seed_same_trajectory(self, small_corpus):
        vocab, examples, _ = small_corpus
        hp = small_hp(dropout=0.1)
        runs = []
        for _ in range(2):
            model = build_model("siamese", vocab, hp)
            log = train(model, vocab, examples, hp).log
            runs.append(([e["loss"] for e in log], model.params.checksum()))
        assert runs[0] == runs[1]

    def test_frozen_tables_never_change(self, small_corpus):
        vocab, examples, _ = small_corpus
        hp = small_hp(epochs=1)
        model = build_model("esim", vocab, hp, tables=[random_table(vocab, 6)], trainable=[False])
        before = model.params.checksum(["emb.0"])
        proj_before = model.params.checksum(["proj.W"])
        train(model, vocab, examples, hp)
        assert model.params.checksum(["emb.0"]) == before
        assert model.params.checksum(["proj.W"]) != proj_before
