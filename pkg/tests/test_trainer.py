"""Trainer tests: loss values, Adam behavior, determinism, synthetic learning."""

import io
import json
import math

import numpy as np
import pytest

from seqrec import tensor as T
from seqrec.data import split_leave_one_out
from seqrec.errors import ConfigError, DataError, NumericError
from seqrec.metrics import evaluate
from seqrec.model import hydra_config, init_model
from seqrec.tensor import Tensor
from seqrec.trainer import (
    Adam,
    TrainConfig,
    cloze_loss,
    load_training_checkpoint,
    make_synthetic,
    train,
)


class TestClozeLoss:
    def test_uniform_logits_give_log_vocab(self):
        logits = Tensor(np.zeros((2, 3, 4)), requires_grad=True, dtype=np.float64)
        labels = np.array([[0, 1, 0], [2, 0, 0]])
        loss = cloze_loss(logits, labels)
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_confident_correct_is_near_zero(self):
        logits = np.zeros((1, 2, 5))
        logits[0, 1, 3] = 30.0
        labels = np.array([[0, 3]])
        loss = cloze_loss(Tensor(logits, dtype=np.float64), labels)
        assert loss.item() == pytest.approx(0.0, abs=1e-10)

    def test_matches_direct_summation_oracle(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(3, 4, 6))
        labels = rng.integers(0, 6, size=(3, 4))
        labels[:, 0] = 1   # ensure at least one label
        want_terms = []
        for b in range(3):
            for t in range(4):
                if labels[b, t] > 0:
                    row = logits[b, t]
                    want_terms.append(-(row[labels[b, t]] - math.log(np.exp(row).sum())))
        want = float(np.mean(want_terms))
        got = cloze_loss(Tensor(logits, dtype=np.float64), labels).item()
        assert got == pytest.approx(want, abs=1e-10)

    def test_unlabeled_positions_get_exactly_zero_gradient(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True,
                        dtype=np.float64)
        labels = np.array([[0, 2, 0], [0, 0, 1]])
        (g,) = T.grad(cloze_loss(logits, labels), [logits])
        assert np.all(g[0, 0] == 0) and np.all(g[0, 2] == 0)
        assert np.all(g[1, 0] == 0) and np.all(g[1, 1] == 0)
        assert np.any(g[0, 1] != 0) and np.any(g[1, 2] != 0)

    def test_no_labels_is_error(self):
        with pytest.raises(DataError):
            cloze_loss(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), dtype=int))


class TestAdam:
    def test_zero_gradient_changes_nothing(self):
        p = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
        opt = Adam({"p": p}, learning_rate=0.1)
        p.grad = np.zeros(4, dtype=np.float32)
        opt.step()
        np.testing.assert_array_equal(p.data, np.ones(4))

    def test_step_direction(self):
        p = Tensor(np.zeros(3, dtype=np.float64), requires_grad=True, dtype=np.float64)
        opt = Adam({"p": p}, learning_rate=0.5)
        p.grad = np.array([1.0, -2.0, 0.0])
        opt.step()
        # first Adam step moves by ~lr * sign(grad)
        assert p.data[0] < 0 < p.data[1]
        assert p.data[2] == 0.0

    def test_grad_clip_rescales(self):
        p = Tensor(np.zeros(2, dtype=np.float64), requires_grad=True, dtype=np.float64)
        opt = Adam({"p": p})
        p.grad = np.array([300.0, 400.0])
        opt.step(grad_clip=5.0)   # clipped to norm 5: direction preserved
        assert abs(p.data[0] / p.data[1] - (3 / 4)) < 1e-6


def cyclic_setup(users=60, catalog=12, length=10, d=16, max_len=10, seed=0):
    data = make_synthetic("cyclic", users=users, catalog=catalog, length=length,
                          seed=seed)
    view = split_leave_one_out(data.sequences)
    cfg = hydra_config(vocab_size=data.vocab.vocab_size, d=d, max_len=max_len,
                       layers=1, ffn_dim=32, dropout=0.0)
    model = init_model(cfg, seed=seed)
    return data, view, model


class TestTrainLoop:
    def test_zero_learning_rate_keeps_parameters(self):
        _, view, model = cyclic_setup()
        before = {k: p.data.copy() for k, p in model.params.items()}
        train(model, view.train, TrainConfig(epochs=1, learning_rate=0.0, seed=1))
        for k, p in model.params.items():
            np.testing.assert_array_equal(before[k], p.data)

    def test_same_seed_gives_identical_loss_curves(self):
        results = []
        for _ in range(2):
            _, view, model = cyclic_setup()
            res = train(model, view.train, TrainConfig(epochs=3, seed=5))
            results.append([r.loss for r in res.records])
        assert results[0] == results[1]

    def test_loss_decreases_on_synthetic(self):
        _, view, model = cyclic_setup()
        res = train(model, view.train, TrainConfig(epochs=5, seed=0))
        losses = [r.loss for r in res.records]
        assert all(a > b for a, b in zip(losses, losses[1:])), losses

    def test_epoch_log_stream_is_jsonl(self):
        _, view, model = cyclic_setup(users=20)
        stream = io.StringIO()
        train(model, view.train, TrainConfig(epochs=2, seed=0), log_stream=stream)
        lines = [json.loads(s) for s in stream.getvalue().splitlines()]
        assert [rec["epoch"] for rec in lines] == [0, 1]
        assert all("loss" in rec and "wall_seconds" in rec for rec in lines)

    def test_validation_metrics_and_best_checkpoint(self, tmp_path):
        _, view, model = cyclic_setup()
        cfg = TrainConfig(epochs=2, seed=0, eval_every=1)
        res = train(model, view.train, cfg, valid_examples=view.valid,
                    run_dir=tmp_path)
        assert res.records[-1].metrics is not None
        assert (tmp_path / "best_checkpoint.ckpt").exists()
        assert (tmp_path / "checkpoint.ckpt").exists()

    def test_non_finite_loss_aborts_with_numeric_error(self):
        _, view, model = cyclic_setup()
        model.params["head.w2"].data[:] = np.inf
        with pytest.raises(NumericError, match="non-finite"):
            train(model, view.train, TrainConfig(epochs=1, seed=0))

    def test_config_validation(self):
        _, view, model = cyclic_setup(users=10)
        with pytest.raises(ConfigError):
            train(model, view.train, TrainConfig(epochs=0))

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        tcfg = TrainConfig(epochs=4, seed=3)
        _, view, model = cyclic_setup()
        straight = train(model, view.train, tcfg, run_dir=tmp_path / "full")
        final_straight = {k: p.data.copy() for k, p in model.params.items()}

        (tmp_path / "half").mkdir()
        _, view2, model2 = cyclic_setup()
        train(model2, view2.train, TrainConfig(epochs=2, seed=3),
              run_dir=tmp_path / "half")
        model3, opt3, next_epoch = load_training_checkpoint(
            tmp_path / "half" / "checkpoint.ckpt", tcfg)
        assert next_epoch == 2
        resumed = train(model3, view2.train, tcfg, start_epoch=next_epoch,
                        optimizer=opt3)
        for k in final_straight:
            assert np.array_equal(final_straight[k], model3.params[k].data), k
        assert [r.loss for r in straight.records[2:]] == \
            [r.loss for r in resumed.records]


class TestSynthetic:
    def test_cyclic_adjacency(self):
        data = make_synthetic("cyclic", users=30, catalog=50, length=30, seed=1)
        for seq in data.sequences:
            for a, b in zip(seq.items, seq.items[1:]):
                assert b == a % 50 + 1

    def test_cyclic_bayes_is_one(self):
        data = make_synthetic("cyclic", users=5, catalog=10, length=5, seed=0)
        assert data.bayes_hr_at_1() == 1.0

    def test_markov_bayes_equals_top_prob(self):
        data = make_synthetic("markov", users=200, catalog=20, length=15,
                              seed=2, top_prob=0.7, branching=4)
        np.testing.assert_allclose(data.transition.sum(axis=1), 1.0, atol=1e-12)
        assert data.transition.max(axis=1) == pytest.approx(0.7)
        assert data.bayes_hr_at_1() == pytest.approx(0.7)

    def test_markov_sequences_follow_matrix_support(self):
        data = make_synthetic("markov", users=50, catalog=10, length=10, seed=3,
                              top_prob=0.5, branching=3)
        for seq in data.sequences:
            for a, b in zip(seq.items, seq.items[1:]):
                assert data.transition[a - 1, b - 1] > 0

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            make_synthetic("fractal")

    def test_determinism(self):
        a = make_synthetic("cyclic", users=5, catalog=7, length=6, seed=9)
        b = make_synthetic("cyclic", users=5, catalog=7, length=6, seed=9)
        assert [s.items for s in a.sequences] == [s.items for s in b.sequences]


class TestLearning:
    def test_cyclic_pattern_is_learned(self):
        # desk-scale smoke: bidirectional many-heads model should master a
        # deterministic cycle quickly
        data, view, model = cyclic_setup(users=120, catalog=12, length=10, d=16)
        tcfg = TrainConfig(epochs=12, seed=0, learning_rate=3e-3)
        train(model, view.train, tcfg)
        res = evaluate(model, view.test, k=10)
        assert res.hr_at_k >= 0.9
        top1 = model.predict_next(view.test[0].prefix, k=1)[0]
        assert top1 == view.test[0].target
