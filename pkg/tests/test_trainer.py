from types import SimpleNamespace

import numpy as np
import pytest

from lesionbench.netcore import NetworkModel
from lesionbench.trainer import (
    EarlyStopping,
    Hyperparams,
    TrainHistory,
    TrainingError,
    evaluate,
    select_best,
    summarize_accuracies,
    train,
)


def split(x, y):
    return SimpleNamespace(images=x, labels=y)


def separable(n=200, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 1, 2))
    y = np.where(x[:, 0, 0] + 0.5 * x[:, 0, 1] > 0, 2, 1)
    x[:, 0, 0] += np.where(y == 2, 0.3, -0.3)  # margin
    return x, y


def toy_dataset(seed=0):
    x, y = separable(200, seed)
    xv, yv = separable(100, seed + 1)
    return {"train": split(x, y), "val": split(xv, yv)}


def toy_model(seed=0, dtype=np.float64):
    return NetworkModel.build((1, 2), blocks=(), dense_units=8, seed=seed, dtype=dtype)


def fast(**kw):
    kw = {"learning_rate": 0.05, "batch_size_train": 16, "max_epochs": 50, **kw}
    kw.setdefault("patience", kw["max_epochs"] - 1)
    return Hyperparams(**kw)


class TestHyperparams:
    def test_defaults(self):
        hp = Hyperparams()
        assert (hp.learning_rate, hp.momentum, hp.batch_size_train, hp.batch_size_eval) == (5e-5, 0.9, 128, 32)
        assert (hp.max_epochs, hp.loss_stop_threshold, hp.patience, hp.min_delta) == (125, 0.05, 10, 5e-4)

    @pytest.mark.parametrize("kw", [dict(patience=125), dict(batch_size_train=0), dict(momentum=1.0),
                                    dict(learning_rate=-1.0), dict(optimizer="rmsprop")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            Hyperparams(**kw)


class TestTrain:
    def test_separable_reaches_full_accuracy(self):
        ds = toy_dataset()
        m = toy_model()
        initial, _ = evaluate(m, ds["train"].images, ds["train"].labels)
        reached = []
        train(m, ds, fast(), seed=1,
              on_epoch=lambda e, *_: reached.append(evaluate(m, ds["train"].images, ds["train"].labels)[1]))
        assert 1.0 in reached and reached.index(1.0) + 1 < 50
        final, _ = evaluate(m, ds["train"].images, ds["train"].labels)
        assert final < initial

    def test_zero_learning_rate_keeps_weights(self):
        ds = toy_dataset()
        m = toy_model()
        before = [p.copy() for p in m.params()]
        _, hist = train(m, ds, Hyperparams(learning_rate=0.0, max_epochs=30, patience=10), seed=0)
        for a, b in zip(before, m.params()):
            assert np.array_equal(a, b)
        # constant validation loss never improves after epoch 1
        assert hist.epochs == 11 and hist.stop_reason == "early_stop" and hist.best_epoch == 1

    def test_loss_threshold_stop(self):
        m, hist = train(toy_model(), toy_dataset(), fast(loss_stop_threshold=0.3), seed=1)
        assert hist.stop_reason == "loss_threshold" and hist.train_loss[-1] < 0.3
        assert m.metadata["stop_reason"] == "loss_threshold"
        assert all(v >= 0.3 for v in hist.train_loss[:-1])

    def test_max_epochs_stop(self):
        _, hist = train(toy_model(), toy_dataset(), Hyperparams(learning_rate=1e-4, max_epochs=3, patience=2,
                                                                min_delta=0.0), seed=1)
        assert hist.stop_reason == "max_epochs" and hist.epochs == 3
        assert len(hist.train_loss) == len(hist.val_loss) == len(hist.val_acc) == 3

    def test_momentum_off_single_step_is_gradient_descent(self):
        ds = toy_dataset()
        ds["train"] = split(ds["train"].images[:16], ds["train"].labels[:16])
        m = toy_model()
        before = [p.copy() for p in m.params()]
        # a single full batch makes the shuffle irrelevant to the gradient
        _, grads = m.loss_and_grads(ds["train"].images, ds["train"].labels - 1)
        # the loss threshold ends training after exactly one update
        hp = Hyperparams(learning_rate=0.1, momentum=0.0, batch_size_train=16, max_epochs=2,
                         patience=1, loss_stop_threshold=10.0)
        train(m, ds, hp, seed=0)
        for p, g, got in zip(before, grads, m.params()):
            np.testing.assert_allclose(got, p - 0.1 * g, rtol=0, atol=1e-15)

    def test_adam_first_step_is_normalized_gradient(self):
        ds = toy_dataset()
        ds["train"] = split(ds["train"].images[:16], ds["train"].labels[:16])
        m = toy_model()
        before = [p.copy() for p in m.params()]
        _, grads = m.loss_and_grads(ds["train"].images, ds["train"].labels - 1)
        hp = Hyperparams(learning_rate=0.01, batch_size_train=16, max_epochs=2, patience=1,
                         loss_stop_threshold=10.0, optimizer="adam")
        train(m, ds, hp, seed=0)
        # bias-corrected moments of a single gradient are g and g**2
        for p, g, got in zip(before, grads, m.params()):
            np.testing.assert_allclose(got, p - 0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-12)

    def test_early_stop_restores_best_weights(self):
        ds = toy_dataset()
        ds["val"] = split(ds["val"].images, 3 - ds["val"].labels)  # validation worsens as training improves
        m = toy_model()
        snaps = []
        hp = Hyperparams(learning_rate=0.01, max_epochs=40, patience=3, batch_size_train=16)
        _, hist = train(m, ds, hp, seed=2, on_epoch=lambda e, *_: snaps.append([p.copy() for p in m.params()]))
        assert hist.stop_reason == "early_stop"
        assert hist.epochs == hist.best_epoch + 3
        assert not np.array_equal(snaps[-1][0], m.params()[0])
        for a, b in zip(snaps[hist.best_epoch - 1], m.params()):
            assert np.array_equal(a, b)

    def test_reproducible(self, tmp_path):
        runs = []
        for _ in range(2):
            _, hist = train(toy_model(), toy_dataset(), fast(max_epochs=5), seed=3)
            hist.write_csv(tmp_path / "h.csv")
            runs.append((tmp_path / "h.csv").read_bytes())
        assert runs[0] == runs[1]
        back = TrainHistory.read_csv(tmp_path / "h.csv")
        assert back.epochs == hist.epochs and back.val_loss == [float(f"{v:.9g}") for v in hist.val_loss]
        assert runs[0].splitlines()[0] == b"epoch,train_loss,val_loss,val_acc"

    def test_shuffle_seed_matters(self):
        hp = fast(max_epochs=2)
        _, a = train(toy_model(), toy_dataset(), hp, seed=1)
        _, b = train(toy_model(), toy_dataset(), hp, seed=2)
        assert a.train_loss != b.train_loss

    def test_divergence_raises(self):
        ds = toy_dataset()
        m = toy_model()
        m.layers[1].weights[...] = np.inf
        with pytest.raises(TrainingError, match="epoch 1"):
            train(m, ds, fast(), seed=0)


class TestEarlyStopping:
    def test_strictly_increasing(self):
        es = EarlyStopping(patience=10, min_delta=5e-4)
        stopped = None
        for epoch in range(1, 30):
            es.update(epoch, 1.0 + epoch)
            if es.should_stop:
                stopped = epoch
                break
        assert stopped == 11 and es.best_epoch == 1

    def test_min_delta(self):
        es = EarlyStopping(patience=2, min_delta=0.1)
        assert es.update(1, 1.0)
        assert not es.update(2, 0.95)  # improvement below min_delta
        assert es.update(3, 0.85)


class TestEvaluate:
    def test_batch_size_invariance(self):
        x, y = separable(100, 4)
        m = toy_model(5)
        l1, a1 = evaluate(m, x, y, batch_size=1)
        l32, a32 = evaluate(m, x, y, batch_size=32)
        assert a1 == a32 and abs(l1 - l32) < 1e-6

    def test_uniform_predictor_chance(self):
        m = toy_model()
        m.set_params([np.zeros_like(p) for p in m.params()])
        y = np.repeat([1, 2], 500)
        loss, acc = evaluate(m, np.ones((1000, 1, 2)), y)
        assert abs(acc - 0.5) <= 0.05 and loss == pytest.approx(np.log(2))

    def test_perfect_model(self):
        m = toy_model()
        for p in m.params():
            p[...] = 0
        m.layers[1].weights[0, 0] = 1.0   # hidden unit 0 copies feature 0
        m.layers[3].weights[0, 1] = 10.0  # and votes for class 2
        m.layers[3].bias[0] = 1.0
        x = np.zeros((40, 1, 2))
        x[:20, 0, 0] = 1.0
        y = np.r_[np.full(20, 2), np.full(20, 1)]
        assert evaluate(m, x, y)[1] == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(toy_model(), np.zeros((0, 1, 2)), np.zeros(0))


class TestSelection:
    def test_three_runs(self):
        idx, mean, std = summarize_accuracies([0.97, 0.99, 0.98])
        assert idx == 1
        assert mean == pytest.approx(0.98, abs=1e-12)
        assert std == pytest.approx(0.00816, abs=1e-5)

    def test_single_and_ties(self):
        assert summarize_accuracies([0.7]) == (0, 0.7, 0.0)
        assert summarize_accuracies([0.9, 0.9, 0.9])[0] == 0
        assert summarize_accuracies([0.9, 0.9, 0.9])[2] == 0.0

    def test_select_best_on_holdout(self):
        x, y = separable(60, 7)
        good = toy_model()
        train(good, toy_dataset(), fast(max_epochs=20), seed=0)
        bad = toy_model()
        bad.set_params([np.zeros_like(p) for p in bad.params()])
        idx, accs, mean, std = select_best([bad, good, bad], split(x, y))
        assert idx == 1 and accs[1] > accs[0] == accs[2]
