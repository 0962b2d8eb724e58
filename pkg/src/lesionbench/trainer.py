"""Mini-batch training with early stopping and best-of-N selection.

The default optimizer is SGD with classic momentum.  Adam is available for
short CPU runs, where plain SGD tends to stall on the chance-level plateau.
"""
from __future__ import annotations

import csv
import logging
import statistics
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as _rng
from .netcore import NetworkModel, NumericError, softmax_xent

log = logging.getLogger(__name__)


OPTIMIZERS = ("sgd", "adam")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 5e-5
    momentum: float = 0.9
    batch_size_train: int = 128
    batch_size_eval: int = 32
    max_epochs: int = 125
    loss_stop_threshold: float = 0.05
    patience: int = 10
    min_delta: float = 5e-4
    runs_per_dataset: int = 3
    shuffle_seed: int = 0
    optimizer: str = "sgd"
    beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning rate must be >= 0 and momentum in [0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not 0 <= self.beta2 < 1 or self.adam_epsilon <= 0:
            raise ValueError("beta2 must be in [0, 1) and adam_epsilon positive")
        if min(self.batch_size_train, self.batch_size_eval, self.max_epochs,
               self.patience, self.runs_per_dataset) < 1:
            raise ValueError("batch sizes, epochs, patience and runs must be positive")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    stop_reason: str | None = None
    best_epoch: int | None = None

    @property
    def epochs(self):
        return len(self.train_loss)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
            for k, row in enumerate(zip(self.train_loss, self.val_loss, self.val_acc), start=1):
                w.writerow([k, *(f"{v:.9g}" for v in row)])

    @classmethod
    def read_csv(cls, path):
        h = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                h.train_loss.append(float(row["train_loss"]))
                h.val_loss.append(float(row["val_loss"]))
                h.val_acc.append(float(row["val_acc"]))
        return h


def class_index(labels):
    """Stored labels are classes 1/2; the network's outputs are indices 0/1."""
    return np.asarray(labels, dtype=np.int64) - 1


class EarlyStopping:
    """Stop once the monitored loss has not improved by ``min_delta`` for
    ``patience`` consecutive epochs."""

    def __init__(self, patience, min_delta):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.best_epoch = None
        self.wait = 0

    def update(self, epoch, value) -> bool:
        """Record one epoch; returns True when this epoch is the new best."""
        if value < self.best - self.min_delta:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self):
        return self.wait >= self.patience


def evaluate(model: NetworkModel, images, labels, batch_size=32):
    """Mean cross-entropy and accuracy over a split, in stored order."""
    n = len(labels)
    if n == 0:
        raise ValueError("cannot evaluate an empty split")
    y = class_index(labels)
    n_classes = model.layers[-1].weights.shape[-1]
    loss_sum, correct = 0.0, 0
    for i in range(0, n, batch_size):
        logits, _ = model.forward(np.asarray(images[i:i + batch_size]), record=False)
        loss, _ = softmax_xent(logits, np.eye(n_classes)[y[i:i + batch_size]])
        loss_sum += float(loss.sum(dtype=np.float64))
        correct += int((logits.argmax(axis=-1) == y[i:i + batch_size]).sum())
    return loss_sum / n, correct / n


def _split_parts(split):
    return split.images, split.labels


class _Sgd:
    """``v <- momentum * v - lr * grad``; ``w <- w + v``."""

    def __init__(self, params, hp, dtype):
        self.velocity = [np.zeros_like(p) for p in params]
        self.lr = dtype.type(hp.learning_rate)
        self.mu = dtype.type(hp.momentum)

    def step(self, params, grads):
        for p, v, g in zip(params, self.velocity, grads):
            v *= self.mu
            v -= self.lr * g
            p += v


class _Adam:
    """Adam with bias-corrected moments; ``momentum`` is the first-moment decay."""

    def __init__(self, params, hp, dtype):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.b1, self.b2 = hp.momentum, hp.beta2
        self.lr, self.eps = hp.learning_rate, hp.adam_epsilon
        self.dtype = dtype
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        t = self.dtype.type
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v, g in zip(params, self.m, self.v, grads):
            m *= t(self.b1)
            m += t(1 - self.b1) * g
            v *= t(self.b2)
            v += t(1 - self.b2) * g * g
            p -= t(self.lr / c1) * m / (np.sqrt(v / t(c2)) + t(self.eps))


def train(model: NetworkModel, dataset, hp: Hyperparams, seed=None, on_epoch=None,
          chunk=32):
    """Train ``model`` in place on ``dataset['train']``, validating on ``dataset['val']``.

    SGD update: ``v <- momentum * v - lr * grad``; ``w <- w + v``, with the
    gradient of the batch-mean loss (Adam when ``hp.optimizer == "adam"``).  Stops at ``max_epochs``, when the
    epoch-mean training loss falls below ``loss_stop_threshold``, or by early
    stopping on validation loss (best weights restored).
    """
    x_train, y_train = _split_parts(dataset["train"])
    x_val, y_val = _split_parts(dataset["val"])
    seed = hp.shuffle_seed if seed is None else seed
    y_index = class_index(y_train)
    n = len(y_index)

    params = model.params()
    opt = (_Adam if hp.optimizer == "adam" else _Sgd)(params, hp, model.dtype)
    stopper = EarlyStopping(hp.patience, hp.min_delta)
    best_params = None
    history = TrainHistory()

    for epoch in range(1, hp.max_epochs + 1):
        order = _rng.generator(_rng.derive_seed(seed, "epoch", epoch)).permutation(n)
        loss_sum = 0.0
        for start in range(0, n, hp.batch_size_train):
            idx = order[start:start + hp.batch_size_train]
            try:
                loss, grads = model.loss_and_grads(np.asarray(x_train[idx]), y_index[idx], chunk=chunk)
            except NumericError as exc:
                raise TrainingError(f"training diverged in epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged in epoch {epoch}")
            loss_sum += loss * len(idx)
            opt.step(params, grads)
        train_loss = loss_sum / n
        val_loss, val_acc = evaluate(model, x_val, y_val, hp.batch_size_eval)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.val_acc.append(val_acc)
        if stopper.update(epoch, val_loss):
            best_params = [p.copy() for p in params]
        log.info("epoch %d: train %.4f val %.4f acc %.4f", epoch, train_loss, val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss, val_acc)
        if train_loss < hp.loss_stop_threshold:
            history.stop_reason = "loss_threshold"
        elif stopper.should_stop:
            history.stop_reason = "early_stop"
            for p, b in zip(params, best_params):
                p[...] = b
        elif epoch == hp.max_epochs:
            history.stop_reason = "max_epochs"
        if history.stop_reason:
            break

    history.best_epoch = stopper.best_epoch
    model.metadata["trained_epochs"] = history.epochs
    model.metadata["stop_reason"] = history.stop_reason
    return model, history


def summarize_accuracies(accuracies):
    """Best index (ties to the lowest), mean and population std."""
    acc = [float(a) for a in accuracies]
    if not acc:
        raise ValueError("need at least one candidate")
    return int(np.argmax(acc)), statistics.fmean(acc), statistics.pstdev(acc)


def select_best(models, holdout, batch_size=32):
    """Pick the model with the highest holdout accuracy.

    Returns ``(index, accuracies, mean, std)``.
    """
    accs = [evaluate(m, holdout.images, holdout.labels, batch_size)[1] for m in models]
    best, mean, std = summarize_accuracies(accs)
    return best, accs, mean, std
