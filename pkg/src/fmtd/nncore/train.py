"""Momentum-SGD training with best-validation snapshotting.

The stop rule is either a fixed epoch budget or a validation plateau:
training ends once validation accuracy has not increased for ``patience``
consecutive epochs, and the snapshot from the best-validation epoch is
returned either way.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, predict_labels, _check_batch, _check_labels, _forward_full, _backward_full
from . import layers as L
from ..rng import generator


@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float = 0.1
    momentum: float = 0.9
    lr_decay: float = 1.0
    momentum_decay: float = 1.0
    decay_interval_epochs: int = 10
    dropout_rate: float = 0.5
    batch_size: int = 128
    max_epochs: int = 50
    plateau_patience: int = 5

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass(frozen=True)
class StopRule:
    """``plateau`` stops on stalled validation accuracy; ``fixed`` runs max_epochs."""

    kind: str = "plateau"

    def __post_init__(self) -> None:
        if self.kind not in ("plateau", "fixed"):
            raise ValueError(f"unknown stop rule {self.kind!r}")


@dataclass
class SgdState:
    velocity: dict[str, np.ndarray]
    lr: float
    momentum: float

    @staticmethod
    def fresh(model: ModelParams, hyper: TrainHyper) -> "SgdState":
        return SgdState(
            velocity={k: np.zeros_like(v) for k, v in model.tensors.items()},
            lr=hyper.learning_rate,
            momentum=hyper.momentum,
        )


def sgd_momentum_step(
    params: ModelParams, grads: dict[str, np.ndarray], state: SgdState
) -> tuple[ModelParams, SgdState]:
    """v' = momentum*v - lr*g; theta' = theta + v'.  Math in float64, storage float32."""
    new_tensors: dict[str, np.ndarray] = {}
    new_velocity: dict[str, np.ndarray] = {}
    for name, theta in params.tensors.items():
        g = grads[name]
        v = state.velocity[name].astype(np.float64)
        v_new = state.momentum * v - state.lr * np.asarray(g, dtype=np.float64)
        new_velocity[name] = v_new.astype(np.float32)
        new_tensors[name] = (theta.astype(np.float64) + v_new).astype(np.float32)
    return (
        ModelParams(params.arch, new_tensors, params.provenance),
        SgdState(new_velocity, state.lr, state.momentum),
    )


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = 0.0
    stop_reason: str = ""
    wall_time_s: float = 0.0

    def epochs_run(self) -> int:
        return len(self.epochs)

    def csv_rows(self) -> list[str]:
        rows = ["epoch,train_loss,train_accuracy,val_accuracy"]
        rows += [
            f"{e.epoch},{e.train_loss:.6f},{e.train_accuracy:.6f},{e.val_accuracy:.6f}"
            for e in self.epochs
        ]
        return rows


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the last epoch that completed cleanly."""

    def __init__(self, last_good_epoch: int, history: TrainHistory):
        super().__init__(f"training diverged after epoch {last_good_epoch}")
        self.last_good_epoch = last_good_epoch
        self.history = history


class PlateauTracker:
    """Stop once the running-best validation accuracy stalls for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.epochs_since_improvement = 0

    def update(self, epoch: int, val_accuracy: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_accuracy > self.best:
            self.best = val_accuracy
            self.best_epoch = epoch
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience


def accuracy(model: ModelParams, images: np.ndarray, labels: np.ndarray) -> float:
    pred = predict_labels(model, images)
    return float(np.mean(pred == np.asarray(labels)))


def _batch_loss_grads_correct(model, x, y, dropout_rate, dropout_rng):
    logits, caches = _forward_full(model, x, dropout_rate=dropout_rate, dropout_rng=dropout_rng)
    n = x.shape[0]
    zmax = logits.max(axis=1)
    logsumexp = np.log(np.exp(logits - zmax[:, None]).sum(axis=1)) + zmax
    loss = float(np.mean(logsumexp - logits[np.arange(n), y]))
    dlogits = L.softmax_probs(logits)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads, _ = _backward_full(model, caches, dlogits)
    correct = int(np.sum(logits.argmax(axis=1) == y))
    return loss, grads, correct


def train(
    model: ModelParams,
    train_set,
    val_set,
    hyper: TrainHyper,
    stop_rule: StopRule = StopRule("plateau"),
    seed: int = 0,
) -> tuple[ModelParams, TrainHistory]:
    """Train ``model``; returns the best-validation snapshot and the epoch history.

    ``train_set``/``val_set`` need ``images`` and ``labels`` attributes.  The
    shuffle order and dropout masks are fully determined by ``seed``.
    """
    x_train = _check_batch(model.arch, train_set.images)
    y_train = _check_labels(model.arch, np.asarray(train_set.labels))
    if x_train.shape[0] == 0 or len(val_set.labels) == 0:
        raise ValueError("train and validation sets must be non-empty")

    shuffle_rng = generator(seed, "shuffle")
    dropout_rng = generator(seed, "dropout")
    state = SgdState.fresh(model, hyper)
    tracker = PlateauTracker(hyper.plateau_patience)
    history = TrainHistory()
    best_model = model.copy()
    started = time.perf_counter()
    n = x_train.shape[0]

    for epoch in range(1, hyper.max_epochs + 1):
        perm = shuffle_rng.permutation(n)
        epoch_losses = []
        epoch_correct = 0
        for lo in range(0, n, hyper.batch_size):
            idx = perm[lo : lo + hyper.batch_size]
            loss, grads, correct = _batch_loss_grads_correct(
                model, x_train[idx], y_train[idx], hyper.dropout_rate, dropout_rng
            )
            if not np.isfinite(loss):
                history.stop_reason = "diverged"
                raise TrainingDivergedError(epoch - 1, history)
            model, state = sgd_momentum_step(model, grads, state)
            epoch_losses.append(loss)
            epoch_correct += correct

        val_acc = accuracy(model, val_set.images, val_set.labels)
        history.epochs.append(
            EpochStats(epoch, float(np.mean(epoch_losses)), epoch_correct / n, val_acc)
        )
        improved = val_acc > tracker.best
        stalled = tracker.update(epoch, val_acc)
        if improved:
            best_model = model.copy()
        if stop_rule.kind == "plateau" and stalled:
            history.stop_reason = "plateau"
            break
        if epoch % hyper.decay_interval_epochs == 0:
            state.lr *= hyper.lr_decay
            state.momentum *= hyper.momentum_decay
    else:
        history.stop_reason = "max_epochs"

    history.best_epoch = tracker.best_epoch
    history.best_val_accuracy = float(tracker.best)
    history.wall_time_s = time.perf_counter() - started
    return best_model, history
