"""Training loop: sparse categorical cross-entropy, Adam, ReduceLROnPlateau,
EarlyStopping and best-checkpoint saving, all monitoring validation accuracy.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .checkpoint import save_checkpoint
from .data import AugmentConfig, DatasetError, DatasetSplit, augment, shuffle_and_batch
from .model import Model, forward
from .tensor import NonFiniteError, ShapeError, Tape, Tensor

log = logging.getLogger(__name__)


def sparse_ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    return ops.sparse_softmax_cross_entropy(logits, np.asarray(labels))


# ------------------------------------------------------------------- adam


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to ``params``.

    Parameters absent from ``grads`` are left untouched. The whole step is
    rejected, before any mutation, if a gradient is non-finite or misshapen.
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam: gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adam: non-finite gradient for {name}; step aborted")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)


# -------------------------------------------------------------- callbacks


@dataclass
class ReduceLROnPlateau:
    factor: float = 0.5
    patience: int = 3
    min_lr: float = 1e-6
    best: float = -np.inf
    wait: int = 0

    def update(self, value: float, lr: float) -> float:
        """Return the learning rate for the next epoch. Ties are not
        improvements."""
        if value > self.best:
            self.best = value
            self.wait = 0
            return lr
        self.wait += 1
        if self.wait >= self.patience:
            self.wait = 0
            if lr > self.min_lr:
                new = max(lr * self.factor, self.min_lr)
                log.info("reducing learning rate %.3g -> %.3g", lr, new)
                return new
        return lr


@dataclass
class EarlyStopping:
    patience: int = 6
    best: float = -np.inf
    wait: int = 0

    def update(self, value: float) -> bool:
        """Return True when training should stop."""
        if value > self.best:
            self.best = value
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


@dataclass
class CallbackState:
    """ModelCheckpoint bookkeeping: best monitored value and its weights."""
    best_val_acc: float = -np.inf
    best_epoch: int = 0
    best_weights: dict | None = None

    def update(self, epoch: int, value: float, model: Model) -> bool:
        if value > self.best_val_acc:
            self.best_val_acc = value
            self.best_epoch = epoch
            self.best_weights = model.state()
            return True
        return False


# ------------------------------------------------------------------- fit


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 20
    lr: float = 1e-4
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    min_lr: float = 1e-6
    early_stop_patience: int = 6
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    seed: int = 0
    checkpoint_path: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float


LOG_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr")


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = 0
    best_val_acc: float = float("nan")

    def __len__(self):
        return len(self.records)

    def lr_sequence(self) -> list[float]:
        return [r.lr for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_FIELDS)
            for r in self.records:
                w.writerow([r.epoch] + [repr(float(getattr(r, f))) for f in LOG_FIELDS[1:]])

    @classmethod
    def from_csv(cls, path) -> TrainingLog:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        recs = [EpochRecord(int(r["epoch"]), *(float(r[f]) for f in LOG_FIELDS[1:])) for r in rows]
        return cls(recs)


def loss_and_accuracy(model: Model, split: DatasetSplit, batch_size: int = 64) -> tuple[float, float]:
    """Inference-mode mean cross-entropy and accuracy over ``split``."""
    total_loss = 0.0
    correct = 0
    for i in range(0, len(split), batch_size):
        x = split.images[i:i + batch_size]
        y = split.labels[i:i + batch_size]
        logits = forward(model, x).logits
        total_loss += float(sparse_ce_loss(logits, y).data) * len(y)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return total_loss / len(split), correct / len(split)


def train_step(model: Model, images: np.ndarray, labels: np.ndarray, opt: AdamState,
               rng: np.random.Generator) -> tuple[float, int]:
    """One optimisation step; returns (batch loss, correct predictions)."""
    with Tape() as tape:
        out = forward(model, images, training=True, rng=rng)
        loss = sparse_ce_loss(out.logits, labels)
    grads = tape.backward(loss)
    named = {name: grads[t] for name, t in model.params.items() if t in grads}
    adam_step(model.params, named, opt)
    return float(loss.data), int((out.logits.data.argmax(axis=1) == labels).sum())


def fit(model: Model, train_split: DatasetSplit, val_split: DatasetSplit,
        config: TrainConfig | None = None) -> TrainingLog:
    """Train until the epoch cap or early stopping; best weights are restored
    at the end either way."""
    config = config or TrainConfig()
    if len(train_split) == 0 or len(val_split) == 0:
        raise DatasetError("fit needs non-empty training and validation splits")
    k = model.config.num_classes
    for s in (train_split, val_split):
        if s.labels.max() >= k:
            raise DatasetError(f"labels exceed the model's {k} classes")

    shuffle_ss, drop_ss, aug_ss = np.random.SeedSequence(config.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)
    aug_rng = np.random.default_rng(aug_ss)

    opt = AdamState(lr=config.lr)
    plateau = ReduceLROnPlateau(config.plateau_factor, config.plateau_patience, config.min_lr)
    stopper = EarlyStopping(config.early_stop_patience)
    best = CallbackState()
    history = TrainingLog()

    def finish():
        if best.best_weights is not None:
            model.load_state(best.best_weights)
        history.best_epoch = best.best_epoch
        history.best_val_acc = best.best_val_acc
        if config.log_path:
            history.to_csv(config.log_path)

    try:
        for epoch in range(1, config.epochs + 1):
            lr_used = opt.lr
            seed = int(shuffle_rng.integers(2**63))
            loss_sum = 0.0
            correct = 0
            for batch in shuffle_and_batch(train_split, config.batch_size, seed):
                x = batch.images
                if config.augment is not None:
                    x = augment(x, config.augment, aug_rng)
                loss, c = train_step(model, x, batch.labels, opt, drop_rng)
                if not np.isfinite(loss):
                    raise NonFiniteError(f"non-finite training loss at epoch {epoch}")
                loss_sum += loss * len(batch.labels)
                correct += c
            val_loss, val_acc = loss_and_accuracy(model, val_split)
            rec = EpochRecord(epoch, loss_sum / len(train_split), correct / len(train_split),
                              val_loss, val_acc, lr_used)
            history.records.append(rec)
            log.info("epoch %d loss %.4f acc %.4f val_loss %.4f val_acc %.4f lr %.3g",
                     epoch, rec.train_loss, rec.train_acc, val_loss, val_acc, lr_used)

            if best.update(epoch, val_acc, model) and config.checkpoint_path:
                save_checkpoint(model, config.checkpoint_path)
            opt.lr = plateau.update(val_acc, opt.lr)
            if stopper.update(val_acc):
                history.stopped_early = True
                log.info("early stopping at epoch %d (best epoch %d)", epoch, best.best_epoch)
                break
    except NonFiniteError:
        finish()
        raise
    finish()
    return history
