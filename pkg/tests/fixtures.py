"""The overfit fixture shared by the training tests and the acceptance gate.

40 synthetic texture images, 2 classes, model at scale 0.125 (16x16 input).
The point is to memorise a tiny set, so regularisers that fight memorisation
are switched off: no augmentation, no dropout, and callbacks with patience
above the epoch cap so they never fire. Train and validation are the same
split. lr 1e-3 with batch 10 converged on 10/10 seeds in a sweep; the
default 1e-4 cannot move the weights far enough in 240 steps.
"""
import time

from aagnet.data import DatasetSplit
from aagnet.model import ModelConfig, build_model
from aagnet.synthetic import synthetic_split
from aagnet.train import TrainConfig, fit, loss_and_accuracy

OVERFIT_EPOCHS = 60
OVERFIT_SEEDS = (0, 1, 2, 3, 4)


def overfit_split(seed):
    images, labels = synthetic_split([20, 20], size=16, seed=seed)
    return DatasetSplit(images, labels, ["stripes_h", "stripes_v"])


def overfit_config(seed, epochs=OVERFIT_EPOCHS):
    return TrainConfig(epochs=epochs, batch_size=10, lr=1e-3, augment=None, seed=seed,
                       early_stop_patience=epochs + 1, plateau_patience=epochs + 1)


def overfit_model(seed):
    cfg = ModelConfig.scaled(0.125, num_classes=2, gate_dropout=0.0, head_dropout1=0.0,
                             head_dropout2=0.0)
    return build_model(cfg, seed=seed)


def overfit_run(seed, epochs=OVERFIT_EPOCHS):
    """Returns (final train accuracy, TrainingLog, wall seconds)."""
    split = overfit_split(seed)
    model = overfit_model(seed)
    t0 = time.perf_counter()
    log = fit(model, split, split, overfit_config(seed, epochs))
    acc = loss_and_accuracy(model, split)[1]
    return acc, log, time.perf_counter() - t0
