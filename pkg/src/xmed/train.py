"""Training loop: Adam updates, plateau LR reduction, early stopping, and
best-weight checkpointing on validation loss.

Runs are deterministic for a fixed seed: epoch shuffles key on
(seed, epoch), augmentation draws key on (seed, sample index, epoch), and
batches execute in the sequential schedule.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, augment_sample, rescale
from .errors import ConfigError, ShapeError
from .modelfile import save_model
from .ops import softmax_cross_entropy

EV_CHECKPOINT = "checkpoint_saved"
EV_LR_REDUCED = "lr_reduced"
EV_EARLY_STOP = "early_stopped"


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 50
    plateau_factor: float = 0.2
    plateau_patience: int = 5
    early_stop_patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    min_delta: float = 0.0  # any strict decrease counts as improvement

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError(
                f"plateau_factor must be in (0,1), got {self.plateau_factor}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


class AdamState:
    """First/second moment estimates mirroring a parameter dict."""

    def __init__(self, params):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update, in place, over a whole parameter dict."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape mismatch for {key!r}",
                             got=g.shape, expected=p.shape)
        m = state.m[key]
        v = state.v[key]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * np.square(g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


class PlateauSchedule:
    """Multiply the LR by `factor` after `patience` non-improving epochs."""

    def __init__(self, lr0, factor=0.2, patience=5, min_delta=0.0):
        self.lr = lr0
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = None
        self.counter = 0

    def update(self, val_loss):
        """Feed one epoch's validation loss; returns (lr, reduced_now)."""
        if self.best is None or self.best - val_loss > self.min_delta:
            self.best = val_loss
            self.counter = 0
            return self.lr, False
        self.counter += 1
        if self.counter >= self.patience:
            self.lr *= self.factor
            self.counter = 0
            return self.lr, True
        return self.lr, False


class EarlyStopping:
    """Stop after `patience` consecutive epochs without improvement."""

    def __init__(self, patience=10, min_delta=0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = None
        self.counter = 0

    def update(self, val_loss):
        if self.best is None or self.best - val_loss > self.min_delta:
            self.best = val_loss
            self.counter = 0
            return False
        self.counter += 1
        return self.counter >= self.patience


def checkpoint_best(model, val_loss, best_so_far, path):
    """Write the model file iff val_loss strictly improves on best_so_far.

    Returns (updated_best, saved_now).
    """
    if best_so_far is None or val_loss < best_so_far:
        if path is not None:
            save_model(model, path)
        return val_loss, True
    return best_so_far, False


@dataclass
class TrainLog:
    """Per-epoch history; serializes to JSON lines, one epoch per line."""

    epochs: list = field(default_factory=list)

    def add(self, epoch, train_loss, val_loss, val_accuracy, lr, events):
        self.epochs.append({"epoch": epoch, "train_loss": train_loss,
                            "val_loss": val_loss,
                            "val_accuracy": val_accuracy, "lr": lr,
                            "events": list(events)})

    def to_jsonl(self):
        return "".join(json.dumps(e) + "\n" for e in self.epochs)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


def _epoch_loss(model, images, labels, batch_size):
    """Mean loss and accuracy over a split, in inference mode."""
    total, correct = 0.0, 0
    for i in range(0, len(images), batch_size):
        xb = images[i:i + batch_size]
        yb = labels[i:i + batch_size]
        logits, _, _ = model.forward(xb, mode="infer")
        loss, _ = softmax_cross_entropy(logits, yb)
        total += loss * len(xb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return total / len(images), correct / len(images)


def train(model, train_set, val_set, config, checkpoint_path=None):
    """Run the full recipe and return (model_with_best_weights, TrainLog).

    train_set/val_set are (images, labels) with raw [0,255] float images
    shaped (n,c,h,w). The training split is shuffled and augmented every
    epoch; validation only gets the rescale. On exit the model carries the
    weights of the minimum-validation-loss epoch, bit-exactly.
    """
    train_images, train_labels = train_set
    val_images, val_labels = val_set
    if len(train_images) == 0 or len(val_images) == 0:
        raise ConfigError("train and validation splits must be non-empty")
    train_labels = np.asarray(train_labels)
    val_labels = np.asarray(val_labels)
    val_scaled = np.asarray(val_images, dtype=np.float32) * np.float32(1 / 255)

    log = TrainLog()
    if config.max_epochs == 0:
        return model, log

    aug_cfg = AugmentConfig(seed=config.seed)
    state = AdamState(model.params)
    plateau = PlateauSchedule(config.lr0, config.plateau_factor,
                              config.plateau_patience, config.min_delta)
    stopper = EarlyStopping(config.early_stop_patience, config.min_delta)
    best_loss = None
    best_weights = None
    lr = config.lr0
    seed = config.seed & 0xFFFFFFFFFFFFFFFF

    for epoch in range(config.max_epochs):
        order = np.random.default_rng((seed, epoch)).permutation(
            len(train_images))
        loss_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            if config.augment:
                xb = np.concatenate(
                    [augment_sample(train_images[i:i + 1], aug_cfg, int(i),
                                    epoch) for i in idx]).astype(np.float32)
            else:
                xb = rescale(train_images[idx]).astype(np.float32)
            yb = train_labels[idx]
            logits, _, caches = model.forward(xb, mode="train")
            loss, grad = softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"training loss diverged at epoch {epoch + 1}")
            grads = model.backward(caches, grad)
            adam_step(model.params, grads, state, lr,
                      config.beta1, config.beta2, config.eps)
            loss_sum += loss * len(idx)
        train_loss = loss_sum / len(order)

        val_loss, val_acc = _epoch_loss(model, val_scaled, val_labels,
                                        config.batch_size)
        events = []
        best_loss, saved = checkpoint_best(model, val_loss, best_loss,
                                           checkpoint_path)
        if saved:
            best_weights = model.copy_weights()
            events.append(EV_CHECKPOINT)
        new_lr, reduced = plateau.update(val_loss)
        if reduced:
            events.append(EV_LR_REDUCED)
        should_stop = stopper.update(val_loss)
        if should_stop:
            events.append(EV_EARLY_STOP)
        log.add(epoch + 1, float(train_loss), float(val_loss),
                float(val_acc), float(lr), events)
        lr = new_lr
        if should_stop:
            break

    if best_weights is not None:
        model.set_weights(best_weights)
    return model, log
