"""Plain mini-batch SGD and a tiny CSV training log."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .nn import Classifier, as_targets, sgd_step
from .rng import stream


@dataclass
class SGDConfig:
    learning_rate: float = 0.05
    batch_size: int = 32


@dataclass
class EpochRecord:
    epoch: int
    clean_loss: float
    adversarial_loss: float = float("nan")
    validation_accuracy: float = float("nan")
    clean_samples: int = 0
    adversarial_samples: int = 0


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)

    COLUMNS = ("epoch", "clean_loss", "adversarial_loss", "validation_accuracy",
               "clean_samples", "adversarial_samples")

    def add(self, record: EpochRecord) -> None:
        self.records.append(record)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow([r.epoch, f"{r.clean_loss:.9g}", f"{r.adversarial_loss:.9g}",
                            f"{r.validation_accuracy:.9g}", r.clean_samples,
                            r.adversarial_samples])


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def accuracy(classifier: Classifier, X: np.ndarray, y: np.ndarray) -> float:
    """Fraction predicted as ``y``; a NULL prediction is simply wrong."""
    if len(y) == 0:
        return float("nan")
    pred = np.concatenate([classifier.predict(X[i:i + 2048]) for i in range(0, len(y), 2048)])
    return float(np.mean(pred == y))


def train_epoch(classifier: Classifier, X: np.ndarray, targets: np.ndarray,
                sgd: SGDConfig, rng: np.random.Generator,
                dropout_rng: np.random.Generator | None = None) -> float:
    """One shuffled pass; returns the mean training loss."""
    T = as_targets(targets, classifier.class_count, len(X))
    total = 0.0
    for idx in batches(len(X), sgd.batch_size, rng):
        losses, g = classifier.loss_and_param_gradient(X[idx], T[idx], train_mode=True,
                                                       rng=dropout_rng)
        sgd_step(classifier, g, sgd.learning_rate)
        total += float(losses.sum())
    return total / max(len(X), 1)


def fit(classifier: Classifier, X: np.ndarray, targets, epochs: int, sgd: SGDConfig,
        seed: int, stream_name: str = "train",
        validation: tuple[np.ndarray, np.ndarray] | None = None,
        on_epoch: Callable[[int, Classifier], None] | None = None) -> TrainingLog:
    """Train in place for ``epochs`` passes over ``(X, targets)``."""
    log = TrainingLog()
    shuffle = stream(seed, stream_name, "shuffle")
    drop = stream(seed, stream_name, "dropout")
    T = as_targets(targets, classifier.class_count, len(X))
    for epoch in range(1, epochs + 1):
        loss = train_epoch(classifier, X, T, sgd, shuffle, drop)
        val = accuracy(classifier, *validation) if validation is not None else float("nan")
        log.add(EpochRecord(epoch, loss, validation_accuracy=val, clean_samples=len(X)))
        if on_epoch is not None:
            on_epoch(epoch, classifier)
    return log
