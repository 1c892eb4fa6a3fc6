"""NULL labeling and robust (adversarial) training.

NULL labeling trains a classifier with one extra output. Clean samples get
label-smoothed targets with zero NULL mass; adversarial samples built with
:func:`~nullnet.attacks.stg_batch` get a NULL probability that grows with the
number of perturbed features. That growth curve is measured once, after a
short clean warm-up, by running MG on validation data.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import attacks
from .data import Dataset
from .errors import ConfigError
from .nn import Classifier, NetworkSpec, sgd_step
from .rng import stream
from .training import EpochRecord, SGDConfig, TrainingLog, accuracy, batches, fit


# -- targets -------------------------------------------------------------------

def smoothed_clean_target(y: int, K: int, q: float, has_null: bool = False) -> np.ndarray:
    """``q`` on the ground truth, ``(1-q)/(K-1)`` elsewhere, 0 on NULL."""
    if K < 2:
        raise ValueError("label smoothing needs K >= 2")
    if not 0 <= y < K:
        raise ValueError("label out of range")
    out = np.full(K + int(has_null), (1.0 - q) / (K - 1))
    out[y] = q
    if has_null:
        out[K] = 0.0
    return out


@dataclass(frozen=True)
class AdversarialTarget:
    probs: np.ndarray
    p_null: float


def adversarial_target(y: int, K: int, q: float, p_null: float) -> AdversarialTarget:
    """Smoothed target scaled by ``1 - p_null`` with ``p_null`` on the NULL slot."""
    if not 0.0 <= p_null <= 1.0:
        raise ValueError("p_null must lie in [0, 1]")
    return AdversarialTarget(_adversarial_rows(np.array([y]), K, q, np.array([p_null]))[0],
                             float(p_null))


def _adversarial_rows(y: np.ndarray, K: int, q: float, p_null: np.ndarray) -> np.ndarray:
    keep = 1.0 - p_null
    out = np.repeat(((1.0 - q) * keep / (K - 1))[:, None], K + 1, axis=1)
    out[np.arange(len(y)), y] = q * keep
    out[:, K] = p_null
    # absorb rounding in the largest slot so every row sums to exactly 1
    for i in range(len(y)):
        row = out[i]
        j = int(np.argmax(row))
        for _ in range(8):
            r = 1.0 - math.fsum(row)
            if r == 0.0:
                break
            moved = row[j] + r
            # the residual may be below half an ulp of row[j]; step one ulp instead
            row[j] = moved if moved != row[j] else np.nextafter(row[j], math.copysign(np.inf, r))
    return out


def _smoothed_rows(y: np.ndarray, K: int, q: float, has_null: bool) -> np.ndarray:
    rows = _adversarial_rows(y, K, q, np.zeros(len(y)))
    return rows if has_null else rows[:, :K]


# -- NULL probability function ------------------------------------------------

@dataclass(frozen=True)
class NullProbabilityFn:
    """Empirical CDF of per-sample MG feature counts.

    ``counts`` are the distinct feature counts, ``fractions`` the cumulative
    share of samples at or below each; ``f(eps)`` looks up
    ``floor(eps * input_dim)``.
    """

    counts: tuple[int, ...]
    fractions: tuple[float, ...]
    n_max: int
    input_dim: int

    @property
    def breakpoints(self) -> list[tuple[float, float]]:
        return [(c / self.input_dim, a) for c, a in zip(self.counts, self.fractions)]

    def at_count(self, n) -> np.ndarray | float:
        n_arr = np.asarray(n)
        idx = np.searchsorted(np.asarray(self.counts), n_arr, side="right") - 1
        fr = np.concatenate([[0.0], np.asarray(self.fractions)])
        out = fr[idx + 1]
        return float(out) if n_arr.ndim == 0 else out

    def __call__(self, epsilon):
        eps = np.asarray(epsilon, dtype=np.float64)
        n = np.floor(eps * self.input_dim + 1e-9).astype(np.int64)
        return self.at_count(n if eps.ndim else int(n))

    @classmethod
    def from_counts(cls, counts, input_dim: int) -> "NullProbabilityFn":
        counts = np.asarray(counts, dtype=np.int64)
        if counts.size == 0:
            raise ValueError("no perturbation counts")
        values, freq = np.unique(counts, return_counts=True)
        cum = np.cumsum(freq)
        fractions = cum / counts.size
        fractions[-1] = 1.0
        return cls(tuple(int(v) for v in values), tuple(float(a) for a in fractions),
                   int(values[-1]), int(input_dim))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["feature_count", "cumulative_fraction"])
            for c, a in zip(self.counts, self.fractions):
                w.writerow([c, f"{a:.17g}"])
            w.writerow(["n_max", self.n_max])

    @classmethod
    def read_csv(cls, path, input_dim: int) -> "NullProbabilityFn":
        counts, fractions, n_max = [], [], None
        with open(path, newline="") as f:
            rows = csv.reader(f)
            next(rows)
            for row in rows:
                if row[0] == "n_max":
                    n_max = int(row[1])
                else:
                    counts.append(int(row[0]))
                    fractions.append(float(row[1]))
        if n_max is None:
            raise ValueError(f"{path}: missing n_max row")
        return cls(tuple(counts), tuple(fractions), n_max, input_dim)


def default_feature_cap(input_dim: int) -> int:
    return math.ceil(0.5 * input_dim)


def compute_null_fn(classifier, validation: Dataset, max_features_cap: int | None = None,
                    batch_size: int = 512) -> NullProbabilityFn:
    """Run MG on every correctly classified validation sample.

    Samples MG cannot flip within the cap are counted at the cap.
    """
    if len(validation) == 0:
        raise ValueError("empty validation set")
    dim = validation.input_dim
    cap = default_feature_cap(dim) if max_features_cap is None else int(max_features_cap)
    pred = np.concatenate([classifier.predict(validation.X[i:i + 2048])
                           for i in range(0, len(validation), 2048)])
    keep = np.flatnonzero(pred == validation.y)
    if keep.size == 0:
        raise ValueError("classifier gets every validation sample wrong")
    counts = []
    for start in range(0, keep.size, batch_size):
        idx = keep[start:start + batch_size]
        _, flips, ok, _ = attacks.mg_batch(classifier, validation.X[idx], validation.y[idx], cap)
        counts.append(np.where(ok, flips, cap))
    return NullProbabilityFn.from_counts(np.concatenate(counts), dim)


# -- NULL training -----------------------------------------------------------

@dataclass
class DefenseConfig:
    alpha: float = 0.5
    q: float = 0.9
    initial_epochs: int = 1
    adversarial_epochs: int = 120
    sgd: SGDConfig = field(default_factory=SGDConfig)
    max_features_cap: int | None = None
    null_fn_samples: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha: must lie in [0, 1]")
        if not 0.0 < self.q <= 1.0:
            raise ConfigError("q: must lie in (0, 1]")


@dataclass
class NullTrainingResult:
    classifier: Classifier
    null_fn: NullProbabilityFn
    log: TrainingLog
    best_epoch: int


def null_train(train_set: Dataset, validation_set: Dataset, config: DefenseConfig,
               spec: NetworkSpec, seed: int = 0) -> NullTrainingResult:
    if not spec.has_null or spec.class_count != train_set.class_count + 1:
        raise ConfigError("network: NULL training needs K+1 outputs with NULL last")
    K = train_set.class_count
    clf = Classifier.initialize(spec, seed)
    X, y = train_set.X, train_set.y
    clean_T = _smoothed_rows(y, K, config.q, True)

    # clean warm-up
    log = fit(clf, X, clean_T, config.initial_epochs, config.sgd, seed, stream_name="null-initial",
              validation=(validation_set.X, validation_set.y))

    # NULL probability curve, frozen for the rest of training
    null_val = validation_set.take(config.null_fn_samples)
    null_fn = compute_null_fn(clf, null_val, config.max_features_cap)
    if null_fn.n_max < 1:
        raise ConfigError("n_max: NULL curve reached 1 at zero features")

    best = clf.params.copy()
    best_acc = log.records[-1].validation_accuracy if log.records else -1.0
    best_epoch = config.initial_epochs

    shuffle = stream(seed, "null-adversarial", "shuffle")
    coins = stream(seed, "null-adversarial", "branch")
    sizes = stream(seed, "null-adversarial", "features")
    drop = stream(seed, "null-adversarial", "dropout")
    for epoch in range(1, config.adversarial_epochs + 1):
        clean_sum = adv_sum = 0.0
        n_clean = n_adv = 0
        for idx in batches(len(X), config.sgd.batch_size, shuffle):
            adv = coins.random(len(idx)) >= config.alpha
            n_feat = sizes.integers(1, null_fn.n_max + 1, size=len(idx))
            Xb = X[idx].copy()
            Tb = clean_T[idx].copy()
            a = np.flatnonzero(adv)
            if a.size:
                Xb[a] = attacks.stg_batch(clf, Xb[a], n_feat[a])
                p_null = null_fn.at_count(n_feat[a])
                Tb[a] = _adversarial_rows(y[idx][a], K, config.q, p_null)
            losses, g = clf.loss_and_param_gradient(Xb, Tb, train_mode=True, rng=drop)
            sgd_step(clf, g, config.sgd.learning_rate)
            clean_sum += float(losses[~adv].sum())
            adv_sum += float(losses[adv].sum())
            n_clean += int((~adv).sum())
            n_adv += int(a.size)
        val = accuracy(clf, validation_set.X, validation_set.y)
        log.add(EpochRecord(config.initial_epochs + epoch,
                            clean_sum / n_clean if n_clean else float("nan"),
                            adv_sum / n_adv if n_adv else float("nan"),
                            val, n_clean, n_adv))
        if val > best_acc:
            best_acc, best, best_epoch = val, clf.params.copy(), config.initial_epochs + epoch
    clf.params[...] = best
    return NullTrainingResult(clf, null_fn, log, best_epoch)


# -- robust training ---------------------------------------------------------

ROBUST0 = "robust0"
ROBUSTINF = "robustinf"


@dataclass
class RobustConfig:
    alpha: float = 0.5
    attack: str = ROBUSTINF
    epsilon: float = 0.1
    epochs: int = 20
    sgd: SGDConfig = field(default_factory=SGDConfig)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha: must lie in [0, 1]")
        if self.attack not in (ROBUST0, ROBUSTINF):
            raise ConfigError(f"attack: unknown robust attack {self.attack!r}")


def robust_train(train_set: Dataset, config: RobustConfig, spec: NetworkSpec, seed: int = 0,
                 validation_set: Dataset | None = None) -> tuple[Classifier, TrainingLog]:
    """Minimise ``alpha * l(x, y) + (1 - alpha) * l(x*, y)`` with x* rebuilt
    against the current parameters at every step."""
    clf = Classifier.initialize(spec, seed)
    if config.alpha == 1.0:
        val = None if validation_set is None else (validation_set.X, validation_set.y)
        return clf, fit(clf, train_set.X, train_set.y, config.epochs, config.sgd, seed,
                        validation=val)
    X, y = train_set.X, train_set.y
    k = attacks.AttackBudget(attacks.L0, config.epsilon).features(X.shape[1])
    shuffle = stream(seed, "train", "shuffle")
    drop = stream(seed, "train", "dropout")
    log = TrainingLog()
    for epoch in range(1, config.epochs + 1):
        clean_sum = adv_sum = 0.0
        for idx in batches(len(X), config.sgd.batch_size, shuffle):
            xb, yb = X[idx], y[idx]
            if config.attack == ROBUSTINF:
                xa = attacks.fgs_batch(clf, xb, yb, config.epsilon)
            else:
                xa = attacks.grad0_batch(clf, xb, yb, k)
            n = len(idx)
            w = np.concatenate([np.full(n, config.alpha / n), np.full(n, (1 - config.alpha) / n)])
            losses, g = clf.loss_and_param_gradient(np.vstack([xb, xa]), np.concatenate([yb, yb]),
                                                    weights=w, train_mode=True, rng=drop)
            sgd_step(clf, g, config.sgd.learning_rate)
            clean_sum += float(losses[:n].sum())
            adv_sum += float(losses[n:].sum())
        val = float("nan") if validation_set is None else accuracy(
            clf, validation_set.X, validation_set.y)
        log.add(EpochRecord(epoch, clean_sum / len(X), adv_sum / len(X), val, len(X), len(X)))
    return clf, log


def plain_train(train_set: Dataset, spec: NetworkSpec, epochs: int, sgd: SGDConfig,
                seed: int = 0, validation_set: Dataset | None = None) -> tuple[Classifier, TrainingLog]:
    clf = Classifier.initialize(spec, seed)
    val = None if validation_set is None else (validation_set.X, validation_set.y)
    return clf, fit(clf, train_set.X, train_set.y, epochs, sgd, seed, validation=val)
