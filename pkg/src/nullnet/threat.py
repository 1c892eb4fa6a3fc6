"""Adversary side: oracles, substitute training, transfer-set generation.

Black-box adversaries may query an :class:`Oracle` for labels; blind
adversaries never do. Either way the attack is crafted on a locally trained
substitute and only substitute-feasible examples are handed to the target.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import attacks
from .data import Dataset, stratified_sample
from .errors import ConfigError, TransportError
from .nn import Classifier, NetworkSpec
from .rng import stream
from .training import SGDConfig, accuracy, fit, train_epoch

log = logging.getLogger(__name__)

EPSILON_GRID = (0.025, 0.05, 0.10, 0.15, 0.20)
DISCARD = "discard"
AUGMENT = "augment"

MISCLASSIFY_GRAD0 = "misclassify_grad0"
MISCLASSIFY_FGS = "misclassify_fgs"
TARGETED_GREEDY = "targeted_greedy"
ATTACK_KINDS = (MISCLASSIFY_GRAD0, MISCLASSIFY_FGS, TARGETED_GREEDY)


class Oracle(Protocol):
    """Label-only view of a target. Labels equal to ``null_label`` mean NULL."""

    null_label: int | None

    @property
    def query_count(self) -> int: ...

    def query(self, x) -> int: ...

    def query_batch(self, X) -> np.ndarray: ...


class _Counter:
    def __init__(self):
        self._n = 0
        self._lock = threading.Lock()

    def add(self, k: int) -> None:
        with self._lock:
            self._n += k

    @property
    def value(self) -> int:
        return self._n


class ClassifierOracle:
    """In-process oracle around an evaluation-mode classifier."""

    def __init__(self, classifier: Classifier):
        self.classifier = classifier
        self.null_label = classifier.null_index
        self._count = _Counter()

    @property
    def query_count(self) -> int:
        return self._count.value

    def query(self, x) -> int:
        self._count.add(1)
        return int(self.classifier.predict(np.asarray(x, dtype=np.float64)))

    def query_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        self._count.add(len(X))
        if len(X) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.asarray(self.classifier.predict(X), dtype=np.int64)


# -- adversary data ----------------------------------------------------------

@dataclass
class AdversaryDataset:
    train: Dataset
    validation: Dataset
    pool_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @classmethod
    def carve(cls, pool: Dataset, n_train: int, n_validation: int, seed: int) -> "AdversaryDataset":
        """Class-balanced draw from ``pool`` (the target's validation split)."""
        idx = stratified_sample(pool, n_train + n_validation, stream(seed, "adversary", "data"))
        idx = stream(seed, "adversary", "split").permutation(idx)
        return cls(pool.subset(np.sort(idx[:n_train]), "adversary-train"),
                   pool.subset(np.sort(idx[n_train:]), "adversary-validation"),
                   np.sort(idx))


@dataclass
class SubstituteSchedule:
    initial_epochs: int = 50
    adversarial_rounds: int = 100
    epsilon_grid: tuple[float, ...] = EPSILON_GRID
    null_handling: str = AUGMENT
    sgd: SGDConfig = field(default_factory=SGDConfig)

    def __post_init__(self):
        if any(not 0.0 < e <= 1.0 for e in self.epsilon_grid):
            raise ConfigError("epsilon_grid: values must lie in (0, 1]")
        if self.null_handling not in (DISCARD, AUGMENT):
            raise ConfigError(f"null_handling: unknown mode {self.null_handling!r}")


@dataclass
class BlackBoxReport:
    queries: int = 0
    null_responses: int = 0
    pool_size: int = 0
    rounds_completed: int = 0
    validation_accuracy: list[float] = field(default_factory=list)
    error: str | None = None

    @property
    def null_fraction(self) -> float:
        return self.null_responses / self.queries if self.queries else 0.0


def train_substitute_blind(data: AdversaryDataset, spec: NetworkSpec, epochs: int = 50,
                           sgd: SGDConfig | None = None, seed: int = 0) -> Classifier:
    """Plain training on the adversary's own samples; no oracle contact."""
    if len(data.train) == 0:
        raise ValueError("adversary has no training data")
    clf = Classifier.initialize(spec, seed)
    fit(clf, data.train.X, data.train.y, epochs, sgd or SGDConfig(), seed, stream_name="substitute")
    return clf


def train_substitute_blackbox(data: AdversaryDataset, oracle: Oracle, spec: NetworkSpec,
                              schedule: SubstituteSchedule, seed: int = 0,
                              report: BlackBoxReport | None = None) -> Classifier:
    """Initial clean training, then rounds of: craft grad0 examples on the
    current substitute, label them through the oracle, train one clean epoch
    and one epoch on the cumulative oracle-labelled pool.

    NULL answers are dropped (``discard``) or taught as an extra output
    (``augment``; the output head grows on the first NULL answer).
    An oracle failure ends training early; the pool gathered so far is kept.
    """
    report = report if report is not None else BlackBoxReport()
    clf = train_substitute_blind(data, spec, schedule.initial_epochs, schedule.sgd, seed)
    X, y = data.train.X, data.train.y
    K = data.train.class_count
    clean_shuffle = stream(seed, "substitute", "blackbox", "clean")
    pool_shuffle = stream(seed, "substitute", "blackbox", "pool")
    eps_draw = stream(seed, "substitute", "blackbox", "epsilon")
    pool_X: list[np.ndarray] = []
    pool_y: list[np.ndarray] = []
    grid = np.asarray(schedule.epsilon_grid)
    for rnd in range(schedule.adversarial_rounds):
        eps = grid[eps_draw.integers(0, len(grid), size=len(X))]
        crafted = np.empty_like(X)
        for e in np.unique(eps):
            rows = np.flatnonzero(eps == e)
            k = attacks.AttackBudget(attacks.L0, float(e)).features(X.shape[1])
            crafted[rows] = attacks.grad0_batch(clf, X[rows], y[rows], k)
        try:
            labels = np.asarray(oracle.query_batch(crafted), dtype=np.int64)
        except (OSError, TransportError) as exc:
            report.error = str(exc)
            log.warning("oracle failed in round %d: %s", rnd + 1, exc)
            break
        report.queries += len(labels)
        is_null = labels >= K  # a defended target reports NULL as label K
        report.null_responses += int(is_null.sum())
        if schedule.null_handling == DISCARD:
            keep = ~is_null
            pool_X.append(crafted[keep])
            pool_y.append(labels[keep])
        else:
            if is_null.any() and not clf.spec.has_null:
                clf = clf.with_extra_output()
            pool_X.append(crafted)
            pool_y.append(np.where(is_null, K, labels))
        train_epoch(clf, X, y, schedule.sgd, clean_shuffle)
        PX = np.concatenate(pool_X)
        if len(PX):
            train_epoch(clf, PX, np.concatenate(pool_y), schedule.sgd, pool_shuffle)
        report.rounds_completed = rnd + 1
        report.pool_size = len(PX)
        report.validation_accuracy.append(
            accuracy(clf, data.validation.X, data.validation.y) if len(data.validation) else float("nan"))
    return clf


# -- transfer sets -------------------------------------------------------------

def generate_transfer_set(substitute, clean: Dataset, attack_kind: str, epsilon: float,
                          target_labels: Sequence[int] | None = None,
                          sample_ids: Sequence[int] | None = None,
                          attempts_out: list | None = None) -> list[attacks.AdversarialResult]:
    """Substitute-feasible adversarial examples built from ``clean``.

    Only samples the substitute already classifies correctly are attacked;
    their count is appended to ``attempts_out`` when given.
    """
    if attack_kind not in ATTACK_KINDS:
        raise ValueError(f"unknown attack kind {attack_kind!r}")
    ids = np.arange(len(clean)) if sample_ids is None else np.asarray(sample_ids)
    if len(clean) == 0:
        if attempts_out is not None:
            attempts_out.append(0)
        return []
    ok = np.asarray(substitute.predict(clean.X)) == clean.y
    if attack_kind == TARGETED_GREEDY:
        if target_labels is None:
            raise ValueError("targeted attack needs target labels")
        tgt_all = np.asarray(target_labels, dtype=np.int64)
        if np.any(tgt_all == clean.y):
            raise ValueError("target labels must differ from the original labels")
        ok &= tgt_all != clean.y
    rows = np.flatnonzero(ok)
    if attempts_out is not None:
        attempts_out.append(int(rows.size))
    if rows.size == 0:
        return []
    X, y = clean.X[rows], clean.y[rows]
    dim = X.shape[1]
    if attack_kind == MISCLASSIFY_GRAD0:
        k = attacks.AttackBudget(attacks.L0, epsilon).features(dim)
        if k == 0:
            return []
        Xs = attacks.grad0_batch(substitute, X, y, k)
        results = attacks.results_from_batch(substitute, X, Xs, y, attacks.L0, epsilon,
                                             sample_ids=ids[rows])
    elif attack_kind == MISCLASSIFY_FGS:
        Xs = attacks.fgs_batch(substitute, X, y, epsilon)
        results = attacks.results_from_batch(substitute, X, Xs, y, attacks.LINF, epsilon,
                                             sample_ids=ids[rows])
    else:
        k = attacks.AttackBudget(attacks.L0, epsilon).features(dim)
        if k == 0:
            return []
        tgt = tgt_all[rows]
        Xs, _, _, _ = attacks.greedy_batch(substitute, X, tgt, k)
        results = attacks.results_from_batch(substitute, X, Xs, y, attacks.L0, epsilon,
                                             targets=tgt, sample_ids=ids[rows])
    return [r for r in results if r.feasible]


def random_targets(labels: np.ndarray, class_count: int, seed: int) -> np.ndarray:
    """A uniformly drawn label different from each original label."""
    shift = stream(seed, "targets").integers(1, class_count, size=len(labels))
    return (np.asarray(labels) + shift) % class_count
