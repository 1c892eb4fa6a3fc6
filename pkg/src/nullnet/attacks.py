"""Gradient-based adversarial example generators.

Five procedures, all working on batches of flat feature vectors in [0, 1]:

* ``grad0``  - L0 misclassification, one gradient, top-k feature flips.
* ``fgs``    - Linf misclassification, ``x + eps * sign(grad)`` clipped to [0, 1].
* ``mg``     - L0 misclassification, one feature per gradient evaluation.
* ``greedy_targeted`` - L0 targeted, one feature per gradient evaluation.
* ``stg``    - L0 push towards a uniform distribution over the valid classes;
  used to manufacture training data for the NULL defense.

L0 procedures move each chosen feature to a binary extreme: 1 where that
raises the linearized objective, 0 otherwise. Score ties resolve to the
lowest feature index.

Models only need ``class_count``, ``null_index``, ``probs(X)`` and
``probs_and_input_gradient(X, targets)``; the :class:`~nullnet.nn.Classifier`
provides them and tests substitute hand-built stubs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

L0 = "L0"
LINF = "Linf"
_FLOOR_FUZZ = 1e-9


@dataclass(frozen=True)
class AttackBudget:
    norm: str
    epsilon: float

    def __post_init__(self):
        if self.norm not in (L0, LINF):
            raise ValueError(f"unknown norm {self.norm!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")

    def delta_max(self, dim: int) -> float:
        return float(dim) if self.norm == L0 else 1.0

    def features(self, dim: int) -> int:
        """L0 feature budget ``floor(epsilon * dim)``."""
        return max(0, math.floor(self.epsilon * dim + _FLOOR_FUZZ))


@dataclass
class AdversarialResult:
    x_star: np.ndarray
    original_label: int
    achieved_label: int
    perturbation_l0: int
    perturbation_linf: float
    feasible: bool
    norm: str = L0
    epsilon: float = 0.0
    sample_id: int = -1
    target_label: int | None = None


def _onehot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _misclassified(pred: np.ndarray, y: np.ndarray, null_index: int | None) -> np.ndarray:
    ok = pred != y
    if null_index is not None:
        ok &= pred != null_index
    return ok


def _predict(model, X: np.ndarray) -> np.ndarray:
    if len(X) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(model.probs(X), axis=1)


def _as_batch(X) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    return (X[None, :], True) if X.ndim == 1 else (X, False)


def _top_mask(scores: np.ndarray, counts: np.ndarray, largest: bool) -> np.ndarray:
    """Row-wise mask of the ``counts[i]`` best scores, ties to the lowest index."""
    key = -scores if largest else scores
    order = np.argsort(key, axis=1, kind="stable")
    ranks = np.arange(scores.shape[1])[None, :] < np.asarray(counts)[:, None]
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, order, ranks, axis=1)
    return mask


# -- batch cores -------------------------------------------------------------

def grad0_batch(model, X, y, n_features: int) -> np.ndarray:
    X, _ = _as_batch(X)
    y = np.asarray(y, dtype=np.int64)
    if n_features <= 0 or len(X) == 0:
        return X.copy()
    _, g = model.probs_and_input_gradient(X, _onehot(y, model.class_count))
    extreme = (g > 0).astype(np.float64)
    scores = g * (extreme - X)
    mask = _top_mask(scores, np.full(len(X), min(n_features, X.shape[1])), largest=True)
    return np.where(mask, extreme, X)


def fgs_batch(model, X, y, epsilon: float) -> np.ndarray:
    X, _ = _as_batch(X)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        return X.copy()
    _, g = model.probs_and_input_gradient(X, _onehot(y, model.class_count))
    X_star = np.clip(X + epsilon * np.sign(g), 0.0, 1.0)
    # rounding in x + eps can leave |x* - x| one ulp above eps; pull back towards x
    over = np.abs(X_star - X) > epsilon
    while over.any():
        X_star[over] = np.nextafter(X_star[over], X[over])
        over = np.abs(X_star - X) > epsilon
    return X_star


def stg_batch(model, X, n_features) -> np.ndarray:
    """Flip the ``n_features`` (scalar or per-row) most loss-reducing features
    towards the soft target that is uniform over valid classes and 0 at NULL."""
    X, _ = _as_batch(X)
    if model.null_index is None:
        raise ValueError("stg needs a classifier with a NULL output")
    counts = np.broadcast_to(np.asarray(n_features, dtype=np.int64), (len(X),))
    if len(X) == 0:
        return X.copy()
    target = soft_uniform_target(model.class_count, model.null_index)
    _, g = model.probs_and_input_gradient(X, np.repeat(target[None, :], len(X), axis=0))
    extreme = (g < 0).astype(np.float64)
    scores = g * (extreme - X)
    mask = _top_mask(scores, np.minimum(counts, X.shape[1]), largest=False)
    return np.where(mask, extreme, X)


def soft_uniform_target(class_count: int, null_index: int) -> np.ndarray:
    t = np.full(class_count, 1.0 / (class_count - 1))
    t[null_index] = 0.0
    return t


def _greedy_loop(model, X, labels, max_features: int, targeted: bool):
    """Shared MG / greedy loop; one gradient evaluation per iteration.

    Returns final inputs, flips used, success flags and flip order per row.
    """
    X = X.copy()
    n, d = X.shape
    flipped = np.zeros((n, d), dtype=bool)
    flips = np.zeros(n, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    success = np.zeros(n, dtype=bool)
    history: list[list[int]] = [[] for _ in range(n)]
    T = _onehot(labels, model.class_count)
    while True:
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        p, g = model.probs_and_input_gradient(X[active], T[active])
        pred = np.argmax(p, axis=1)
        if targeted:
            hit = pred == labels[active]
        else:
            hit = _misclassified(pred, labels[active], model.null_index)
        success[active[hit]] = True
        stop = hit | (flips[active] >= max_features)
        Xa = X[active]
        if targeted:
            extreme = (g < 0).astype(np.float64)
            scores = np.where(flipped[active], np.inf, g * (extreme - Xa))
            best = np.argmin(scores, axis=1)
            no_move = scores[np.arange(active.size), best] >= 0
        else:
            extreme = (g > 0).astype(np.float64)
            scores = np.where(flipped[active], -np.inf, g * (extreme - Xa))
            best = np.argmax(scores, axis=1)
            no_move = scores[np.arange(active.size), best] <= 0
        stop |= no_move
        done[active[stop]] = True
        go = ~stop
        rows = active[go]
        cols = best[go]
        X[rows, cols] = extreme[np.flatnonzero(go), cols]
        flipped[rows, cols] = True
        flips[rows] += 1
        for r, c in zip(rows.tolist(), cols.tolist()):
            history[r].append(c)
    return X, flips, success, history


def mg_batch(model, X, y, max_features: int):
    """Returns ``(X_star, flips, feasible, flip_order)``."""
    X, _ = _as_batch(X)
    return _greedy_loop(model, X, np.asarray(y, dtype=np.int64), max_features, targeted=False)


def greedy_batch(model, X, targets, max_features: int):
    X, _ = _as_batch(X)
    targets = np.asarray(targets, dtype=np.int64)
    _check_target(model, targets)
    return _greedy_loop(model, X, targets, max_features, targeted=True)


def _check_target(model, targets: np.ndarray) -> None:
    if np.any(targets < 0) or np.any(targets >= model.class_count):
        raise ValueError("target label out of range")
    if model.null_index is not None and np.any(targets == model.null_index):
        raise ValueError("NULL is never a valid attack target")


# -- per-sample operations ---------------------------------------------------

def _result(model, x, x_star, y, norm, eps, success_fn, target=None) -> AdversarialResult:
    achieved = int(_predict(model, x_star[None, :])[0])
    delta = np.abs(x_star - x)
    return AdversarialResult(
        x_star=x_star, original_label=int(y), achieved_label=achieved,
        perturbation_l0=int(np.count_nonzero(delta)),
        perturbation_linf=float(delta.max()) if delta.size else 0.0,
        feasible=bool(success_fn(achieved)), norm=norm, epsilon=float(eps),
        target_label=target)


def _untargeted_ok(model, y):
    return lambda a: a != y and a != model.null_index


def results_from_batch(model, X, X_star, y, norm: str, eps: float,
                       targets=None, sample_ids=None) -> list[AdversarialResult]:
    """Package a batch of perturbed inputs into results (one forward pass)."""
    X, _ = _as_batch(X)
    X_star, _ = _as_batch(X_star)
    y = np.asarray(y, dtype=np.int64)
    achieved = _predict(model, X_star)
    if targets is None:
        ok = _misclassified(achieved, y, model.null_index)
    else:
        ok = achieved == np.asarray(targets)
    delta = np.abs(X_star - X)
    out = []
    for i in range(len(X)):
        out.append(AdversarialResult(
            x_star=X_star[i], original_label=int(y[i]), achieved_label=int(achieved[i]),
            perturbation_l0=int(np.count_nonzero(delta[i])),
            perturbation_linf=float(delta[i].max()) if delta.shape[1] else 0.0,
            feasible=bool(ok[i]), norm=norm, epsilon=float(eps),
            sample_id=int(sample_ids[i]) if sample_ids is not None else i,
            target_label=None if targets is None else int(np.asarray(targets)[i])))
    return out


def grad0(model, x, y: int, budget: AttackBudget) -> AdversarialResult:
    if budget.norm != L0:
        raise ValueError("grad0 takes an L0 budget")
    x = np.asarray(x, dtype=np.float64)
    k = budget.features(x.size)
    x_star = grad0_batch(model, x[None, :], [y], k)[0]
    if k == 0:
        return _result(model, x, x_star, y, L0, budget.epsilon, lambda a: False)
    return _result(model, x, x_star, y, L0, budget.epsilon, _untargeted_ok(model, y))


def fgs(model, x, y: int, budget: AttackBudget) -> AdversarialResult:
    if budget.norm != LINF:
        raise ValueError("fgs takes an Linf budget")
    x = np.asarray(x, dtype=np.float64)
    x_star = fgs_batch(model, x[None, :], [y], budget.epsilon)[0]
    return _result(model, x, x_star, y, LINF, budget.epsilon, _untargeted_ok(model, y))


def mg(model, x, y: int, max_features: int) -> AdversarialResult:
    if max_features < 1:
        raise ValueError("max_features must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    X_star, flips, ok, _ = mg_batch(model, x[None, :], [y], max_features)
    res = _result(model, x, X_star[0], y, L0, flips[0] / x.size, lambda a: bool(ok[0]))
    res.perturbation_l0 = int(flips[0])
    return res


def greedy_targeted(model, x, target_y: int, max_features: int) -> AdversarialResult:
    x = np.asarray(x, dtype=np.float64)
    _check_target(model, np.array([target_y]))
    original = int(_predict(model, x[None, :])[0])
    X_star, flips, ok, _ = greedy_batch(model, x[None, :], [target_y], max_features)
    res = _result(model, x, X_star[0], original, L0, flips[0] / x.size,
                  lambda a: bool(ok[0]), target=int(target_y))
    res.perturbation_l0 = int(flips[0])
    return res


def stg(model, x, n_features: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= n_features <= x.size:
        raise ValueError("n_features must lie in [1, |X|]")
    return stg_batch(model, x[None, :], n_features)[0]


# -- CSV persistence ---------------------------------------------------------

CSV_COLUMNS = ("sample_id", "original_label", "achieved_label", "norm", "epsilon",
               "perturbation_l0", "perturbation_linf", "feasible", "target_label")


def write_results_csv(results: Iterable[AdversarialResult], path, dim: int | None = None) -> None:
    results = list(results)
    if dim is None:
        dim = results[0].x_star.size if results else 0
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS + tuple(f"x{i}" for i in range(dim)))
        for r in results:
            w.writerow([r.sample_id, r.original_label, r.achieved_label, r.norm,
                        f"{r.epsilon:.9g}", r.perturbation_l0, f"{r.perturbation_linf:.9g}",
                        int(r.feasible), "" if r.target_label is None else r.target_label]
                       + [repr(float(v)) for v in r.x_star])


def read_results_csv(path) -> list[AdversarialResult]:
    out = []
    with open(path, newline="") as f:
        rows = csv.reader(f)
        header = next(rows)
        if tuple(header[:len(CSV_COLUMNS)]) != CSV_COLUMNS:
            raise ValueError(f"{path}: not an adversarial-example CSV")
        for row in rows:
            feasible = bool(int(row[7]))
            n = len(CSV_COLUMNS)
            out.append(AdversarialResult(
                x_star=np.array([float(v) for v in row[n:]]),
                original_label=int(row[1]), achieved_label=int(row[2]),
                perturbation_l0=int(row[5]), perturbation_linf=float(row[6]),
                feasible=feasible, norm=row[3], epsilon=float(row[4]),
                sample_id=int(row[0]), target_label=int(row[8]) if row[8] else None))
    return out


def linearized_gain(gradient: Sequence[float], x, x_star) -> float:
    """``grad . (x_star - x)``; handy for checking selection rules."""
    return float(np.dot(np.asarray(gradient), np.asarray(x_star) - np.asarray(x)))
