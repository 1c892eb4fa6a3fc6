"""Duck-typed stub classifiers with hand-written math, independent of nullnet.nn."""

from __future__ import annotations

import numpy as np


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class GradStub:
    """Constant probabilities and a constant input gradient."""

    def __init__(self, gradient, probs, null_index=None):
        self.gradient = np.asarray(gradient, dtype=float)
        self._probs = np.asarray(probs, dtype=float)
        self.class_count = len(self._probs)
        self.null_index = null_index
        self.calls = 0

    def probs(self, X):
        X = np.atleast_2d(X)
        return np.repeat(self._probs[None, :], len(X), axis=0)

    def predict(self, X):
        return np.argmax(self.probs(X), axis=1)

    def probs_and_input_gradient(self, X, T):
        self.calls += 1
        X = np.atleast_2d(X)
        return self.probs(X), np.repeat(self.gradient[None, :], len(X), axis=0)


class LinearStub:
    """softmax(x W + b) with the closed-form cross-entropy input gradient."""

    def __init__(self, W, b=None, null_index=None):
        self.W = np.asarray(W, dtype=float)
        self.b = np.zeros(self.W.shape[1]) if b is None else np.asarray(b, dtype=float)
        self.class_count = self.W.shape[1]
        self.null_index = null_index
        self.calls = 0

    def probs(self, X):
        return softmax(np.atleast_2d(X) @ self.W + self.b)

    def predict(self, X):
        return np.argmax(self.probs(X), axis=1)

    def loss(self, x, t):
        return float(-np.sum(t * np.log(self.probs(x)[0])))

    def probs_and_input_gradient(self, X, T):
        self.calls += 1
        P = self.probs(X)
        T = np.asarray(T, dtype=float)
        return P, (P * T.sum(axis=1, keepdims=True) - T) @ self.W.T


def onehot(y: int, k: int) -> np.ndarray:
    t = np.zeros(k)
    t[y] = 1.0
    return t


# acceptance results: criterion -> part -> (passed, detail); printed by conftest
ACCEPTANCE: dict[str, dict[str, tuple[bool, str]]] = {}


def record(criterion: str, passed: bool, detail: str, part: str = "") -> bool:
    ACCEPTANCE.setdefault(criterion, {})[part] = (bool(passed), detail)
    print(f"{'PASS' if passed else 'FAIL'} criterion {criterion}{part}: {detail}")
    return bool(passed)
