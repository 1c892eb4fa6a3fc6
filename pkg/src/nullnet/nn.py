"""Small differentiable classifiers in plain numpy.

A :class:`Classifier` is a :class:`NetworkSpec` plus one flat parameter vector.
Every layer owns a contiguous slice of that vector, so an SGD step is a single
array update and a checkpoint is the spec followed by the raw floats.

Inputs are batches of flat feature vectors ``(n, |X|)``; convolutional layers
reshape them to ``(n, height, width, channels)`` internally.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, FormatError, NumericError
from .rng import stream

PROB_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"NDF1"

LAYER_KINDS = ("dense", "conv2d", "maxpool", "relu", "dropout", "softmax")


@dataclass(frozen=True)
class Layer:
    kind: str
    units: int = 0
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise DimensionError(f"unknown layer kind {self.kind!r}")

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind in ("dense", "conv2d"):
            d["units"] = self.units
        if self.kind == "dropout":
            d["rate"] = self.rate
        return d


def dense(units: int) -> Layer:
    return Layer("dense", units=units)


def conv2d(filters: int) -> Layer:
    return Layer("conv2d", units=filters)


def maxpool() -> Layer:
    return Layer("maxpool")


def relu() -> Layer:
    return Layer("relu")


def dropout(rate: float) -> Layer:
    return Layer("dropout", rate=rate)


def softmax() -> Layer:
    return Layer("softmax")


@dataclass(frozen=True)
class NetworkSpec:
    """Layer list, input shape ``(height, width, channels)`` and output size.

    When ``has_null`` is set the last output is the NULL class.
    """

    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int]
    class_count: int
    has_null: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.shapes()  # validates the chain

    @property
    def input_dim(self) -> int:
        h, w, c = self.input_shape
        return h * w * c

    @property
    def null_index(self) -> int | None:
        return self.class_count - 1 if self.has_null else None

    @property
    def valid_classes(self) -> int:
        return self.class_count - 1 if self.has_null else self.class_count

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape of every layer; raises DimensionError on a broken chain."""
        if not self.layers or self.layers[-1].kind != "softmax":
            raise DimensionError("final layer must be softmax")
        if any(layer.kind == "softmax" for layer in self.layers[:-1]):
            raise DimensionError("softmax may only appear as the final layer")
        shape: tuple[int, ...] = self.input_shape
        out = []
        for layer in self.layers:
            if layer.kind == "dense":
                if layer.units < 1:
                    raise DimensionError("dense layer needs units >= 1")
                shape = (layer.units,)
            elif layer.kind == "conv2d":
                if len(shape) != 3:
                    raise DimensionError("conv2d after a flat layer")
                h, w, _ = shape
                if h < 3 or w < 3 or layer.units < 1:
                    raise DimensionError(f"conv2d cannot apply to shape {shape}")
                shape = (h - 2, w - 2, layer.units)
            elif layer.kind == "maxpool":
                if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
                    raise DimensionError(f"maxpool cannot apply to shape {shape}")
                shape = (shape[0] // 2, shape[1] // 2, shape[2])
            elif layer.kind == "dropout":
                if not 0.0 <= layer.rate < 1.0:
                    raise DimensionError("dropout rate must lie in [0, 1)")
            elif layer.kind == "softmax":
                if int(np.prod(shape)) != self.class_count:
                    raise DimensionError(
                        f"softmax over {int(np.prod(shape))} outputs, "
                        f"class_count is {self.class_count}"
                    )
            out.append(shape)
        return out

    def to_text(self) -> str:
        return json.dumps(
            {
                "input_shape": list(self.input_shape),
                "class_count": self.class_count,
                "has_null": self.has_null,
                "layers": [layer.to_dict() for layer in self.layers],
            },
            sort_keys=True,
        )

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        d = json.loads(text)
        layers = tuple(
            Layer(x["kind"], units=int(x.get("units", 0)), rate=float(x.get("rate", 0.0)))
            for x in d["layers"]
        )
        return cls(layers, tuple(d["input_shape"]), int(d["class_count"]), bool(d["has_null"]))

    def with_classes(self, class_count: int, has_null: bool) -> "NetworkSpec":
        """Same hidden stack, new output head."""
        if self.layers[-2].kind != "dense":
            raise DimensionError("output head must be a dense layer before softmax")
        layers = self.layers[:-2] + (dense(class_count), softmax())
        return NetworkSpec(layers, self.input_shape, class_count, has_null)


def profile(name: str, class_count: int, has_null: bool = False,
            input_shape: tuple[int, int, int] = (28, 28, 1)) -> NetworkSpec:
    """Named architectures. ``class_count`` includes the NULL slot if any."""
    if name == "desk-mlp":
        hidden = [dense(128), relu(), dense(64), relu()]
    elif name == "paper-cnn":
        hidden = [conv2d(32), relu(), conv2d(64), relu(), maxpool(),
                  dense(200), relu(), dense(200), relu()]
    elif name == "paper-cnn-signs":
        hidden = [conv2d(32), relu(), conv2d(64), relu(), maxpool(),
                  dense(512), relu(), dropout(0.5), dense(128), relu(), dropout(0.5)]
    elif name == "linear":
        hidden = []
    else:
        raise DimensionError(f"unknown network profile {name!r}")
    return NetworkSpec(tuple(hidden) + (dense(class_count), softmax()),
                       input_shape, class_count, has_null)


@dataclass(frozen=True)
class ParamSlot:
    layer: int
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def param_layout(spec: NetworkSpec) -> list[ParamSlot]:
    slots = []
    offset = 0
    prev: tuple[int, ...] = spec.input_shape
    for i, (layer, shape) in enumerate(zip(spec.layers, spec.shapes())):
        if layer.kind == "dense":
            fan_in = int(np.prod(prev))
            for name, s in (("W", (fan_in, layer.units)), ("b", (layer.units,))):
                slots.append(ParamSlot(i, name, s, offset))
                offset += int(np.prod(s))
        elif layer.kind == "conv2d":
            cin = prev[2]
            for name, s in (("W", (3, 3, cin, layer.units)), ("b", (layer.units,))):
                slots.append(ParamSlot(i, name, s, offset))
                offset += int(np.prod(s))
        prev = shape
    return slots


def param_count(spec: NetworkSpec) -> int:
    return sum(slot.size for slot in param_layout(spec))


def _as_batch(x, dim: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise DimensionError(f"expected feature vectors of length {dim}, got shape {np.shape(x)}")
    return arr, single


def as_targets(target, class_count: int, n: int | None = None) -> np.ndarray:
    """Hard labels or soft vectors -> ``(n, class_count)`` probability rows."""
    arr = np.asarray(target)
    if arr.ndim == 0 or (arr.ndim == 1 and np.issubdtype(arr.dtype, np.integer)):
        labels = np.atleast_1d(arr).astype(np.int64)
        if np.any(labels < 0) or np.any(labels >= class_count):
            raise DimensionError(f"label out of range for {class_count} classes")
        out = np.zeros((labels.size, class_count))
        out[np.arange(labels.size), labels] = 1.0
    else:
        out = np.atleast_2d(np.asarray(arr, dtype=np.float64))
        if out.shape[1] != class_count:
            raise DimensionError(f"soft target has {out.shape[1]} entries, expected {class_count}")
        if np.any(out < 0) or np.any(np.abs(out.sum(axis=1) - 1.0) > 1e-6):
            raise DimensionError("soft target is not a probability vector")
    if n is not None and out.shape[0] == 1 and n > 1:
        out = np.repeat(out, n, axis=0)
    if n is not None and out.shape[0] != n:
        raise DimensionError(f"{out.shape[0]} targets for {n} inputs")
    return out


def _im2col(x: np.ndarray) -> np.ndarray:
    # (n, h, w, c) -> (n, h-2, w-2, c, 3, 3)
    return np.lib.stride_tricks.sliding_window_view(x, (3, 3), axis=(1, 2))


@dataclass
class Classifier:
    """Network spec plus flat parameters ``params``.

    Evaluation-mode calls never touch ``params``; training mutates it in place
    (single writer).
    """

    spec: NetworkSpec
    params: np.ndarray
    seed: int = 0
    _slots: list[ParamSlot] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        self._slots = param_layout(self.spec)
        expected = sum(s.size for s in self._slots)
        if self.params.shape != (expected,):
            raise DimensionError(f"spec needs {expected} parameters, got {self.params.shape}")

    @classmethod
    def initialize(cls, spec: NetworkSpec, seed: int = 0) -> "Classifier":
        """Glorot-uniform weights, zero biases."""
        rng = stream(seed, "init")
        params = np.zeros(param_count(spec))
        for slot in param_layout(spec):
            if slot.name != "W":
                continue
            if spec.layers[slot.layer].kind == "dense":
                fan_in, fan_out = slot.shape
            else:
                fan_in = 9 * slot.shape[2]
                fan_out = 9 * slot.shape[3]
            s = math.sqrt(6.0 / (fan_in + fan_out))
            params[slot.offset:slot.offset + slot.size] = rng.uniform(-s, s, slot.size)
        return cls(spec, params, seed)

    def copy(self) -> "Classifier":
        return Classifier(self.spec, self.params.copy(), self.seed)

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    @property
    def null_index(self) -> int | None:
        return self.spec.null_index

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    def _views(self, params: np.ndarray) -> dict[tuple[int, str], np.ndarray]:
        return {
            (s.layer, s.name): params[s.offset:s.offset + s.size].reshape(s.shape)
            for s in self._slots
        }

    def with_extra_output(self, seed: int | None = None) -> "Classifier":
        """Append a NULL output; existing outputs keep their weights.

        The new output row starts at zero weight and zero bias.
        """
        if self.spec.has_null:
            return self.copy()
        new_spec = self.spec.with_classes(self.spec.class_count + 1, True)
        new = Classifier(new_spec, np.zeros(param_count(new_spec)), self.seed if seed is None else seed)
        old_views = self._views(self.params)
        new_views = new._views(new.params)
        head = len(self.spec.layers) - 2
        for key, arr in old_views.items():
            if key[0] == head:
                if key[1] == "W":
                    new_views[key][:, :-1] = arr
                else:
                    new_views[key][:-1] = arr
            else:
                new_views[key][...] = arr
        return new

    # -- forward / backward ------------------------------------------------

    def _forward(self, X: np.ndarray, train_mode: bool, rng):
        views = self._views(self.params)
        h = X
        shapes = self.spec.shapes()
        cache = []
        n = X.shape[0]
        prev_shape: tuple[int, ...] = self.spec.input_shape
        for i, layer in enumerate(self.spec.layers):
            kind = layer.kind
            if kind == "dense":
                flat = h.reshape(n, -1)
                cache.append(flat)
                h = flat @ views[(i, "W")] + views[(i, "b")]
            elif kind == "conv2d":
                x4 = h.reshape((n,) + prev_shape)
                cols = _im2col(x4)
                _, ho, wo, cin, _, _ = cols.shape
                cols = cols.reshape(n * ho * wo, cin * 9)
                kmat = views[(i, "W")].transpose(2, 0, 1, 3).reshape(cin * 9, -1)
                cache.append(cols)
                h = (cols @ kmat + views[(i, "b")]).reshape(n, ho, wo, -1)
            elif kind == "maxpool":
                x4 = h.reshape((n,) + prev_shape)
                ho, wo, c = shapes[i]
                win = x4[:, :2 * ho, :2 * wo, :].reshape(n, ho, 2, wo, 2, c)
                win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
                arg = np.argmax(win, axis=-1)
                cache.append(arg)
                h = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
            elif kind == "relu":
                mask = h > 0
                cache.append(mask)
                h = np.where(mask, h, 0.0)
            elif kind == "dropout":
                if train_mode and layer.rate > 0:
                    if rng is None:
                        raise ValueError("train_mode dropout needs an rng")
                    keep = (rng.random(h.shape) >= layer.rate) / (1.0 - layer.rate)
                    cache.append(keep)
                    h = h * keep
                else:
                    cache.append(None)
            elif kind == "softmax":
                z = h.reshape(n, -1)
                if not np.all(np.isfinite(z)):
                    raise NumericError("non-finite logits")
                z = z - z.max(axis=1, keepdims=True)
                e = np.exp(z)
                h = e / e.sum(axis=1, keepdims=True)
                cache.append(None)
            prev_shape = shapes[i]
        return h, cache

    def _backward(self, cache, dlogits: np.ndarray, want_params: bool, want_input: bool):
        views = self._views(self.params)
        grads = np.zeros_like(self.params) if want_params else None
        gviews = self._views(grads) if want_params else None
        shapes = self.spec.shapes()
        n = dlogits.shape[0]
        g = dlogits
        layers = self.spec.layers
        first_param = min((s.layer for s in self._slots), default=0)
        for i in range(len(layers) - 2, -1, -1):
            if not want_input and i < first_param:
                break
            layer = layers[i]
            in_shape = self.spec.input_shape if i == 0 else shapes[i - 1]
            item = cache[i]
            if layer.kind == "dense":
                g = g.reshape(n, -1)
                if want_params:
                    gviews[(i, "W")][...] = item.T @ g
                    gviews[(i, "b")][...] = g.sum(axis=0)
                g = (g @ views[(i, "W")].T).reshape((n,) + tuple(in_shape))
            elif layer.kind == "conv2d":
                ho, wo, f = shapes[i]
                cin = in_shape[2]
                g2 = g.reshape(n * ho * wo, f)
                kmat = views[(i, "W")].transpose(2, 0, 1, 3).reshape(cin * 9, f)
                if want_params:
                    gviews[(i, "W")][...] = (item.T @ g2).reshape(cin, 3, 3, f).transpose(1, 2, 0, 3)
                    gviews[(i, "b")][...] = g2.sum(axis=0)
                dcols = (g2 @ kmat.T).reshape(n, ho, wo, cin, 3, 3)
                dx = np.zeros((n,) + tuple(in_shape))
                for a in range(3):
                    for b in range(3):
                        dx[:, a:a + ho, b:b + wo, :] += dcols[..., a, b]
                g = dx
            elif layer.kind == "maxpool":
                ho, wo, c = shapes[i]
                g = g.reshape(n, ho, wo, c)
                win = np.zeros((n, ho, wo, c, 4))
                np.put_along_axis(win, item[..., None], g[..., None], axis=-1)
                win = win.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
                dx = np.zeros((n,) + tuple(in_shape))
                dx[:, :2 * ho, :2 * wo, :] = win.reshape(n, 2 * ho, 2 * wo, c)
                g = dx
            elif layer.kind == "relu":
                g = np.where(item, g.reshape(item.shape), 0.0)
            elif layer.kind == "dropout":
                if item is not None:
                    g = g.reshape(item.shape) * item
        dX = g.reshape(n, -1) if want_input else None
        return dX, grads

    # -- public batch API --------------------------------------------------

    def probs(self, X, train_mode: bool = False, rng=None) -> np.ndarray:
        X, single = _as_batch(X, self.input_dim)
        p, _ = self._forward(X, train_mode, rng)
        return p[0] if single else p

    def predict(self, X) -> np.ndarray | int:
        p = self.probs(X)
        if p.ndim == 1:
            return int(np.argmax(p))
        return np.argmax(p, axis=1)

    def losses(self, X, targets) -> np.ndarray:
        X, _ = _as_batch(X, self.input_dim)
        T = as_targets(targets, self.class_count, X.shape[0])
        p, _ = self._forward(X, False, None)
        return cross_entropy(p, T)

    def probs_and_input_gradient(self, X, targets) -> tuple[np.ndarray, np.ndarray]:
        """Evaluation-mode probabilities and per-sample d loss / d x."""
        X, _ = _as_batch(X, self.input_dim)
        T = as_targets(targets, self.class_count, X.shape[0])
        p, cache = self._forward(X, False, None)
        dlogits = p * T.sum(axis=1, keepdims=True) - T
        dX, _ = self._backward(cache, dlogits, want_params=False, want_input=True)
        return p, dX

    def input_gradient(self, X, targets) -> np.ndarray:
        X, single = _as_batch(X, self.input_dim)
        _, g = self.probs_and_input_gradient(X, targets)
        return g[0] if single else g

    def loss_and_param_gradient(self, X, targets, weights=None, train_mode: bool = False,
                                rng=None) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample losses and the gradient of ``sum(weights * losses)``.

        ``weights`` defaults to ``1/n`` each, i.e. the batch-mean gradient.
        """
        X, _ = _as_batch(X, self.input_dim)
        n = X.shape[0]
        if n == 0:
            raise ValueError("empty batch")
        T = as_targets(targets, self.class_count, n)
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
        p, cache = self._forward(X, train_mode, rng)
        dlogits = (p * T.sum(axis=1, keepdims=True) - T) * w[:, None]
        _, grads = self._backward(cache, dlogits, want_params=True, want_input=False)
        return cross_entropy(p, T), grads


def cross_entropy(p: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Row-wise ``-sum(T * ln p)`` with p floored at PROB_FLOOR."""
    out = -np.sum(T * np.log(np.maximum(p, PROB_FLOOR)), axis=1)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite loss")
    return out


# -- spec-level operations on single vectors or batches ---------------------

def forward(classifier: Classifier, x, train_mode: bool = False, rng=None) -> np.ndarray:
    return classifier.probs(x, train_mode=train_mode, rng=rng)


def loss(classifier: Classifier, x, target) -> float:
    x, _ = _as_batch(x, classifier.input_dim)
    return float(classifier.losses(x, target)[0]) if x.shape[0] == 1 else float(
        classifier.losses(x, target).mean())


def input_gradient(classifier: Classifier, x, target) -> np.ndarray:
    return classifier.input_gradient(x, target)


def param_gradient(classifier: Classifier, batch: Sequence[tuple] | tuple) -> np.ndarray:
    """Mean parameter gradient over ``batch``.

    ``batch`` is either a list of ``(x, target)`` pairs or an ``(X, targets)``
    tuple of arrays.
    """
    if isinstance(batch, tuple) and len(batch) == 2 and np.ndim(batch[0]) == 2:
        X, targets = batch
    else:
        if len(batch) == 0:
            raise ValueError("empty batch")
        X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
        targets = np.concatenate([as_targets(t, classifier.class_count) for _, t in batch])
    if len(X) == 0:
        raise ValueError("empty batch")
    _, g = classifier.loss_and_param_gradient(X, targets)
    return g


def sgd_step(classifier: Classifier, gradient: np.ndarray, learning_rate: float) -> Classifier:
    """In-place ``params -= learning_rate * gradient``; returns the classifier."""
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != classifier.params.shape:
        raise DimensionError("gradient length does not match parameters")
    classifier.params -= learning_rate * gradient
    return classifier


def predict(classifier: Classifier, x):
    return classifier.predict(x)


def argmax_label(probs) -> int:
    return int(np.argmax(np.asarray(probs)))


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(classifier: Classifier, path: str | Path) -> None:
    text = classifier.spec.to_text().encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(text)))
        f.write(text)
        f.write(classifier.params.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> Classifier:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a model checkpoint (bad magic)")
    if len(data) < 8:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + n:
        raise FormatError(f"{path}: truncated spec")
    try:
        spec = NetworkSpec.from_text(data[8:8 + n].decode("utf-8"))
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: unreadable spec ({exc})") from exc
    body = data[8 + n:]
    if len(body) != 8 * param_count(spec):
        raise FormatError(f"{path}: expected {param_count(spec)} parameters")
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return Classifier(spec, params)
