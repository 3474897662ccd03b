"""Small ReLU classifier: inference, exact input gradients, training, persistence.

A model maps a batch ``X`` of shape ``(n, dim)`` (or a single vector) to
logits of shape ``(n, classes)``. Cross-entropy input gradients are computed
by an explicit reverse pass.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class ModelFormatError(ValueError):
    """Raised for malformed, truncated, or inconsistent model files."""


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


@dataclass
class Mlp:
    """Fully connected net, ReLU on hidden layers, identity output.

    ``weights[i]`` has shape ``(dims[i+1], dims[i])`` so a layer computes
    ``h @ W.T + b``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ModelFormatError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ModelFormatError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ModelFormatError(
                    f"layer {i} expects {w.shape[1]} inputs but layer {i - 1} emits {self.weights[i - 1].shape[0]}"
                )

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def class_count(self) -> int:
        return self.weights[-1].shape[0]

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.input_dim:
            raise ValueError(f"input dim {X.shape[-1]} != model input dim {self.input_dim}")
        return X

    def _activations(self, X: np.ndarray) -> list[np.ndarray]:
        acts = [X]
        h = X
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def logits(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        return self._activations(X)[-1]

    def _reverse(self, acts: list[np.ndarray], y: np.ndarray) -> list[np.ndarray]:
        # Returns dL/d(pre-activation) for every layer, output layer last.
        logits = acts[-1]
        g = softmax(logits)
        g[np.arange(len(y)), y] -= 1.0
        deltas = [g]
        for i in range(len(self.weights) - 1, 0, -1):
            g = (g @ self.weights[i]) * (acts[i] > 0)
            deltas.append(g)
        return deltas[::-1]

    def loss_and_input_grad(self, X: np.ndarray, y) -> tuple[np.ndarray, np.ndarray]:
        """Per-row cross-entropy losses and their gradients w.r.t. the inputs."""
        X = self._check(X)
        single = X.ndim == 1
        X2 = np.atleast_2d(X)
        y = np.broadcast_to(np.asarray(y, dtype=int), (len(X2),))
        acts = self._activations(X2)
        losses = -_log_softmax(acts[-1])[np.arange(len(y)), y]
        deltas = self._reverse(acts, y)
        grad = deltas[0] @ self.weights[0]
        if single:
            return losses[0], grad[0]
        return losses, grad

    def param_grads(self, X: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
        """Mean cross-entropy over the batch and its gradients w.r.t. weights and biases."""
        X = self._check(np.atleast_2d(X))
        acts = self._activations(X)
        n = len(X)
        mean_loss = float(np.mean(-_log_softmax(acts[-1])[np.arange(n), y]))
        deltas = self._reverse(acts, y)
        gw = [d.T @ a / n for d, a in zip(deltas, acts[:-1])]
        gb = [d.sum(axis=0) / n for d in deltas]
        return mean_loss, gw, gb

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class DefenseWrapper:
    """Input-quantization defense: the inner model sees ``round(x * levels) / levels``.

    The rounding is piecewise constant, so the input gradient is zero.
    """

    inner: Mlp
    quantization_levels: int | None = 5

    @property
    def input_dim(self) -> int:
        return self.inner.input_dim

    @property
    def class_count(self) -> int:
        return self.inner.class_count

    def quantize(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.quantization_levels is None:
            return X
        return np.round(X * self.quantization_levels) / self.quantization_levels

    def logits(self, X: np.ndarray) -> np.ndarray:
        return self.inner.logits(self.quantize(X))

    def loss_and_input_grad(self, X: np.ndarray, y):
        losses, grad = self.inner.loss_and_input_grad(self.quantize(X), y)
        if self.quantization_levels is None:
            return losses, grad
        return losses, np.zeros_like(grad)


def forward(model, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits = model.logits(x)
    return logits, softmax(logits)


def loss(model, x: np.ndarray, y) -> float | np.ndarray:
    logits = model.logits(x)
    y = np.asarray(y, dtype=int)
    lp = _log_softmax(np.atleast_2d(logits))
    out = -lp[np.arange(len(lp)), np.broadcast_to(y, (len(lp),))]
    return float(out[0]) if np.ndim(logits) == 1 else out


def input_grad(model, x: np.ndarray, y) -> np.ndarray:
    return model.loss_and_input_grad(x, y)[1]


def predict(model, X: np.ndarray) -> np.ndarray:
    return np.argmax(model.logits(X), axis=-1)


def init_mlp(dims: list[int], rng: np.random.Generator) -> Mlp:
    """He-normal weights, zero biases."""
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    weights = [rng.standard_normal((o, i)) * np.sqrt(2.0 / i) for i, o in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(o) for o in dims[1:]]
    return Mlp(weights, biases)


# --------------------------------------------------------------------------- data

SPLITS = ("train", "test", "aux")


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    class_count: int
    centers: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.inputs) != len(self.labels) or len(self.labels) != len(self.splits):
            raise ValueError("inputs, labels and splits must align")
        if len(self.labels) and (self.labels.max() >= self.class_count or self.labels.min() < 0):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.splits == name
        return self.inputs[mask], self.labels[mask]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.inputs, self.labels.astype(np.int64), self.splits.astype("U5")):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _split_counts(per_class) -> tuple[int, int, int]:
    if isinstance(per_class, (tuple, list)):
        tr, te, ax = (int(c) for c in per_class)
        return tr, te, ax
    total = int(per_class)
    te = total * 40 // 150
    ax = total * 50 // 150
    return total - te - ax, te, ax


def make_synthetic(
    rng: np.random.Generator,
    dim: int = 16,
    class_count: int = 4,
    per_class=(60, 40, 50),
    spread: float = 0.1,
    center_range: tuple[float, float] = (0.2, 0.8),
) -> Dataset:
    """Gaussian blobs around random class centers, clipped to the unit box.

    ``per_class`` is either ``(train, test, aux)`` or a total that is split
    60:40:50. The three pools are disjoint by construction.
    """
    if dim < 2 or class_count < 2:
        raise ValueError("need dim >= 2 and class_count >= 2")
    counts = _split_counts(per_class)
    centers = rng.uniform(*center_range, size=(class_count, dim))
    inputs, labels, splits = [], [], []
    for name, count in zip(SPLITS, counts):
        for c in range(class_count):
            pts = centers[c] + spread * rng.standard_normal((count, dim))
            inputs.append(np.clip(pts, 0.0, 1.0))
            labels.append(np.full(count, c))
            splits.append(np.full(count, name))
    return Dataset(
        np.concatenate(inputs),
        np.concatenate(labels).astype(int),
        np.concatenate(splits),
        class_count,
        centers,
    )


def accuracy(model, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(model, X) == y))


def train(
    model: Mlp,
    data: Dataset,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 32,
) -> Mlp:
    """Minibatch SGD on the train split; returns a new trained model."""
    X, y = data.split("train")
    if len(y) == 0:
        raise ValueError("training split is empty")
    model = model.copy()
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start : start + batch_size]
            _, gw, gb = model.param_grads(X[idx], y[idx])
            for i in range(len(model.weights)):
                model.weights[i] -= lr * gw[i]
                model.biases[i] -= lr * gb[i]
    if epochs:
        Xt, yt = data.split("test")
        log.info("train acc %.4f, test acc %.4f", accuracy(model, X, y), accuracy(model, Xt, yt))
    return model


# --------------------------------------------------------------------------- persistence


def model_to_dict(model: Mlp) -> dict:
    return {
        "dims": model.dims,
        "layers": [{"w": w.ravel().tolist(), "b": b.tolist()} for w, b in zip(model.weights, model.biases)],
        "classes": model.class_count,
    }


def model_from_dict(doc: dict) -> Mlp:
    try:
        dims = [int(d) for d in doc["dims"]]
        layers = doc["layers"]
        classes = int(doc["classes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"missing or invalid field: {exc}") from exc
    if len(layers) != len(dims) - 1:
        raise ModelFormatError(f"dims declare {len(dims) - 1} layers but file has {len(layers)}")
    if dims[-1] != classes:
        raise ModelFormatError(f"output dim {dims[-1]} != classes {classes}")
    weights, biases = [], []
    for i, layer in enumerate(layers):
        try:
            w = np.asarray(layer["w"], dtype=float)
            b = np.asarray(layer["b"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"layer {i}: missing or invalid field: {exc}") from exc
        rows, cols = dims[i + 1], dims[i]
        if w.size != rows * cols or b.shape != (rows,):
            raise ModelFormatError(
                f"layer {i}: expected w of {rows}x{cols} and b of {rows}, got {w.size} and {b.shape}"
            )
        weights.append(w.reshape(rows, cols))
        biases.append(b)
    return Mlp(weights, biases)


def save_model(model: Mlp, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> Mlp:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not a valid model file ({exc})") from exc
    if not isinstance(doc, dict):
        raise ModelFormatError(f"{path}: top level must be an object")
    return model_from_dict(doc)
