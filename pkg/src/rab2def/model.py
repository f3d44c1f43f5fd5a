"""Feed-forward softmax classifier over a flat parameter vector.

Parameters are stored as one float64 array.  For each layer ``l`` the weight
matrix ``W_l`` (``n_l x n_{l+1}``, row-major) is followed by the bias ``b_l``.
All functions are pure; nothing here keeps state between calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, EmptyInputError, ShapeError

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelLayout:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("a layout needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Split a flat vector into ``(W, b)`` views, one pair per layer."""
        params = np.asarray(params, dtype=np.float64)
        if params.ndim != 1 or params.shape[0] != self.n_params:
            raise ShapeError(
                f"parameter vector has shape {params.shape}, layout expects ({self.n_params},)"
            )
        out = []
        pos = 0
        s = self.layer_sizes
        for i in range(len(s) - 1):
            n_w = s[i] * s[i + 1]
            W = params[pos:pos + n_w].reshape(s[i], s[i + 1])
            pos += n_w
            b = params[pos:pos + s[i + 1]]
            pos += s[i + 1]
            out.append((W, b))
        return out

    def pack(self, layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers])

    def init_params(self, seed: int) -> np.ndarray:
        """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases."""
        rng = np.random.default_rng(seed)
        s = self.layer_sizes
        layers = []
        for i in range(len(s) - 1):
            bound = 1.0 / np.sqrt(s[i])
            W = rng.uniform(-bound, bound, size=(s[i], s[i + 1]))
            b = rng.uniform(-bound, bound, size=s[i + 1])
            layers.append((W, b))
        return self.pack(layers)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.n_params)


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2:
            raise ShapeError(f"features must be a 2-D matrix, got shape {X.shape}")
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ShapeError(f"{X.shape[0]} feature rows but {y.shape} labels")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_deriv(name, z, a):
    if name == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_inputs(layout: ModelLayout, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != layout.input_dim:
        raise ShapeError(f"input has shape {X.shape}, model expects {layout.input_dim} features")
    return X


def _forward_pass(layout, params, X):
    """Return (pre-activations, activations, logits) for a 2-D input."""
    layers = layout.unpack(params)
    zs, acts = [], [X]
    a = X
    for W, b in layers[:-1]:
        z = a @ W + b
        a = _act(layout.activation, z)
        zs.append(z)
        acts.append(a)
    W, b = layers[-1]
    logits = a @ W + b
    return zs, acts, logits


def predict_proba(layout: ModelLayout, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Class probabilities for every row of ``X``."""
    X = _check_inputs(layout, X)
    return softmax(_forward_pass(layout, params, X)[2])


def forward(layout: ModelLayout, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Probability vector for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"forward expects a single input vector, got shape {x.shape}")
    return predict_proba(layout, params, x)[0]


def predict(layout: ModelLayout, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    # np.argmax resolves ties toward the lowest class index
    return np.argmax(predict_proba(layout, params, X), axis=1)


def loss_and_gradient(layout: ModelLayout, params: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``params``."""
    if len(batch) == 0:
        raise EmptyInputError("cannot compute a gradient over an empty batch")
    X = _check_inputs(layout, batch.features)
    y = batch.labels
    m = X.shape[0]
    if np.any(y < 0) or np.any(y >= layout.n_classes):
        raise ValueError("labels out of range for this layout")

    zs, acts, logits = _forward_pass(layout, params, X)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_norm - shifted[np.arange(m), y]))

    p = np.exp(shifted - log_norm[:, None])
    delta = p
    delta[np.arange(m), y] -= 1.0
    delta /= m

    layers = layout.unpack(params)
    grads = [None] * len(layers)
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        grads[li] = (acts[li].T @ delta, delta.sum(axis=0))
        if li > 0:
            delta = (delta @ W.T) * _act_deriv(layout.activation, zs[li - 1], acts[li])
    return loss, layout.pack(grads)


def loss_gradient(layout: ModelLayout, params: np.ndarray, batch: Batch) -> np.ndarray:
    return loss_and_gradient(layout, params, batch)[1]


def local_train(
    layout: ModelLayout,
    params: np.ndarray,
    data: Batch,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
) -> np.ndarray:
    """Plain minibatch SGD; the shuffle order is drawn from ``seed``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    params = np.array(params, dtype=np.float64, copy=True)
    if epochs == 0:
        return params
    if len(data) == 0:
        raise EmptyInputError("no local data to train on")

    rng = np.random.default_rng(seed)
    n = len(data)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grad = loss_and_gradient(layout, params, Batch(data.features[idx], data.labels[idx]))
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergenceError(epoch)
            params -= lr * grad
        if not np.all(np.isfinite(params)):
            raise DivergenceError(epoch)
    return params


def input_jacobians(layout: ModelLayout, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    """d p_k / d x_f for every row of ``X``; shape ``(rows, features, classes)``."""
    X = _check_inputs(layout, X)
    zs, acts, logits = _forward_pass(layout, params, X)
    layers = layout.unpack(params)

    # logit Jacobian, built front to back
    J = np.broadcast_to(layers[0][0], (X.shape[0],) + layers[0][0].shape)
    for li in range(1, len(layers)):
        d = _act_deriv(layout.activation, zs[li - 1], acts[li])
        J = (J * d[:, None, :]) @ layers[li][0]

    p = softmax(logits)
    mixed = np.einsum("vfk,vk->vf", J, p)
    return p[:, None, :] * (J - mixed[:, :, None])


def input_jacobian(layout: ModelLayout, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a single input vector, got shape {x.shape}")
    return input_jacobians(layout, params, x)[0]
