"""Softmax-linear and one-hidden-layer MLP classifiers on flat parameters.

Flattening order is layer-major; within a layer the weight matrix comes
first (row-major, shape ``(fan_in, fan_out)``) followed by its bias. For
``mlp-1`` that is ``W1 (p, H), b1 (H), W2 (H, C), b2 (C)``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, StructuralError, ValidationError
from .numerics import as_flat

KINDS = ("softmax-linear", "mlp-1")
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    n_classes: int
    hidden: int = 0
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.n_classes < 2:
            raise ValidationError("need input_dim >= 1 and n_classes >= 2")
        if self.kind == "mlp-1" and self.hidden < 1:
            raise ValidationError("mlp-1 needs a positive hidden width")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")

    @property
    def layers(self):
        """``(fan_in, fan_out)`` of each dense layer."""
        if self.kind == "softmax-linear":
            return [(self.input_dim, self.n_classes)]
        return [(self.input_dim, self.hidden), (self.hidden, self.n_classes)]

    @property
    def dim(self):
        return sum(i * o + o for i, o in self.layers)


def unflatten(spec, params):
    """Split flat params into ``[(W, b), ...]`` views, one pair per layer."""
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.size != spec.dim:
        raise StructuralError(f"expected {spec.dim} parameters, got shape {params.shape}")
    out, k = [], 0
    for i, o in spec.layers:
        W = params[k:k + i * o].reshape(i, o)
        k += i * o
        b = params[k:k + o]
        k += o
        out.append((W, b))
    return out


def init_params(spec, rng):
    """Glorot-uniform weights, zero biases."""
    gen = rng.generator
    chunks = []
    for i, o in spec.layers:
        a = np.sqrt(6.0 / (i + o))
        chunks.append(gen.uniform(-a, a, size=i * o))
        chunks.append(np.zeros(o))
    return as_flat(np.concatenate(chunks))


def _check_batch(spec, batch):
    if len(batch) == 0:
        raise ValidationError("batch is empty")
    if batch.n_features != spec.input_dim:
        raise StructuralError(f"model expects {spec.input_dim} features, batch has {batch.n_features}")


def _forward(spec, params, X):
    layers = unflatten(spec, params)
    if spec.kind == "softmax-linear":
        (W, b), = layers
        return X @ W + b, None
    (W1, b1), (W2, b2) = layers
    z = X @ W1 + b1
    h = np.maximum(z, 0.0) if spec.activation == "relu" else np.tanh(z)
    return h @ W2 + b2, (z, h)


def logits(spec, params, X):
    """Raw scores; overflow yields non-finite values instead of a warning."""
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward(spec, params, np.asarray(X, dtype=np.float64))[0]


def _log_softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    return Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))


def loss(spec, params, batch):
    """Mean cross-entropy of the batch; non-finite logits raise NumericError."""
    _check_batch(spec, batch)
    Z = logits(spec, params, batch.features)
    if not np.all(np.isfinite(Z)):
        raise NumericError("logits are not finite")
    logp = _log_softmax(Z)
    value = -logp[np.arange(len(batch)), batch.labels].mean()
    return max(float(value), 0.0)


def gradient(spec, params, batch):
    """Analytic gradient of :func:`loss` with respect to the flat params."""
    _check_batch(spec, batch)
    X = batch.features
    n = len(batch)
    with np.errstate(over="ignore", invalid="ignore"):
        Z, cache = _forward(spec, params, X)
    if not np.all(np.isfinite(Z)):
        raise NumericError("logits are not finite")
    G = np.exp(_log_softmax(Z))
    G[np.arange(n), batch.labels] -= 1.0
    G /= n
    if spec.kind == "softmax-linear":
        return as_flat(np.concatenate([(X.T @ G).ravel(), G.sum(axis=0)]))
    (_, _), (W2, _) = unflatten(spec, params)
    z, h = cache
    dh = G @ W2.T
    dz = dh * (z > 0) if spec.activation == "relu" else dh * (1.0 - h * h)
    return as_flat(np.concatenate([
        (X.T @ dz).ravel(), dz.sum(axis=0), (h.T @ G).ravel(), G.sum(axis=0),
    ]))


def predict(spec, params, X):
    """Argmax class; ties go to the smallest class index."""
    return np.argmax(logits(spec, params, X), axis=1)


def predict_proba(spec, params, X):
    return np.exp(_log_softmax(logits(spec, params, X)))


def accuracy(spec, params, data):
    if len(data) == 0:
        raise ValidationError("cannot score an empty dataset")
    return float(np.mean(predict(spec, params, data.features) == data.labels))
