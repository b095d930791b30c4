"""Local computation performed by each client."""

from dataclasses import dataclass

import numpy as np

from . import model
from .errors import NumericError, ValidationError
from .numerics import as_flat, l2_distance_sq


@dataclass(frozen=True)
class LocalTrainConfig:
    """Local SGD settings; defaults are lr 0.1, momentum 0.9, one epoch."""

    epochs: int = 1
    batch_size: int = 10
    lr: float = 0.1
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if not self.lr > 0:
            raise ValidationError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class CoefficientReport:
    """What a client uploads in the coefficient round."""

    full_gradient: np.ndarray
    sigma_sq: float
    n: int

    def __post_init__(self):
        if not self.sigma_sq >= 0:
            raise ValidationError("sigma_sq must be non-negative")
        if self.n < 1:
            raise ValidationError("n must be >= 1")
        object.__setattr__(self, "full_gradient", as_flat(self.full_gradient))


def client_update(spec, start, data, cfg, rng, context=None):
    """Run ``cfg.epochs`` epochs of mini-batch SGD with momentum from ``start``.

    A new random batch split is drawn every epoch and the short final batch
    is kept. The momentum buffer starts at zero on every call. When one
    batch covers the whole dataset the samples are used in their stored
    order, so a single momentum-free epoch is exactly one full-gradient step.
    """
    if len(data) == 0:
        raise ValidationError("client has no data")
    theta = np.array(start, dtype=np.float64)
    velocity = np.zeros_like(theta)
    n = len(data)
    bs = cfg.batch_size
    for epoch in range(cfg.epochs):
        if bs >= n:
            batches = [data]
        else:
            perm = rng.generator.permutation(n)
            batches = [data.subset(perm[k:k + bs]) for k in range(0, n, bs)]
        with np.errstate(over="ignore", invalid="ignore"):
            for batch in batches:
                try:
                    g = model.gradient(spec, theta, batch)
                except NumericError:
                    g = None
                if g is None or not np.all(np.isfinite(theta)):
                    raise NumericError("local training diverged", dict(context or {}, epoch=epoch))
                if cfg.momentum:
                    velocity = cfg.momentum * velocity + g
                    theta = theta - cfg.lr * velocity
                else:
                    theta = theta - cfg.lr * g
        if not np.all(np.isfinite(theta)):
            raise NumericError("local training diverged", dict(context or {}, epoch=epoch))
    return as_flat(theta)


def full_gradient(spec, theta0, data):
    """Gradient of the mean loss over the client's whole dataset."""
    return model.gradient(spec, theta0, data)


def gradient_variance(spec, theta0, data, batch_size, rng):
    """Mean squared deviation of disjoint mini-batch gradients from the full gradient.

    ``K = n // batch_size`` batches are drawn from a random permutation;
    leftover samples only enter the full gradient.
    """
    n = len(data)
    if batch_size < 1:
        raise ValidationError("variance batch size must be >= 1")
    K = n // batch_size
    if K == 0:
        raise ValidationError(f"variance batch size {batch_size} exceeds the {n} local samples")
    g_full = model.gradient(spec, theta0, data)
    if K == 1 and batch_size == n:
        return 0.0
    perm = rng.generator.permutation(n)
    total = 0.0
    for k in range(K):
        batch = data.subset(perm[k * batch_size:(k + 1) * batch_size])
        total += l2_distance_sq(model.gradient(spec, theta0, batch), g_full)
    return total / K


def coefficient_report(spec, theta0, data, variance_batch_size, rng):
    return CoefficientReport(
        full_gradient(spec, theta0, data),
        gradient_variance(spec, theta0, data, variance_batch_size, rng),
        len(data),
    )
