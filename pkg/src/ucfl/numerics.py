"""Flat parameter vectors, seeded random streams and a finite-difference oracle.

Parameters of every model are handled as one read-only 1-D ``float64`` array
("flat params"). Randomness is always derived from a key
``(seed, purpose, *ids)`` so results do not depend on the order in which
clients are processed.
"""

import zlib

import numpy as np

from .errors import NumericError, StructuralError, ValidationError


def as_flat(values):
    """Return ``values`` as a frozen 1-D float64 array (a FlatParams value)."""
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise NumericError("parameters contain non-finite entries")
    arr.flags.writeable = False
    return arr


def _purpose_id(purpose):
    if isinstance(purpose, str):
        return zlib.crc32(purpose.encode("utf-8"))
    return int(purpose)


class RngStream:
    """Deterministic random stream keyed by ``(seed, stream_id...)``.

    Two instances with the same key produce the same samples regardless of
    what else runs in the process. String components are mapped through
    CRC-32 so keys read naturally, e.g. ``RngStream(7, "local", 3, 12)``.
    """

    def __init__(self, seed, *stream_id):
        if int(seed) < 0:
            raise ValidationError("seed must be non-negative")
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = tuple(_purpose_id(s) for s in stream_id)
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32, *self.stream_id]
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, *stream_id):
        """A sub-stream whose key extends this stream's key."""
        return RngStream(self.seed, *self.stream_id, *(_purpose_id(s) for s in stream_id))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def weighted_combine(coeffs, params):
    """Return ``sum_j coeffs[j] * params[j]``.

    Terms with a zero coefficient are skipped and the sum is accumulated in
    index order, so a one-hot coefficient vector returns that parameter
    vector bit for bit.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64).reshape(-1)
    if len(coeffs) != len(params):
        raise StructuralError(f"{len(coeffs)} coefficients for {len(params)} parameter vectors")
    if len(params) == 0:
        raise StructuralError("nothing to combine")
    if not np.all(np.isfinite(coeffs)):
        raise ValidationError("coefficients must be finite")
    dim = np.shape(params[0])[0]
    for p in params:
        if np.ndim(p) != 1 or np.shape(p)[0] != dim:
            raise StructuralError("parameter vectors differ in dimension")
    out = None
    for c, p in zip(coeffs, params):
        if c == 0.0:
            continue
        term = c * np.asarray(p, dtype=np.float64)
        out = term if out is None else out + term
    if out is None:
        out = np.zeros(dim)
    return as_flat(out)


def l2_distance_sq(a, b):
    """Squared Euclidean distance between two flat vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise StructuralError(f"dimension mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.dot(d, d))


def finite_diff_gradient(loss_fn, x, h=1e-5):
    """Central-difference gradient of ``loss_fn`` at ``x``; used as a test oracle."""
    if not h > 0:
        raise ValidationError("h must be positive")
    x = np.array(x, dtype=np.float64).reshape(-1)
    grad = np.empty_like(x)
    for k in range(x.size):
        orig = x[k]
        x[k] = orig + h
        up = loss_fn(x.copy())
        x[k] = orig - h
        down = loss_fn(x.copy())
        x[k] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"loss is not finite around coordinate {k}")
        grad[k] = (up - down) / (2.0 * h)
    return as_flat(grad)
