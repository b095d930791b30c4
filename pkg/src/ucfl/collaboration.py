"""Gradient-similarity collaboration weights.

Each client ``i`` weights client ``j`` by ``n_j * exp(-delta_ij / (2 s_i s_j))``
normalized over ``j``, where ``delta_ij`` is the squared distance between
full gradients at a shared starting point and ``s_i**2`` is client ``i``'s
gradient-noise estimate.
"""

import csv
import math

import numpy as np

from .errors import FormatError, StructuralError, ValidationError
from .numerics import l2_distance_sq

ROW_TOL = 1e-9


class CollabMatrix:
    """Row-stochastic ``m x m`` matrix of mixing coefficients."""

    def __init__(self, w):
        w = np.array(w, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] < 1:
            raise StructuralError(f"mixing matrix must be square, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValidationError("mixing matrix has non-finite entries")
        if np.any(w < 0):
            raise ValidationError("mixing matrix has negative entries")
        bad = np.flatnonzero(np.abs(w.sum(axis=1) - 1.0) > ROW_TOL)
        if bad.size:
            raise ValidationError(f"rows {bad.tolist()} do not sum to 1")
        w.flags.writeable = False
        self.w = w

    @property
    def m(self):
        return self.w.shape[0]

    def row(self, i):
        return self.w[i]

    def __eq__(self, other):
        return isinstance(other, CollabMatrix) and np.array_equal(self.w, other.w)

    def __repr__(self):
        return f"CollabMatrix(m={self.m})"

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in self.w:
                writer.writerow([format(v, ".17g") for v in row])

    @classmethod
    def from_csv(cls, path):
        rows = []
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row:
                    continue
                try:
                    rows.append([float(v) for v in row])
                except ValueError as exc:
                    raise FormatError(f"line {lineno}: {exc}", path) from None
        if not rows:
            raise FormatError("empty matrix file", path, 0)
        if any(len(r) != len(rows) for r in rows):
            raise FormatError("matrix CSV is not square", path)
        return cls(rows)


def normalize(v):
    """Scale a non-negative vector to sum 1 using a correctly rounded sum."""
    v = np.asarray(v, dtype=np.float64)
    return v / math.fsum(v)


def fedavg_weights(n):
    """Data-size proportional weights ``n_j / sum(n)``."""
    return normalize(n)


def pairwise_delta(reports):
    """Squared distances between the clients' full gradients."""
    grads = [r.full_gradient for r in reports]
    if not grads:
        raise StructuralError("no reports")
    dim = grads[0].shape
    if any(g.shape != dim for g in grads):
        raise StructuralError("reported gradients differ in dimension")
    m = len(grads)
    delta = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            delta[i, j] = delta[j, i] = l2_distance_sq(grads[i], grads[j])
    return delta


def kernel_exponents(delta, sigma_sq):
    """``-delta_ij / (2 s_i s_j)`` with the zero-variance limits resolved.

    A zero denominator gives exponent 0 when ``delta_ij == 0`` and ``-inf``
    otherwise.
    """
    delta = np.asarray(delta, dtype=np.float64)
    sigma = np.sqrt(np.asarray(sigma_sq, dtype=np.float64))
    denom = 2.0 * np.outer(sigma, sigma)
    expo = np.zeros_like(delta)
    pos = denom > 0
    with np.errstate(over="ignore"):
        # a subnormal denominator overflows to -inf, which is the intended limit
        expo[pos] = -delta[pos] / denom[pos]
    expo[~pos & (delta > 0)] = -np.inf
    return expo


def mixing_matrix(delta, sigma_sq, n):
    """Build the user-centric :class:`CollabMatrix` from distances, variances and sizes.

    Never raises on degenerate kernels: rows whose kernel vanishes entirely
    fall back to pure self-weighting.
    """
    delta = np.asarray(delta, dtype=np.float64)
    sigma_sq = np.asarray(sigma_sq, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    m = len(n)
    if delta.shape != (m, m) or sigma_sq.shape != (m,):
        raise StructuralError("delta must be m x m and sigma_sq length m")
    if np.any(delta < 0) or np.any(sigma_sq < 0) or np.any(n < 1):
        raise ValidationError("need delta >= 0, sigma_sq >= 0 and n >= 1")
    expo = kernel_exponents(delta, sigma_sq)
    w = np.zeros((m, m))
    for i in range(m):
        row = expo[i]
        top = row.max()
        if not np.isfinite(top):
            w[i, i] = 1.0
            continue
        # shifting by the row maximum keeps the largest kernel at exactly 1
        numer = n * np.exp(row - top) if top != 0.0 else n * np.exp(row)
        w[i] = normalize(numer)
    return CollabMatrix(w)


def block_weight_means(weights, group_of):
    """Mean off-diagonal weight inside groups and across groups."""
    w = weights.w if isinstance(weights, CollabMatrix) else np.asarray(weights)
    g = np.asarray(group_of)
    same = g[:, None] == g[None, :]
    off = ~np.eye(len(g), dtype=bool)
    inside = w[same & off]
    across = w[~same]
    return (float(inside.mean()) if inside.size else float("nan"),
            float(across.mean()) if across.size else float("nan"))
