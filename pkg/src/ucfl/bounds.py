"""Excess-risk bounds for weighted empirical risk minimization.

Both bounds share an estimation term

    B * sqrt(sum_j w_j^2 / n_j) * (sqrt(2 d / N * ln(e N / d)) + sqrt(ln(2 / delta)))

with ``N = sum_j n_j``. The discrepancy bound adds ``2 sum_j w_j d_j + 2 gamma``;
the Jensen-Shannon bound adds ``B * sqrt(2 sum_j w_j JS_j)``. Logarithms are
natural. Divergences are inputs; nothing here estimates them from data.
"""

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError

NORM_TOL = 1e-12


def as_distribution(p):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValidationError("a distribution is a non-empty 1-D vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValidationError("probabilities must be finite and non-negative")
    if abs(math.fsum(p) - 1.0) > NORM_TOL:
        raise ValidationError("probabilities must sum to 1")
    return p


def kl_divergence(p, q):
    """KL(p || q) in nats with ``0 log 0 = 0``; infinite if p is not dominated by q."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    if np.any(q[mask] == 0):
        return math.inf
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def js_divergence(p, q):
    """``KL(p || M) + KL(q || M)`` with ``M = (p + q) / 2``; lies in ``[0, 2 ln 2]``."""
    p = as_distribution(p)
    q = as_distribution(q)
    if p.shape != q.shape:
        raise ValidationError("distributions have different support sizes")
    # p log(2p / (p + q)) rather than p log(p / M): M = (p + q) / 2 underflows for subnormal entries
    both = p + q
    total = 0.0
    for a in (p, q):
        mask = a > 0
        total += float(np.sum(a[mask] * np.log(2.0 * a[mask] / both[mask])))
    return min(max(total, 0.0), 2.0 * math.log(2.0))


@dataclass(frozen=True)
class BoundInputs:
    """Inputs of both bounds, seen from one target client.

    ``divergences[j]`` is the divergence between the target's distribution
    and client ``j``'s (zero for the target itself).
    """

    weights: tuple
    sizes: tuple
    B: float
    d: float
    delta: float
    divergences: tuple
    gamma: float = 0.0

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        n = tuple(float(x) for x in self.sizes)
        div = tuple(float(x) for x in self.divergences)
        problems = []
        if not (len(w) == len(n) == len(div)) or not w:
            problems.append("weights, sizes and divergences need the same non-zero length")
        if any(x < 0 for x in w) or abs(math.fsum(w) - 1.0) > 1e-9:
            problems.append("weights must be non-negative and sum to 1")
        if any(x <= 0 for x in n):
            problems.append("sizes must be positive")
        if any(x < 0 for x in div):
            problems.append("divergences must be non-negative")
        if self.B < 0 or self.gamma < 0:
            problems.append("B and gamma must be non-negative")
        if not 0 < self.delta < 1:
            problems.append("delta must lie in (0, 1)")
        if not self.d > 0:
            problems.append("d must be positive")
        elif n and self.d >= sum(n):
            problems.append("d must be smaller than the total sample count")
        if problems:
            raise ValidationError("; ".join(problems))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "sizes", n)
        object.__setattr__(self, "divergences", div)


def estimation_term(inp):
    w = np.asarray(inp.weights)
    n = np.asarray(inp.sizes)
    total = n.sum()
    spread = math.sqrt(float(np.sum(w * w / n)))
    complexity = math.sqrt(2.0 * inp.d / total * math.log(math.e * total / inp.d))
    confidence = math.sqrt(math.log(2.0 / inp.delta))
    return inp.B * spread * (complexity + confidence)


def bound_th1(inp):
    """Discrepancy-distance bound; ``inp.divergences`` are discrepancies."""
    bias = 2.0 * float(np.dot(inp.weights, inp.divergences)) + 2.0 * inp.gamma
    return estimation_term(inp) + bias


def bound_th2(inp):
    """Jensen-Shannon bound; ``inp.divergences`` are JS divergences."""
    return estimation_term(inp) + inp.B * math.sqrt(2.0 * float(np.dot(inp.weights, inp.divergences)))


def two_client_sweep(sizes, divergence, B=1.0, d=500.0, delta=1e-12, steps=100, bound=bound_th2):
    """Evaluate ``bound`` for weights ``(1 - a, a)``, ``a`` on an even grid over [0, 1].

    Client 0 is the target; ``divergence`` is its divergence to client 1.
    Returns a list of ``(a, bound_value)``.
    """
    rows = []
    for k in range(steps + 1):
        a = k / steps
        inp = BoundInputs((1.0 - a, a), tuple(sizes), B, d, delta, (0.0, divergence))
        rows.append((a, bound(inp)))
    return rows


def write_sweep(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["w_other", "bound"])
        for a, v in rows:
            writer.writerow([format(a, ".17g"), format(v, ".17g")])


def with_divergences(inp, divergences):
    return replace(inp, divergences=tuple(divergences))
