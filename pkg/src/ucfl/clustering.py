"""Reduce personalized streams by clustering collaboration vectors.

k-means runs standard squared-distance Lloyd iterations from k-means++
seeds, then polishes the partition with point moves on the unsquared
objective ``sum_i ||w_i - c(i)||`` (centroids stay cluster means). Runs are
ranked by that objective, which is also what :class:`ClusterPlan` reports.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .collaboration import CollabMatrix, normalize
from .errors import ValidationError
from .numerics import RngStream

MAX_ITER = 300


@dataclass(frozen=True, eq=False)
class ClusterPlan:
    k: int
    centroids: np.ndarray
    assign: np.ndarray
    inertia: float
    silhouette: float = 0.0

    @property
    def sizes(self):
        return np.bincount(self.assign, minlength=self.k)

    def members(self, c):
        return np.flatnonzero(self.assign == c)


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def unsquared_inertia(X, assign, centroids):
    return float(np.linalg.norm(X - centroids[assign], axis=1).sum())


def _kmeanspp(X, k, gen):
    m = len(X)
    chosen = [int(gen.integers(m))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(gen.choice(m, p=d2 / total))
        else:
            # fewer distinct points than clusters
            rest = np.setdiff1d(np.arange(m), chosen)
            nxt = int(gen.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def _assign(X, C):
    d2 = _sq_dists(X, C)
    assign = np.argmin(d2, axis=1)
    k = len(C)
    for c in range(k):
        if np.any(assign == c):
            continue
        # repair: move the point worst served by a shared cluster
        sizes = np.bincount(assign, minlength=k)
        movable = sizes[assign] > 1
        own = d2[np.arange(len(X)), assign]
        cand = np.flatnonzero(movable)
        far = cand[np.argmax(own[cand])]
        assign[far] = c
    return assign


def _centroids(X, assign, k):
    out = []
    for c in range(k):
        pts = X[assign == c]
        # identical members keep their exact vector as centroid
        out.append(pts[0].copy() if np.all(pts == pts[0]) else pts.mean(axis=0))
    return np.stack(out)


def lloyd(X, k, gen, max_iter=MAX_ITER):
    """One k-means run; returns ``(assign, centroids, squared_inertia_trace)``."""
    C = _kmeanspp(X, k, gen)
    assign = _assign(X, C)
    C = _centroids(X, assign, k)
    trace = [float(((X - C[assign]) ** 2).sum())]
    for _ in range(max_iter - 1):
        new = _assign(X, C)
        if np.array_equal(new, assign):
            break
        assign = new
        C = _centroids(X, assign, k)
        trace.append(float(((X - C[assign]) ** 2).sum()))
    return assign, C, trace


def _cluster_costs(X, assign, k):
    C = _centroids(X, assign, k)
    return np.array([np.linalg.norm(X[assign == c] - C[c], axis=1).sum() for c in range(k)])


def refine_unsquared(X, assign, k, max_passes=MAX_ITER):
    """Single-point moves that lower ``sum_i ||x_i - mean(C(i))||``.

    Lloyd's update minimizes the squared objective; its fixed points need not
    be optimal for the unsquared one. Each pass tries, for every point, the
    best move into another cluster (never emptying a cluster) and applies it
    when the unsquared inertia drops.
    """
    assign = assign.copy()
    costs = _cluster_costs(X, assign, k)
    sums = np.stack([X[assign == c].sum(axis=0) for c in range(k)])
    sizes = np.bincount(assign, minlength=k).astype(np.float64)
    for _ in range(max_passes):
        moved = False
        for i in range(len(X)):
            a = assign[i]
            if sizes[a] == 1:
                continue
            rest = (assign == a)
            rest[i] = False
            cost_a = np.linalg.norm(X[rest] - (sums[a] - X[i]) / (sizes[a] - 1), axis=1).sum()
            means = (sums + X[i]) / (sizes + 1)[:, None]
            D = np.sqrt(((X[:, None, :] - means[None, :, :]) ** 2).sum(axis=2))
            member = np.zeros((len(X), k), dtype=bool)
            member[np.arange(len(X)), assign] = True
            member[i] = False
            new_b = (D * member).sum(axis=0) + D[i]
            gain = costs[a] + costs - cost_a - new_b
            gain[a] = -np.inf
            b = int(np.argmax(gain))
            if gain[b] > 1e-12 * max(1.0, costs.sum()):
                assign[i] = b
                sums[a] -= X[i]
                sums[b] += X[i]
                sizes[a] -= 1
                sizes[b] += 1
                costs[a], costs[b] = cost_a, new_b[b]
                moved = True
        if not moved:
            break
    return assign


def kmeans(vectors, k, restarts=10, rng=None, max_iter=MAX_ITER):
    """Best of ``restarts`` k-means runs, ranked by (unsquared inertia, run index).

    Each run is Lloyd from k-means++ seeds followed by
    :func:`refine_unsquared`, so the reported partition is a local optimum
    of the unsquared objective itself.
    """
    X = np.asarray(vectors, dtype=np.float64)
    m = len(X)
    if not 1 <= k <= m:
        raise ValidationError(f"need 1 <= k <= {m}, got k={k}")
    if restarts < 1:
        raise ValidationError("restarts must be >= 1")
    if rng is None:
        rng = RngStream(0, "kmeans")
    best = None
    for r in range(restarts):
        assign, C, _ = lloyd(X, k, rng.child("restart", r).generator, max_iter)
        if 1 < k < m:
            assign = refine_unsquared(X, assign, k, max_iter)
            C = _centroids(X, assign, k)
        score = unsquared_inertia(X, assign, C)
        if best is None or score < best[0]:
            best = (score, assign, C)
    score, assign, C = best
    plan = ClusterPlan(k, C, assign, score)
    return ClusterPlan(k, C, assign, score, silhouette(X, plan))


def silhouette(vectors, plan):
    """Mean silhouette with Euclidean distances.

    Members of singleton clusters score 0 and ``0/0`` counts as 0, so a
    clustering with one cluster, or with one cluster per point, scores 0.
    """
    X = np.asarray(vectors, dtype=np.float64)
    assign = np.asarray(plan.assign)
    m = len(X)
    k = plan.k
    if k <= 1 or k >= m:
        return 0.0
    D = np.sqrt(np.maximum(_sq_dists(X, X), 0.0))
    sizes = np.bincount(assign, minlength=k)
    s = np.zeros(m)
    for i in range(m):
        own = assign[i]
        if sizes[own] == 1:
            continue
        a = D[i, assign == own].sum() / (sizes[own] - 1)
        b = min(D[i, assign == c].mean() for c in range(k) if c != own and sizes[c])
        top = max(a, b)
        s[i] = (b - a) / top if top > 0 else 0.0
    return float(s.mean())


def default_tradeoff(lam, m):
    """``c(k, s) = s - lam * (k - 1) / (m - 1)``."""
    def score(k, s):
        return s - lam * (k - 1) / (m - 1) if m > 1 else s
    return score


def select_streams(weights, tradeoff, restarts=10, rng=None, ks=None):
    """Silhouette-guided choice of the number of streams.

    Clusters the rows of ``weights`` for every ``k`` in ``ks`` (default
    ``1..m``) and returns ``(m_t, plan, table)`` where ``table`` lists
    ``(k, silhouette, score)``. Ties go to the smaller ``k``.
    """
    if rng is None:
        rng = RngStream(0, "kmeans")
    W = weights.w if isinstance(weights, CollabMatrix) else np.asarray(weights, dtype=np.float64)
    m = len(W)
    ks = list(range(1, m + 1)) if ks is None else sorted(ks)
    table, plans = [], {}
    for k in ks:
        plan = kmeans(W, k, restarts, rng.child("k", k))
        plans[k] = plan
        table.append((k, plan.silhouette, float(tradeoff(k, plan.silhouette))))
    best = max(table, key=lambda row: (row[2], -row[0]))
    return best[0], plans[best[0]], table


def _renormalize(row):
    row = np.maximum(row, 0.0)
    return row if abs(math.fsum(row) - 1.0) <= 1e-12 else normalize(row)


def centroid_rows(plan):
    """Per-client aggregation rows where each client uses its cluster centroid."""
    return CollabMatrix(np.array([_renormalize(plan.centroids[c]) for c in plan.assign]))


def stream_rows(plan):
    """One aggregation row per stream (cluster) rather than per client."""
    return np.array([_renormalize(plan.centroids[c]) for c in range(plan.k)])


def write_score_table(table, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k", "silhouette", "tradeoff_score"])
        for k, s, c in table:
            writer.writerow([k, format(s, ".17g"), format(c, ".17g")])
