"""Round-synchronous federated training loops.

Every algorithm is expressed through *streams*: a stream is a model kept at
the server together with an aggregation row over all clients. Each round,
every client trains the model of the stream it is served, and each stream is
replaced by its row-weighted combination of the returned models.

=================  ==============================  =========================
algorithm          streams                         rows
=================  ==============================  =========================
``user-centric``   one per client (or cluster)     mixing matrix (centroids)
``fedavg``         one                             ``n_j / sum(n)``
``local``          one per client                  identity
``oracle``         one per true group              in-group ``n_j`` share
``parallel``       as ``user-centric``             as ``user-centric``
=================  ==============================  =========================

In the ``parallel`` variant each client trains *every* stream it
contributes to, which multiplies its uplink load by the number of streams.

Client ``j`` in round ``t`` always draws its batches from
``RngStream(seed, "local", j, t)``, so runs of different algorithms are
paired and the degenerate cases coincide bit for bit.
"""

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import client as client_mod
from . import model
from .clustering import default_tradeoff, kmeans, select_streams, stream_rows
from .collaboration import CollabMatrix, fedavg_weights, mixing_matrix, normalize, pairwise_delta
from .config import ExperimentConfig, parse_fraction
from .datagen import FederationData, holdout_indices
from .errors import NumericError, ValidationError
from .numerics import RngStream, weighted_combine

log = logging.getLogger(__name__)


@dataclass
class RunLog:
    algorithm: str
    config: dict
    seed: int
    m_t: int
    uplink_multiplier: int
    metrics: list = field(default_factory=list)
    summary: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)
    model_digests: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    final_models: list = field(default_factory=list)

    @property
    def rounds(self):
        return len(self.summary) - 1

    def final_mean_acc(self):
        return self.summary[-1]["mean_acc"]

    def final_worst_acc(self):
        return self.summary[-1]["worst_acc"]

    def mean_acc(self):
        return [row["mean_acc"] for row in self.summary]

    def to_json_dict(self):
        return {
            "algorithm": self.algorithm,
            "seed": self.seed,
            "m_t": self.m_t,
            "uplink_multiplier": self.uplink_multiplier,
            "config": self.config,
            "coefficient_round": self.artifacts,
            "model_digests": self.model_digests,
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_metrics_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["round", "client_id", "train_loss", "val_accuracy"])
            for row in self.metrics:
                writer.writerow([row["round"], row["client_id"],
                                 format(row["train_loss"], ".17g"), format(row["val_accuracy"], ".17g")])

    def write_summary_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["round", "mean_acc", "worst_acc"])
            for row in self.summary:
                writer.writerow([row["round"], format(row["mean_acc"], ".17g"), format(row["worst_acc"], ".17g")])


@dataclass
class Prepared:
    """Everything shared by the algorithms of one experiment."""

    cfg: ExperimentConfig
    spec: model.ModelSpec
    train: FederationData
    val: list
    theta0: np.ndarray
    _coefficients: tuple = None

    @property
    def m(self):
        return self.train.m

    def coefficients(self, executor=None):
        if self._coefficients is None:
            self._coefficients = coefficient_round(self.cfg, self.train, self.theta0, executor, self.spec)
        return self._coefficients


def model_spec_for(cfg, fed):
    mcfg = cfg.model
    return model.ModelSpec(mcfg["kind"], fed.clients[0].n_features, fed.n_classes,
                           mcfg["hidden"] if mcfg["kind"] == "mlp-1" else 0, mcfg["activation"])


def local_config(cfg):
    return client_mod.LocalTrainConfig(**cfg.local)


def variance_batch_size(setting, n):
    """Resolve the configured variance batch size for a client with ``n`` samples."""
    if isinstance(setting, str):
        frac = parse_fraction(setting)
        return max(1, n * frac.numerator // frac.denominator)
    if isinstance(setting, float):
        return max(1, int(n * setting))
    return int(setting)


def prepare(cfg, fed):
    """Split every client into train/holdout and draw the shared initial model.

    The split of a client depends only on the seed and its sample count, so
    clients holding identical data get identical training sets.
    """
    train, val = [], []
    for c in fed.clients:
        tr, va = holdout_indices(len(c), cfg.holdout, RngStream(cfg.seed, "holdout", len(c)))
        train.append(c.subset(tr))
        val.append(c.subset(va))
    train_fed = FederationData(train, fed.group_of, fed.scenario, fed.meta)
    spec = model_spec_for(cfg, fed)
    theta0 = model.init_params(spec, RngStream(cfg.seed, "init"))
    return Prepared(cfg, spec, train_fed, val, theta0)


def _map(executor, fn, items):
    if executor is None:
        return [fn(x) for x in items]
    return list(executor.map(fn, items))


def coefficient_round(cfg, fed, theta0, executor=None, spec=None):
    """Collect gradient/variance reports at ``theta0`` and build the mixing matrix.

    Returns ``(CollabMatrix, reports)``.
    """
    spec = spec or model_spec_for(cfg, fed)

    def report(i):
        data = fed.clients[i]
        try:
            return client_mod.coefficient_report(
                spec, theta0, data, variance_batch_size(cfg.variance_batch_size, len(data)),
                RngStream(cfg.seed, "variance", i))
        except NumericError as exc:
            exc.context.setdefault("client", i)
            raise

    reports = _map(executor, report, range(fed.m))
    delta = pairwise_delta(reports)
    W = mixing_matrix(delta, [r.sigma_sq for r in reports], [r.n for r in reports])
    return W, reports


def _artifacts(weights, reports, plan=None, table=None):
    out = {"weights": weights.w.tolist()}
    if reports is not None:
        out["delta"] = pairwise_delta(reports).tolist()
        out["sigma_sq"] = [r.sigma_sq for r in reports]
        out["n"] = [r.n for r in reports]
    if plan is not None:
        out["cluster"] = {"k": plan.k, "assign": plan.assign.tolist(),
                          "silhouette": plan.silhouette, "inertia": plan.inertia}
    if table is not None:
        out["score_table"] = [list(row) for row in table]
    return out


def stream_plan(cfg, weights, streams=None):
    """Resolve the ``streams`` setting into a :class:`ClusterPlan` (or None for one per client).

    Returns ``(plan, table)``; ``table`` is only produced for ``"auto"``.
    """
    streams = cfg.streams if streams is None else streams
    m = weights.m
    rng = RngStream(cfg.seed, "kmeans")
    if streams == "all" or streams == m:
        return None, None
    if streams == "auto":
        lam = cfg.tradeoff_lambda
        m_t, plan, table = select_streams(weights, default_tradeoff(lam, m), cfg.kmeans_restarts, rng)
        if m_t == m:
            return None, table
        return plan, table
    if not 1 <= streams <= m:
        raise ValidationError(f"streams must lie in [1, {m}]")
    return kmeans(weights.w, streams, cfg.kmeans_restarts, rng.child("k", streams)), None


def _digest(models):
    h = hashlib.sha1()
    for p in models:
        h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
    return h.hexdigest()


def _executor(cfg):
    return ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None


def _train(prep, algorithm, rows, member, parallel, artifacts, executor=None):
    """Shared round loop over streams; see the module docstring."""
    cfg, spec, train, val = prep.cfg, prep.spec, prep.train, prep.val
    local = local_config(cfg)
    m = train.m
    rows = [np.asarray(r, dtype=np.float64) for r in rows]
    member = [int(s) for s in member]
    n_streams = len(rows)
    runlog = RunLog(algorithm, cfg.echo(), cfg.seed, n_streams,
                    n_streams if parallel else 1, artifacts=artifacts)
    streams = [prep.theta0] * n_streams

    def evaluate(t):
        models = [streams[member[i]] for i in range(m)]
        accs = []
        for i, p in enumerate(models):
            try:
                acc = model.accuracy(spec, p, val[i])
                train_loss = model.loss(spec, p, train.clients[i])
            except NumericError as exc:
                exc.context.update(client=i, round=t)
                raise
            accs.append(acc)
            runlog.metrics.append({"round": t, "client_id": i, "train_loss": train_loss, "val_accuracy": acc})
        runlog.summary.append({"round": t, "mean_acc": float(np.mean(accs)), "worst_acc": float(min(accs))})
        runlog.model_digests.append(_digest(models))
        return models

    evaluate(0)
    for t in range(1, cfg.rounds + 1):
        tic = time.perf_counter()

        def update(job):
            s, j = job
            try:
                return client_mod.client_update(spec, streams[s], train.clients[j], local,
                                                RngStream(cfg.seed, "local", j, t),
                                                context={"client": j, "round": t})
            except NumericError as exc:
                exc.context.update(client=j, round=t)
                raise

        try:
            if parallel:
                jobs = [(s, j) for s in range(n_streams) for j in range(m) if rows[s][j] != 0.0]
                results = dict(zip(jobs, _map(executor, update, jobs)))
                streams = [weighted_combine(rows[s], [results.get((s, j), streams[s]) for j in range(m)])
                           for s in range(n_streams)]
            else:
                updates = _map(executor, update, [(member[j], j) for j in range(m)])
                streams = [weighted_combine(rows[s], updates) for s in range(n_streams)]
            runlog.wall_clock.append(time.perf_counter() - tic)
            evaluate(t)
        except NumericError as exc:
            exc.context.setdefault("round", t)
            exc.partial = runlog
            raise
        log.debug("%s round %d mean acc %.4f", algorithm, t, runlog.summary[-1]["mean_acc"])
    runlog.final_models = [streams[member[i]] for i in range(m)]
    return runlog


def _as_prepared(cfg, fed, prepared):
    if prepared is not None:
        return prepared
    if not isinstance(cfg, ExperimentConfig):
        cfg = ExperimentConfig.from_dict(cfg)
    return prepare(cfg, fed)


def _user_centric_rows(prep, weights, streams, executor):
    reports = None
    if weights is None:
        weights, reports = prep.coefficients(executor)
    elif not isinstance(weights, CollabMatrix):
        weights = CollabMatrix(weights)
    plan, table = stream_plan(prep.cfg, weights, streams)
    if plan is None:
        rows, member = list(weights.w), list(range(weights.m))
    else:
        rows, member = list(stream_rows(plan)), list(plan.assign)
    return rows, member, _artifacts(weights, reports, plan, table)


def run_user_centric(cfg, fed=None, weights=None, streams=None, prepared=None):
    """User-centric aggregation with optional stream reduction.

    ``weights`` overrides the mixing matrix computed in the coefficient
    round; ``streams`` overrides ``cfg.streams``.
    """
    prep = _as_prepared(cfg, fed, prepared)
    with _pool(prep.cfg) as ex:
        rows, member, art = _user_centric_rows(prep, weights, streams, ex)
        return _train(prep, "user-centric", rows, member, False, art, ex)


def run_parallel_user_centric(cfg, fed=None, weights=None, streams=None, prepared=None):
    """Every client trains every stream it contributes to; streams aggregate their own copies."""
    prep = _as_prepared(cfg, fed, prepared)
    with _pool(prep.cfg) as ex:
        rows, member, art = _user_centric_rows(prep, weights, streams, ex)
        return _train(prep, "parallel", rows, member, True, art, ex)


def run_fedavg(cfg, fed=None, prepared=None):
    prep = _as_prepared(cfg, fed, prepared)
    w = fedavg_weights(prep.train.sizes())
    with _pool(prep.cfg) as ex:
        return _train(prep, "fedavg", [w], [0] * prep.m, False, {"weights": [w.tolist()]}, ex)


def run_local(cfg, fed=None, prepared=None):
    prep = _as_prepared(cfg, fed, prepared)
    eye = np.eye(prep.m)
    with _pool(prep.cfg) as ex:
        return _train(prep, "local", list(eye), list(range(prep.m)), False, {}, ex)


def run_oracle(cfg, fed=None, prepared=None):
    """One FedAvg instance per ground-truth group."""
    prep = _as_prepared(cfg, fed, prepared)
    groups = sorted(set(prep.train.group_of))
    index = {g: k for k, g in enumerate(groups)}
    member = [index[g] for g in prep.train.group_of]
    sizes = np.asarray(prep.train.sizes(), dtype=np.float64)
    rows = []
    for k in range(len(groups)):
        mask = np.array([s == k for s in member])
        rows.append(np.where(mask, normalize(np.where(mask, sizes, 0.0)), 0.0))
    with _pool(prep.cfg) as ex:
        return _train(prep, "oracle", rows, member, False, {"groups": member}, ex)


RUNNERS = {
    "user-centric": run_user_centric,
    "fedavg": run_fedavg,
    "local": run_local,
    "oracle": run_oracle,
    "parallel": run_parallel_user_centric,
}


def run_algorithm(name, cfg, fed=None, prepared=None):
    try:
        runner = RUNNERS[name]
    except KeyError:
        raise ValidationError(f"unknown algorithm {name!r}") from None
    return runner(cfg, fed, prepared=prepared)


class _pool:
    """Context manager yielding a thread pool, or None for sequential execution."""

    def __init__(self, cfg):
        self.ex = _executor(cfg)

    def __enter__(self):
        return self.ex

    def __exit__(self, *exc):
        if self.ex is not None:
            self.ex.shutdown(wait=True)
        return False
