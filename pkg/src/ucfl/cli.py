"""Command-line entry point: ``ucfl run|sweep|bounds|select-streams``.

Exit codes: 0 success, 2 configuration error, 3 numeric error, 4 I/O error.
Failures print a JSON object to stderr.
"""

import argparse
import json
import logging
import math
import os
import sys

from . import bounds as bounds_mod
from . import comms
from .clustering import default_tradeoff, select_streams, write_score_table
from .collaboration import CollabMatrix
from .config import ExperimentConfig, config_hash, set_param
from .datagen import federation_from_config
from .errors import ConfigError, FormatError, NumericError, UCFLError, ValidationError
from .numerics import RngStream
from .orchestrator import prepare, run_algorithm, stream_plan

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "UCFL_THREADS"
SWEEP_PARAMS = {
    "variance_batch_size": "variance_batch_size",
    "n_k": "variance_batch_size",
    "streams": "streams",
    "m_t": "streams",
    "tradeoff_lambda": "tradeoff_lambda",
    "lambda": "tradeoff_lambda",
    "rho": "comms.rho",
}

logger = logging.getLogger("ucfl")


def comm_system(cfg, m):
    c = cfg.comms
    return comms.CommSystem(c["rho"], c["T_dl"], c["T_min"], c["mu_inv"], m,
                            c["dl_serialization"], c["ul_multiplier"])


def _apply_overrides(cfg, seed=None, threads=None):
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    env = os.environ.get(THREADS_ENV)
    if threads is None and env:
        try:
            threads = int(env)
        except ValueError:
            raise ConfigError([f"{THREADS_ENV}: not an integer ({env!r})"]) from None
    if threads is not None:
        cfg = cfg.replace(threads=threads)
    return cfg


def run_experiment(cfg, out_dir, config_path=None):
    """Run every configured algorithm and write all artifacts into ``out_dir``.

    Returns ``{algorithm: RunLog}``.
    """
    os.makedirs(out_dir, exist_ok=True)
    fed = federation_from_config(cfg.data, cfg.seed)
    prep = prepare(cfg, fed)
    weights, _ = prep.coefficients()
    m = prep.m
    written = []

    def path(name):
        written.append(name)
        return os.path.join(out_dir, name)

    weights.to_csv(path("collab_matrix.csv"))
    lam = cfg.tradeoff_lambda if cfg.tradeoff_lambda is not None else 0.0
    _, _, table = select_streams(weights, default_tradeoff(lam, m), cfg.kmeans_restarts,
                                 RngStream(cfg.seed, "kmeans"))
    write_score_table(table, path("cluster_scores.csv"))

    sys_model = comm_system(cfg, m)
    logs, timeline = {}, []
    for algo in cfg.algorithms:
        runlog = run_algorithm(algo, cfg, prepared=prep)
        logs[algo] = runlog
        runlog.write_json(path(f"runlog_{algo}.json"))
        runlog.write_metrics_csv(path(f"metrics_{algo}.csv"))
        runlog.write_summary_csv(path(f"summary_{algo}.csv"))
        if algo != "local":
            for t, acc in comms.rescale_timeline(runlog, sys_model, runlog.m_t):
                timeline.append((t, acc, algo, runlog.m_t))
        logger.info("%s: final mean acc %.4f, worst %.4f", algo, runlog.final_mean_acc(), runlog.final_worst_acc())

    comms.write_timeline(timeline, path("timeline.csv"))
    with open(path("summary.csv"), "w") as fh:
        cols = ["round"] + [f"{a}_{k}" for a in cfg.algorithms for k in ("mean_acc", "worst_acc")]
        fh.write(",".join(cols) + "\n")
        for t in range(cfg.rounds + 1):
            vals = [str(t)]
            for a in cfg.algorithms:
                row = logs[a].summary[t]
                vals += [format(row["mean_acc"], ".17g"), format(row["worst_acc"], ".17g")]
            fh.write(",".join(vals) + "\n")
    manifest = {
        "config_path": os.fspath(config_path) if config_path else None,
        "config_hash": cfg.hash,
        "resolved_config": cfg.echo(),
        "artifacts": sorted(written + ["manifest.json"]),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return logs


def parse_sweep_value(param, text):
    text = text.strip()
    if param == "streams":
        return text if text in ("all", "auto") else int(text)
    if param == "variance_batch_size":
        if "n/" in text:
            return text
        if any(ch in text for ch in ".eE"):
            return float(text)
        return int(text)
    return float(text)


def sweep(cfg, param, values, out_dir, config_path=None):
    """One sub-run per value plus ``sweep.csv`` summarizing them."""
    key = SWEEP_PARAMS.get(param)
    if key is None:
        raise ConfigError([f"sweep: unknown parameter {param!r}; choose from {sorted(SWEEP_PARAMS)}"])
    if not values:
        raise ConfigError(["sweep: the value list is empty"])
    try:
        parsed = [parse_sweep_value(key, v) if isinstance(v, str) else v for v in values]
    except ValueError as exc:
        raise ConfigError([f"sweep: bad value ({exc})"]) from None
    base = cfg.to_dict()
    problems, subcfgs = [], []
    for v in parsed:
        try:
            subcfgs.append(ExperimentConfig(set_param(base, key, v)))
        except ConfigError as exc:
            problems += [f"value {v!r}: {p}" for p in exc.problems]
    if problems:
        raise ConfigError(problems)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for v, sub in zip(parsed, subcfgs):
        sub_dir = os.path.join(out_dir, f"{key.split('.')[-1]}={v}".replace("/", "_"))
        logs = run_experiment(sub, sub_dir, config_path)
        for algo, runlog in logs.items():
            cluster = runlog.artifacts.get("cluster")
            sil = cluster["silhouette"] if cluster else 0.0
            system = comm_system(sub, len(runlog.final_models))
            if algo == "local":
                rt = float(comms.expected_compute_time(system))  # nothing is exchanged
            else:
                rt = comms.round_wall_time(system, runlog.m_t, runlog.uplink_multiplier)
            rows.append([v, algo, runlog.m_t, runlog.final_mean_acc(), runlog.final_worst_acc(),
                         sil, rt, rt * sub.rounds])
    with open(os.path.join(out_dir, "sweep.csv"), "w") as fh:
        fh.write("value,algorithm,m_t,final_mean_acc,final_worst_acc,silhouette,round_time,total_time\n")
        for r in rows:
            fh.write(",".join([str(r[0]), r[1], str(r[2])] + [format(x, ".17g") for x in r[3:]]) + "\n")
    return rows


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser():
    p = argparse.ArgumentParser(prog="ucfl", description="User-centric federated learning simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the configured algorithms")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int)

    s = sub.add_parser("sweep", help="repeat a run over values of one parameter")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--param", required=True, help=", ".join(sorted(SWEEP_PARAMS)))
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int)

    b = sub.add_parser("bounds", help="two-client excess-risk bound sweep")
    b.add_argument("--out", required=True)
    b.add_argument("--sizes", default="10,1000")
    b.add_argument("--divergence", type=float, default=2 * math.log(2))
    b.add_argument("--kind", choices=["th1", "th2"], default="th2")
    b.add_argument("--B", type=float, default=1.0)
    b.add_argument("--d", type=float, default=500.0)
    b.add_argument("--delta", type=float, default=1e-12)
    b.add_argument("--steps", type=int, default=100)

    k = sub.add_parser("select-streams", help="silhouette-based stream selection on a saved matrix")
    k.add_argument("--weights", required=True, help="collaboration matrix CSV")
    k.add_argument("--out", required=True)
    k.add_argument("--lambda", dest="lam", type=float, default=0.1)
    k.add_argument("--restarts", type=int, default=10)
    k.add_argument("--seed", type=int, default=0)
    return p


def _cmd_run(args):
    cfg = _apply_overrides(ExperimentConfig.load(args.config), args.seed, args.threads)
    run_experiment(cfg, args.out, args.config)


def _cmd_sweep(args):
    cfg = _apply_overrides(ExperimentConfig.load(args.config), args.seed, args.threads)
    sweep(cfg, args.param, [v for v in args.values.split(",") if v.strip()], args.out, args.config)


def _cmd_bounds(args):
    sizes = _floats(args.sizes)
    if len(sizes) != 2:
        raise ConfigError(["bounds: --sizes needs exactly two values"])
    bound = bounds_mod.bound_th2 if args.kind == "th2" else bounds_mod.bound_th1
    try:
        rows = bounds_mod.two_client_sweep(sizes, args.divergence, args.B, args.d, args.delta, args.steps, bound)
    except ValidationError as exc:
        raise ConfigError([f"bounds: {exc}"]) from None
    os.makedirs(args.out, exist_ok=True)
    bounds_mod.write_sweep(rows, os.path.join(args.out, "bound_sweep.csv"))
    best = min(rows, key=lambda r: r[1])
    print(json.dumps({"argmin_w_other": best[0], "min_bound": best[1]}))


def _cmd_select(args):
    weights = CollabMatrix.from_csv(args.weights)
    m_t, plan, table = select_streams(weights, default_tradeoff(args.lam, weights.m), args.restarts,
                                      RngStream(args.seed, "kmeans"))
    os.makedirs(args.out, exist_ok=True)
    write_score_table(table, os.path.join(args.out, "cluster_scores.csv"))
    result = {"m_t": m_t, "assign": plan.assign.tolist(), "silhouette": plan.silhouette}
    with open(os.path.join(args.out, "streams.json"), "w") as fh:
        json.dump(result, fh, indent=2)
        fh.write("\n")
    print(json.dumps(result))


COMMANDS = {"run": _cmd_run, "sweep": _cmd_sweep, "bounds": _cmd_bounds, "select-streams": _cmd_select}


def _fail(code, kind, message, **extra):
    json.dump({"error": kind, "message": message, **extra}, sys.stderr)
    sys.stderr.write("\n")
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), problems=exc.problems)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc), context=exc.context)
    except (OSError, FormatError) as exc:
        return _fail(EXIT_IO, "io", str(exc))
    except UCFLError as exc:
        return _fail(EXIT_CONFIG, "validation", str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
