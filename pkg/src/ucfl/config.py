"""Experiment configuration: schema, defaults, validation and hashing.

A config is a nested mapping (YAML or JSON on disk). Every problem found is
reported at once through :class:`~ucfl.errors.ConfigError`.
"""

import copy
import hashlib
import json
import os
from fractions import Fraction

import yaml

from .errors import ConfigError

ALGORITHMS = ("user-centric", "fedavg", "local", "oracle", "parallel")
DATA_SOURCES = ("blobs", "idx", "csv")
DATA_SCENARIOS = ("iid", "identical", "label-shift", "label+covariate-shift", "concept-shift")
PERMUTATION_MODES = ("random", "cyclic")
# keys that change how a run executes but never what it outputs
EXECUTION_KEYS = ("threads",)

DEFAULTS = {
    "seed": 0,
    "rounds": 30,
    "holdout": 0.2,
    "threads": 1,
    "algorithms": ["user-centric", "fedavg", "local"],
    "streams": "all",
    "tradeoff_lambda": 0.1,
    "kmeans_restarts": 10,
    "variance_batch_size": "n/3",
    "model": {"kind": "softmax-linear", "hidden": 16, "activation": "relu"},
    "data": {
        "source": "blobs",
        "scenario": "concept-shift",
        "n_clients": 20,
        "n_classes": 4,
        "n_features": 2,
        "samples_per_client": 50,
        "spread": 0.5,
        "alpha": 0.4,
        "n_groups": 4,
        "permutation": "random",
        "angles": [0.0, 90.0, 180.0, 270.0],
        "images": None,
        "labels": None,
        "csv": None,
        "max_samples": None,
    },
    "local": {"epochs": 1, "batch_size": 10, "lr": 0.1, "momentum": 0.9},
    "comms": {
        "rho": 4.0,
        "T_dl": 1.0,
        "T_min": 1.0,
        "mu_inv": 1.0,
        "dl_serialization": True,
        "ul_multiplier": 1.0,
    },
}


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_leaf(path, value, problems):
    """Type/range rules per key; appends human-readable problems."""
    def bad(msg):
        problems.append(f"{path}: {msg} (got {value!r})")

    key = path.split(".")[-1]
    if path in ("seed",):
        if not _is_int(value) or value < 0:
            bad("must be a non-negative integer")
    elif path == "rounds":
        if not _is_int(value) or value < 0:
            bad("must be a non-negative integer")
    elif path == "holdout":
        if not _is_num(value) or not 0 < value < 1:
            bad("must lie in (0, 1)")
    elif path in ("threads", "kmeans_restarts"):
        if not _is_int(value) or value < 1:
            bad("must be a positive integer")
    elif path == "algorithms":
        if not isinstance(value, list) or not value:
            bad("must be a non-empty list")
        else:
            for a in value:
                if a not in ALGORITHMS:
                    problems.append(f"algorithms: unknown algorithm {a!r}; choose from {list(ALGORITHMS)}")
            if len(set(value)) != len(value):
                bad("lists an algorithm twice")
    elif path == "streams":
        if value not in ("all", "auto") and not (_is_int(value) and value >= 1):
            bad("must be 'all', 'auto' or a positive integer")
    elif path == "tradeoff_lambda":
        if value is not None and (not _is_num(value) or value < 0):
            bad("must be a non-negative number")
    elif path == "variance_batch_size":
        ok = (_is_int(value) and value >= 1) or (isinstance(value, float) and 0 < value <= 1)
        if isinstance(value, str):
            ok = parse_fraction(value) is not None
        if not ok:
            bad("must be a positive integer, a fraction in (0, 1] or 'n/<k>'")
    elif path == "model.kind":
        if value not in ("softmax-linear", "mlp-1"):
            bad("must be 'softmax-linear' or 'mlp-1'")
    elif path == "model.activation":
        if value not in ("relu", "tanh"):
            bad("must be 'relu' or 'tanh'")
    elif path == "data.source":
        if value not in DATA_SOURCES:
            bad(f"must be one of {list(DATA_SOURCES)}")
    elif path == "data.scenario":
        if value not in DATA_SCENARIOS:
            bad(f"must be one of {list(DATA_SCENARIOS)}")
    elif path == "data.permutation":
        if value not in PERMUTATION_MODES:
            bad(f"must be one of {list(PERMUTATION_MODES)}")
    elif path in ("data.images", "data.labels", "data.csv"):
        if value is not None and not isinstance(value, str):
            bad("must be a file path")
    elif path == "data.max_samples":
        if value is not None and (not _is_int(value) or value < 1):
            bad("must be a positive integer or null")
    elif path == "data.angles":
        if not isinstance(value, list) or not all(_is_num(a) for a in value):
            bad("must be a list of numbers")
    elif path in ("data.n_clients", "data.n_groups", "data.samples_per_client", "model.hidden",
                  "local.epochs", "local.batch_size"):
        if not _is_int(value) or value < 1:
            bad("must be a positive integer")
    elif path in ("data.n_classes", "data.n_features"):
        if not _is_int(value) or value < 2:
            bad("must be an integer >= 2")
    elif path in ("data.spread", "data.alpha", "local.lr", "comms.rho", "comms.T_dl", "comms.ul_multiplier"):
        if not _is_num(value) or not value > 0:
            bad("must be a positive number")
    elif path == "local.momentum":
        if not _is_num(value) or not 0 <= value < 1:
            bad("must lie in [0, 1)")
    elif path in ("comms.T_min", "comms.mu_inv"):
        if not _is_num(value) or value < 0:
            bad("must be a non-negative number")
    elif key == "dl_serialization":
        if not isinstance(value, bool):
            bad("must be true or false")


def parse_fraction(text):
    """``'n/3'`` -> ``Fraction(1, 3)``, ``'2n/3'`` -> ``Fraction(2, 3)``.

    Returns None unless the text has that form with a value in (0, 1].
    """
    head, sep, tail = text.replace(" ", "").partition("n/")
    if not sep:
        return None
    try:
        frac = Fraction(int(head) if head else 1, int(tail))
    except (ValueError, ZeroDivisionError):
        return None
    return frac if 0 < frac <= 1 else None


def _merge(defaults, given, prefix, problems):
    out = {}
    if not isinstance(given, dict):
        problems.append(f"{prefix.rstrip('.') or '<root>'}: must be a mapping")
        return copy.deepcopy(defaults)
    for key in given:
        if key not in defaults:
            problems.append(f"{prefix}{key}: unknown key")
    for key, default in defaults.items():
        path = prefix + key
        if isinstance(default, dict):
            out[key] = _merge(default, given.get(key, {}), path + ".", problems)
        else:
            value = copy.deepcopy(given.get(key, default))
            if isinstance(default, float) and _is_int(value):
                value = float(value)
            _check_leaf(path, value, problems)
            out[key] = value
    return out


def _cross_checks(cfg, problems):
    data = cfg["data"]
    if cfg["streams"] == "auto" and cfg["tradeoff_lambda"] is None:
        problems.append("streams: 'auto' requires tradeoff_lambda")
    if _is_int(cfg["streams"]) and _is_int(data["n_clients"]) and cfg["streams"] > data["n_clients"]:
        problems.append("streams: cannot exceed data.n_clients")
    if data["scenario"] in ("label+covariate-shift", "concept-shift"):
        if _is_int(data["n_groups"]) and _is_int(data["n_clients"]) and data["n_groups"] > data["n_clients"]:
            problems.append("data.n_groups: cannot exceed data.n_clients")
    if data["scenario"] == "label+covariate-shift" and isinstance(data["angles"], list):
        if len(data["angles"]) != data["n_groups"]:
            problems.append("data.angles: need one angle per group")
    if data["source"] == "idx" and (not data["images"] or not data["labels"]):
        problems.append("data: source 'idx' needs both 'images' and 'labels' paths")
    if data["source"] == "csv" and not data["csv"]:
        problems.append("data: source 'csv' needs a 'csv' path")


def resolve(raw):
    """Validate ``raw`` and fill defaults; raises ConfigError listing every problem."""
    problems = []
    cfg = _merge(DEFAULTS, raw if raw is not None else {}, "", problems)
    if not problems:
        _cross_checks(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def load(path):
    """Read and resolve a YAML/JSON config file (OSError propagates)."""
    with open(path) as fh:
        text = fh.read()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"cannot parse {os.fspath(path)}: {exc}"]) from None
    return resolve(raw)


def canonical_json(cfg):
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def result_fields(cfg):
    """The resolved config without execution-only keys such as ``threads``."""
    return {k: v for k, v in cfg.items() if k not in EXECUTION_KEYS}


def config_hash(cfg):
    """Git blob hash of the canonical JSON of a resolved config.

    Execution-only keys are left out, so the hash names the results, not the
    machine they were computed on.
    """
    body = canonical_json(result_fields(cfg)).encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def set_param(cfg, dotted, value):
    """Return a re-validated copy of ``cfg`` with one (dotted) key replaced."""
    raw = copy.deepcopy(cfg)
    node = raw
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node[p]
    node[leaf] = value
    return resolve(raw)


class ExperimentConfig:
    """A resolved, validated experiment configuration.

    Attribute access mirrors the top-level keys (``cfg.rounds``,
    ``cfg.data["n_clients"]``); :meth:`to_dict` returns the full resolved
    mapping, which round-trips through :meth:`from_dict` to the same hash.
    """

    def __init__(self, resolved):
        self._cfg = resolved

    @classmethod
    def from_dict(cls, raw=None, **overrides):
        cfg = resolve(raw or {})
        for dotted, value in overrides.items():
            cfg = set_param(cfg, dotted.replace("__", "."), value)
        return cls(cfg)

    @classmethod
    def load(cls, path):
        return cls(load(path))

    def to_dict(self):
        return copy.deepcopy(self._cfg)

    def echo(self):
        """Resolved mapping minus execution-only keys; embedded in run outputs."""
        return copy.deepcopy(result_fields(self._cfg))

    def replace(self, **overrides):
        """Copy with dotted keys replaced, e.g. ``replace(**{"local.lr": 0.05})``."""
        return ExperimentConfig.from_dict(self._cfg, **overrides)

    @property
    def hash(self):
        return config_hash(self._cfg)

    def __getattr__(self, name):
        try:
            return self.__dict__["_cfg"][name]
        except KeyError:
            raise AttributeError(name) from None

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self._cfg == other._cfg

    def __repr__(self):
        return f"ExperimentConfig(hash={self.hash[:12]})"
