"""Synthetic federations and file loaders.

Three heterogeneity scenarios are supported: label shift (Dirichlet
partition), label + covariate shift (group-wise rotation) and concept shift
(group-wise label permutation). Groups are always contiguous runs of client
indices.
"""

import csv
import gzip
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, ValidationError
from .numerics import RngStream

SCENARIOS = ("label-shift", "label+covariate-shift", "concept-shift", "custom")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature matrix ``(n, p)`` with integer labels in ``[0, n_classes)``.

    ``grid_shape`` is set for image data so that rotations can act on the
    pixel grid instead of the flat feature vector.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    grid_shape: tuple = None

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels)
        if X.ndim != 2:
            raise ValidationError("features must be a 2-D matrix")
        if y.ndim != 1 or len(y) != X.shape[0]:
            raise ValidationError("need exactly one label per feature row")
        if len(y) and not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValidationError("labels must be integers")
        y = y.astype(np.int64)
        if self.n_classes < 1:
            raise ValidationError("n_classes must be positive")
        if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValidationError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(X)):
            raise ValidationError("features must be finite")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return len(self.labels)

    @property
    def n_features(self):
        return self.features.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, features=self.features[idx], labels=self.labels[idx])

    def label_histogram(self):
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True, eq=False)
class FederationData:
    clients: tuple
    group_of: tuple = None
    scenario: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        clients = tuple(self.clients)
        if len(clients) < 1:
            raise ValidationError("a federation needs at least one client")
        for i, c in enumerate(clients):
            if len(c) < 1:
                raise ValidationError(f"client {i} holds no samples")
        group_of = (0,) * len(clients) if self.group_of is None else tuple(int(g) for g in self.group_of)
        if len(group_of) != len(clients):
            raise ValidationError("group_of must have one entry per client")
        if self.scenario not in SCENARIOS:
            raise ValidationError(f"unknown scenario {self.scenario!r}")
        object.__setattr__(self, "clients", clients)
        object.__setattr__(self, "group_of", group_of)

    @property
    def m(self):
        return len(self.clients)

    @property
    def n_classes(self):
        return self.clients[0].n_classes

    def sizes(self):
        return [len(c) for c in self.clients]


def blob_centers(n_classes, n_features):
    """Class centers on the unit circle of the first two coordinates."""
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    centers = np.zeros((n_classes, n_features))
    centers[:, 0] = np.cos(angles)
    centers[:, 1] = np.sin(angles)
    return centers


def make_gaussian_blobs(n_classes, n_features, n_samples, spread, rng):
    """Balanced isotropic Gaussian blobs around fixed, distinct centers."""
    if n_classes < 2 or n_features < 2 or n_samples < n_classes or not spread > 0:
        raise ValidationError("need n_classes >= 2, n_features >= 2, n_samples >= n_classes, spread > 0")
    gen = rng.generator
    labels = np.arange(n_samples) % n_classes
    gen.shuffle(labels)
    centers = blob_centers(n_classes, n_features)
    X = centers[labels] + spread * gen.standard_normal((n_samples, n_features))
    return LabeledDataset(X, labels, n_classes)


def _largest_remainder(total, shares):
    """Integer counts summing to ``total`` proportional to ``shares``."""
    shares = np.asarray(shares, dtype=np.float64)
    ideal = total * shares / shares.sum()
    counts = np.floor(ideal).astype(np.int64)
    short = total - counts.sum()
    if short:
        # ties resolved toward lower index by the stable sort
        order = np.argsort(-(ideal - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_label_partition(data, m, alpha, rng, max_attempts=10):
    """Split ``data`` across ``m`` clients with Dirichlet(alpha) label mixtures.

    Each client draws a label distribution; every class is then divided among
    clients in proportion to the clients' weights for that class, rounded
    with the largest-remainder rule. The partition is exhaustive and
    disjoint, and each client keeps its samples in source order.
    """
    if not alpha > 0:
        raise ValidationError("alpha must be positive")
    if m < 1 or len(data) < m:
        raise ValidationError("need 1 <= m <= number of samples")
    C = data.n_classes
    for attempt in range(max_attempts):
        gen = rng.child("attempt", attempt).generator
        props = gen.dirichlet(np.full(C, float(alpha)), size=m)
        owner = np.empty(len(data), dtype=np.int64)
        for c in range(C):
            idx = np.flatnonzero(data.labels == c)
            if idx.size == 0:
                continue
            idx = idx[gen.permutation(idx.size)]
            col = props[:, c]
            if not col.sum() > 0:
                col = np.ones(m)
            counts = _largest_remainder(idx.size, col)
            owner[idx] = np.repeat(np.arange(m), counts)
        parts = [np.flatnonzero(owner == i) for i in range(m)]
        if all(p.size for p in parts):
            clients = [data.subset(p) for p in parts]
            return FederationData(clients, (0,) * m, "label-shift", {"alpha": float(alpha)})
    raise ValidationError(f"a client stayed empty after {max_attempts} partition attempts")


def iid_partition(data, m, rng):
    """Uniformly random split into ``m`` near-equal clients."""
    if m < 1 or len(data) < m:
        raise ValidationError("need 1 <= m <= number of samples")
    perm = rng.generator.permutation(len(data))
    parts = np.array_split(perm, m)
    return FederationData([data.subset(np.sort(p)) for p in parts], (0,) * m, "custom")


def contiguous_groups(m, n_groups):
    if not 1 <= n_groups <= m:
        raise ValidationError("need 1 <= n_groups <= number of clients")
    return tuple(i * n_groups // m for i in range(m))


def _planar_rotation(degrees):
    quarter, rem = divmod(float(degrees), 90.0)
    if rem == 0.0:
        # exact matrices for multiples of 90 degrees
        c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][int(quarter) % 4]
    else:
        t = np.deg2rad(degrees)
        c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


def rotate_features(data, degrees):
    """Rotate one dataset: planar points for p=2, pixel grids for image data."""
    if float(degrees) % 360.0 == 0.0:
        return data
    if data.grid_shape is not None:
        if float(degrees) % 90.0 != 0.0:
            raise ValidationError("grid data can only be rotated by multiples of 90 degrees")
        h, w = data.grid_shape
        if h != w:
            raise ValidationError("grid rotation needs square images")
        k = int(float(degrees) // 90.0) % 4
        imgs = data.features.reshape(len(data), h, w)
        rotated = np.rot90(imgs, k=k, axes=(1, 2)).reshape(len(data), h * w)
        return replace(data, features=np.ascontiguousarray(rotated))
    if data.n_features != 2:
        raise ValidationError("rotation needs planar (p=2) points or image grids")
    R = _planar_rotation(degrees)
    return replace(data, features=data.features @ R.T)


def rotate_covariates(fed, n_groups, angles):
    """Rotate the features of each contiguous client group by its own angle (degrees)."""
    angles = list(angles)
    if len(angles) != n_groups:
        raise ValidationError("need one angle per group")
    group_of = contiguous_groups(fed.m, n_groups)
    clients = [rotate_features(c, angles[g]) for c, g in zip(fed.clients, group_of)]
    meta = dict(fed.meta, angles=[float(a) for a in angles])
    return FederationData(clients, group_of, "label+covariate-shift", meta)


def permute_labels(fed, n_groups, rng, mode="random"):
    """Apply one label permutation per group; group 0 keeps the identity.

    ``mode="random"`` draws each permutation independently (two groups may
    coincide). ``mode="cyclic"`` maps ``y -> (y + g) mod C`` in group ``g``,
    so any two groups disagree on every label while ``n_groups <= C``.
    """
    C = fed.n_classes
    if n_groups < 1:
        raise ValidationError("n_groups must be at least 1")
    if C < 2:
        raise ValidationError("label permutation needs at least two classes")
    if mode not in ("random", "cyclic"):
        raise ValidationError(f"unknown permutation mode {mode!r}")
    group_of = contiguous_groups(fed.m, n_groups)
    perms = [np.arange(C)]
    for g in range(1, n_groups):
        if mode == "cyclic":
            perms.append((np.arange(C) + g) % C)
        else:
            perms.append(rng.child("perm", g).generator.permutation(C))
    clients = [replace(c, labels=perms[g][c.labels]) for c, g in zip(fed.clients, group_of)]
    meta = dict(fed.meta, permutations=[p.tolist() for p in perms])
    return FederationData(clients, group_of, "concept-shift", meta)


def train_holdout_split(data, holdout, rng):
    """Seeded split into ``(train, holdout)``; holdout gets ``round(holdout * n)`` samples.

    Both parts keep at least one sample.
    """
    train, val = holdout_indices(len(data), holdout, rng)
    return data.subset(train), data.subset(val)


def _open_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _read_header(raw, path, magic, ndim):
    need = 4 + 4 * ndim
    if len(raw) < 4:
        raise FormatError("file too short for an IDX magic number", path, 0)
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"bad IDX magic 0x{found:08x}, expected 0x{magic:08x}", path, 0)
    if len(raw) < need:
        raise FormatError("truncated IDX header", path, len(raw))
    return struct.unpack(">" + "I" * ndim, raw[4:need]), need


def load_idx(images_path, labels_path):
    """Read an (E)MNIST-style IDX image/label pair; pixels are scaled to [0, 1]."""
    img_raw = _open_bytes(images_path)
    lab_raw = _open_bytes(labels_path)
    (n_img, rows, cols), img_off = _read_header(img_raw, images_path, 0x00000803, 3)
    (n_lab,), lab_off = _read_header(lab_raw, labels_path, 0x00000801, 1)
    if n_img != n_lab:
        raise FormatError(f"{n_img} images but {n_lab} labels", labels_path, 4)
    pixels = n_img * rows * cols
    if len(img_raw) - img_off < pixels:
        raise FormatError("image data truncated", images_path, len(img_raw))
    if len(lab_raw) - lab_off < n_lab:
        raise FormatError("label data truncated", labels_path, len(lab_raw))
    if n_img == 0:
        raise FormatError("IDX files contain no samples", images_path, 4)
    X = np.frombuffer(img_raw, dtype=np.uint8, count=pixels, offset=img_off)
    X = X.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    y = np.frombuffer(lab_raw, dtype=np.uint8, count=n_lab, offset=lab_off).astype(np.int64)
    return LabeledDataset(X, y, int(y.max()) + 1, grid_shape=(rows, cols))


def load_csv(path, label_column="label"):
    """Read a CSV with a header row; every column except ``label_column`` is a feature."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty CSV file", path, 0) from None
        if label_column not in header:
            raise FormatError(f"no {label_column!r} column in header", path, 0)
        li = header.index(label_column)
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"line {lineno} has {len(row)} fields, expected {len(header)}", path)
            try:
                labels.append(int(row[li]))
                feats.append([float(v) for k, v in enumerate(row) if k != li])
            except ValueError as exc:
                raise FormatError(f"line {lineno}: {exc}", path) from None
    if not labels:
        raise FormatError("CSV file has no data rows", path)
    return LabeledDataset(np.array(feats), np.array(labels), max(labels) + 1)


def holdout_indices(n, holdout, rng):
    """Disjoint ``(train_idx, holdout_idx)``, both sorted."""
    if not 0 < holdout < 1:
        raise ValidationError("holdout fraction must lie in (0, 1)")
    if n < 2:
        raise ValidationError("cannot hold out samples from a single-sample dataset")
    n_val = min(max(int(round(holdout * n)), 1), n - 1)
    perm = rng.generator.permutation(n)
    train, val = np.sort(perm[n_val:]), np.sort(perm[:n_val])
    assert not np.intersect1d(train, val).size
    return train, val


def federation_from_config(data_cfg, seed):
    """Build a :class:`FederationData` from the ``data`` section of a config."""
    d = data_cfg
    m = d["n_clients"]
    root = RngStream(seed, "data")
    if d["source"] == "blobs":
        n = m * d["samples_per_client"]
        if d["scenario"] == "identical":
            n = d["samples_per_client"]
        source = make_gaussian_blobs(d["n_classes"], d["n_features"], n, d["spread"], root.child("blobs"))
    elif d["source"] == "idx":
        source = load_idx(d["images"], d["labels"])
    else:
        source = load_csv(d["csv"])
    if d.get("max_samples") and len(source) > d["max_samples"]:
        keep = np.sort(root.child("subsample").generator.permutation(len(source))[:d["max_samples"]])
        source = source.subset(keep)
    scenario = d["scenario"]
    if scenario == "identical":
        return FederationData([source] * m, (0,) * m, "custom")
    if scenario == "iid":
        return iid_partition(source, m, root.child("partition"))
    if scenario == "label-shift":
        return dirichlet_label_partition(source, m, d["alpha"], root.child("partition"))
    if scenario == "label+covariate-shift":
        fed = dirichlet_label_partition(source, m, d["alpha"], root.child("partition"))
        return rotate_covariates(fed, d["n_groups"], d["angles"])
    if scenario == "concept-shift":
        fed = iid_partition(source, m, root.child("partition"))
        return permute_labels(fed, d["n_groups"], root.child("permute"), d.get("permutation", "random"))
    raise ValidationError(f"unknown scenario {scenario!r}")
