"""Datasets and the four client-heterogeneity scenarios.

Regimes:

* ``balanced-intra``   same domain, equal client sizes, skewed labels
* ``imbalanced-intra`` same domain, Dirichlet label skew and sizes
* ``balanced-inter``   one domain transform per client, equal sizes, uniform labels
* ``imbalanced-inter`` domain transforms plus Dirichlet labels and sizes
"""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

REGIMES = ("balanced-intra", "imbalanced-intra", "balanced-inter", "imbalanced-inter")
TRANSFORMS = ("identity", "pixel-invert", "rotation", "additive-noise", "intensity-scale")
DEFAULT_DOMAINS = ("identity", "pixel-invert", "rotation", "intensity-scale", "additive-noise")

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# fixed seeds so a given transform id means the same map in every run
ROTATION_SEED = 20240917
CENTER_SEED = 7


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.x[idx], self.y[idx], self.n_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)


@dataclass
class SplitDataset:
    train: Dataset
    test: Dataset


@dataclass
class ClientDataset:
    client_id: int
    train: Dataset
    test: Dataset
    domain: str = "identity"
    train_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    test_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))

    @property
    def class_counts(self) -> np.ndarray:
        return self.train.class_counts()


@dataclass
class ScenarioSpec:
    regime: str = "imbalanced-intra"
    n_clients: int = 5
    alpha: float = 0.5
    domains: tuple[str, ...] = ()
    dataset: str = "synthetic"
    data_dir: str = "data"
    seed: int = 1
    max_train_per_client: int = 0  # 0 = no cap
    n_classes: int = 10
    synth_dim: int = 20
    synth_per_class: int = 200
    synth_noise: float = 0.5

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        self.domains = tuple(self.domains)
        if self.regime.endswith("inter"):
            domains = self.client_domains()
            if self.n_clients >= 2 and len(set(domains)) < 2:
                raise ValueError("inter-domain regimes need at least 2 distinct domains")

    def client_domains(self) -> list[str]:
        if not self.regime.endswith("inter"):
            return ["identity"] * self.n_clients
        pool = self.domains or DEFAULT_DOMAINS
        return [pool[i % len(pool)] for i in range(self.n_clients)]


# --------------------------------------------------------------------- IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    if len(raw) < 8:
        raise IdxFormatError(f"{what} file shorter than its header", len(raw))
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise IdxFormatError(f"{what} file has magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{what} header truncated", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise IdxFormatError(f"{what} data truncated: need {need} bytes", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=need - header, offset=header).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, "image")
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, "label")
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(labels)} labels for {len(images)} images", 4)
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.intp), n_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())


def _idx_pair(directory: Path, prefix: str) -> tuple[Path, Path]:
    def find(stem):
        for cand in (directory / stem, directory / (stem + ".gz")):
            if cand.exists():
                return cand
        raise FileNotFoundError(f"no {stem}[.gz] in {directory}")
    return find(f"{prefix}-images-idx3-ubyte"), find(f"{prefix}-labels-idx1-ubyte")


def load_idx_split(directory) -> SplitDataset:
    directory = Path(directory)
    return SplitDataset(
        load_idx(*_idx_pair(directory, "train")), load_idx(*_idx_pair(directory, "t10k"))
    )


# --------------------------------------------------------------- synthetic


def synth_gaussians(
    n_classes: int = 10,
    dim: int = 20,
    n_per_class: int = 200,
    seed: int = 0,
    noise: float = 0.5,
) -> SplitDataset:
    """Isotropic Gaussian blobs around fixed unit-norm, mutually orthogonal centres.

    Centres depend only on ``(n_classes, dim)``.  Each class is split
    80/20: ``ceil(0.8 * n)`` samples go to train, the rest to test, so a
    single sample per class ends up in train.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if dim < n_classes:
        raise ValueError("dim must be >= n_classes for orthogonal centres")
    q, _ = np.linalg.qr(np.random.default_rng(CENTER_SEED).normal(size=(dim, n_classes)))
    centers = q.T  # (C, dim), orthonormal rows

    rng = np.random.default_rng(seed)
    n_train = int(np.ceil(0.8 * n_per_class))
    parts = {"train": ([], []), "test": ([], [])}
    for c in range(n_classes):
        pts = centers[c] + noise / np.sqrt(dim) * rng.normal(size=(n_per_class, dim))
        parts["train"][0].append(pts[:n_train])
        parts["test"][0].append(pts[n_train:])
        parts["train"][1].append(np.full(n_train, c))
        parts["test"][1].append(np.full(n_per_class - n_train, c))

    def build(key):
        xs, ys = parts[key]
        x, y = np.concatenate(xs), np.concatenate(ys).astype(np.intp)
        order = rng.permutation(len(y))
        return Dataset(x[order], y[order], n_classes)

    return SplitDataset(build("train"), build("test"))


# -------------------------------------------------------------- transforms


def _parse_transform(spec: str) -> tuple[str, float | None]:
    name, _, arg = spec.partition(":")
    if name not in TRANSFORMS:
        raise ValueError(f"unknown domain transform {spec!r}; expected one of {TRANSFORMS}")
    return name, float(arg) if arg else None


def domain_transform(spec: str, data: Dataset, seed: int = 0) -> Dataset:
    """Feature-only transform naming a simulated domain.

    ``spec`` is a transform id with an optional numeric argument:
    ``additive-noise:0.3`` (noise std, default 0.2), ``intensity-scale:0.5``
    (factor, default 0.5).  ``rotation`` is a fixed random orthogonal map of
    the feature space; ``pixel-invert`` maps x to 1 - x.
    """
    name, arg = _parse_transform(spec)
    x = data.x
    if name == "identity":
        out = x.copy()
    elif name == "pixel-invert":
        out = 1.0 - x
    elif name == "rotation":
        q, _ = np.linalg.qr(np.random.default_rng(ROTATION_SEED).normal(size=(x.shape[1], x.shape[1])))
        out = x @ q
    elif name == "additive-noise":
        sigma = 0.2 if arg is None else arg
        out = x + np.random.default_rng(seed).normal(0.0, sigma, size=x.shape)
    else:
        out = x * (0.5 if arg is None else arg)
    return Dataset(out, data.y.copy(), data.n_classes)


# -------------------------------------------------------------- partitions


def dirichlet_partition(labels, n_clients: int, alpha: float, seed: int) -> list[np.ndarray]:
    """Split indices per class by Dirichlet(alpha) client shares.

    Every index lands in exactly one client.  If a client ends up empty it
    takes one sample from the currently largest client.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        shares = rng.dirichlet(np.full(n_clients, alpha))
        cuts = (np.cumsum(shares)[:-1] * len(idx)).astype(int)
        for client, part in enumerate(np.split(idx, cuts)):
            buckets[client].append(part)
    parts = [np.sort(np.concatenate(b)) if b else np.zeros(0, dtype=np.intp) for b in buckets]
    for i in range(n_clients):
        if len(parts[i]) == 0:
            donor = int(np.argmax([len(p) for p in parts]))
            if len(parts[donor]) < 2:
                break
            parts[i] = parts[donor][-1:]
            parts[donor] = parts[donor][:-1]
            log.info("client %d received no samples; moved index %d from client %d",
                     i, parts[i][0], donor)
    return [p.astype(np.intp) for p in parts]


def _split_by_weights(idx: np.ndarray, weights: np.ndarray) -> list[np.ndarray]:
    """Split ``idx`` into consecutive chunks with sizes proportional to ``weights``."""
    cuts = (np.cumsum(weights)[:-1] / weights.sum() * len(idx)).round().astype(int)
    return np.split(idx, cuts)


def _equalize(parts: list[np.ndarray], rng) -> tuple[list[np.ndarray], np.ndarray]:
    size = min(len(p) for p in parts)
    kept, dropped = [], []
    for p in parts:
        keep = np.sort(rng.choice(p, size=size, replace=False)) if len(p) > size else p
        kept.append(np.sort(keep))
        dropped.append(np.setdiff1d(p, keep))
    dropped = np.concatenate(dropped) if dropped else np.zeros(0, dtype=np.intp)
    if len(dropped):
        log.info("equal-size split: dropped %d remainder samples", len(dropped))
    return kept, dropped.astype(np.intp)


def preferred_classes(client: int, n_classes: int) -> tuple[int, int]:
    return (2 * client) % n_classes, (2 * client + 1) % n_classes


def partition_indices(spec: ScenarioSpec, labels: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-client train indices for ``spec`` plus the indices left unassigned."""
    labels = np.asarray(labels)
    n, C = spec.n_clients, spec.n_classes
    rng = np.random.default_rng([spec.seed, 1])
    dropped = np.zeros(0, dtype=np.intp)

    if spec.regime in ("imbalanced-intra", "imbalanced-inter"):
        parts = dirichlet_partition(labels, n, spec.alpha, seed=spec.seed)
    else:
        buckets: list[list[np.ndarray]] = [[] for _ in range(n)]
        remainder = []
        for c in range(C):
            idx = rng.permutation(np.flatnonzero(labels == c))
            if spec.regime == "balanced-intra":
                # clients over-sample their two preferred classes at 3x rate
                w = np.array([3.0 if c in preferred_classes(i, C) else 1.0 for i in range(n)])
            else:
                # uniform labels: identical per-class counts on every client
                per = len(idx) // n
                remainder.append(idx[per * n:])
                idx, w = idx[:per * n], np.ones(n)
            for i, chunk in enumerate(_split_by_weights(idx, w)):
                buckets[i].append(chunk)
        parts = [np.concatenate(b) for b in buckets]
        parts, dropped = _equalize(parts, rng)
        if remainder:
            if sum(map(len, remainder)):
                log.info("balanced-inter split: dropped %d per-class remainder samples",
                         sum(map(len, remainder)))
            dropped = np.sort(np.concatenate([dropped, *remainder])).astype(np.intp)

    if spec.max_train_per_client > 0:
        capped = []
        extra = [dropped]
        for p in parts:
            if len(p) > spec.max_train_per_client:
                keep = np.sort(rng.choice(p, size=spec.max_train_per_client, replace=False))
                extra.append(np.setdiff1d(p, keep))
                p = keep
            capped.append(p)
        parts, dropped = capped, np.sort(np.concatenate(extra)).astype(np.intp)
        if spec.regime.startswith("balanced"):
            parts, more = _equalize(parts, rng)
            dropped = np.sort(np.concatenate([dropped, more]))
    return [np.sort(p) for p in parts], dropped


def _test_partition(parts_train: list[np.ndarray], train_labels, test_labels, n_classes, rng):
    """Split the test pool so each client's test labels follow its train label shares."""
    counts = np.stack([np.bincount(train_labels[p], minlength=n_classes) for p in parts_train])
    out: list[list[np.ndarray]] = [[] for _ in parts_train]
    for c in range(n_classes):
        idx = rng.permutation(np.flatnonzero(test_labels == c))
        w = counts[:, c].astype(float)
        if w.sum() == 0:
            continue
        for i, chunk in enumerate(_split_by_weights(idx, w)):
            out[i].append(chunk)
    return [np.sort(np.concatenate(o)) if o else np.zeros(0, dtype=np.intp) for o in out]


def load_base(spec: ScenarioSpec) -> SplitDataset:
    if spec.dataset == "synthetic":
        return synth_gaussians(spec.n_classes, spec.synth_dim, spec.synth_per_class,
                               seed=spec.seed, noise=spec.synth_noise)
    if spec.dataset in ("mnist", "fashion-mnist"):
        return load_idx_split(Path(spec.data_dir) / spec.dataset)
    if spec.dataset.startswith("idx:"):
        return load_idx_split(spec.dataset[4:])
    raise ValueError(f"unknown dataset {spec.dataset!r}")


def build_scenario(spec: ScenarioSpec, base: SplitDataset | None = None) -> list[ClientDataset]:
    base = base if base is not None else load_base(spec)
    C = base.train.n_classes
    if C != spec.n_classes:
        raise ValueError(f"dataset has {C} classes, spec says {spec.n_classes}")
    parts, _ = partition_indices(spec, base.train.y)
    rng = np.random.default_rng([spec.seed, 2])
    test_parts = _test_partition(parts, base.train.y, base.test.y, C, rng)
    clients = []
    for i, (tr, te) in enumerate(zip(parts, test_parts)):
        domain = spec.client_domains()[i]
        train = domain_transform(domain, base.train.subset(tr), seed=spec.seed * 1000 + i)
        test = domain_transform(domain, base.test.subset(te), seed=spec.seed * 1000 + 500 + i)
        clients.append(ClientDataset(i, train, test, domain, tr, te))
    return clients


def label_distribution(client: ClientDataset) -> np.ndarray:
    counts = client.class_counts.astype(float)
    return counts / counts.sum() if counts.sum() else counts


def mean_tv_distance(clients: Sequence[ClientDataset]) -> float:
    """Mean total-variation distance of client label distributions to their average."""
    dists = np.stack([label_distribution(c) for c in clients])
    mean = dists.mean(axis=0)
    return float(0.5 * np.abs(dists - mean).sum(axis=1).mean())
