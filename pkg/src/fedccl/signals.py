"""Per-class local signals, server-side pooling and global signals."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .finch import finch_cluster

CLUSTER_LEVELS = ("final", "last-nontrivial")


@dataclass
class LocalSignalSet:
    client_id: int
    signals: dict[int, np.ndarray]  # class -> (k, d); empty classes have k = 0

    def count(self, cls: int) -> int:
        return len(self.signals.get(cls, ()))


@dataclass
class ClassSignalPool:
    vectors: dict[int, np.ndarray] = field(default_factory=dict)  # class -> (m, d)
    clients: dict[int, np.ndarray] = field(default_factory=dict)  # class -> (m,)

    def classes(self) -> list[int]:
        return sorted(c for c, v in self.vectors.items() if len(v))

    def counts(self) -> dict[int, int]:
        return {c: len(v) for c, v in self.vectors.items()}

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All pooled vectors and their class labels, classes in ascending order."""
        classes = self.classes()
        if not classes:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.intp)
        z = np.concatenate([self.vectors[c] for c in classes])
        labels = np.concatenate([np.full(len(self.vectors[c]), c) for c in classes])
        return z, labels


@dataclass
class GlobalSignalTable:
    signals: dict[int, np.ndarray] = field(default_factory=dict)  # class -> (d,)
    clusters: dict[int, np.ndarray] = field(default_factory=dict)  # class -> (q, d)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        classes = sorted(self.signals)
        if not classes:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.intp)
        return np.stack([self.signals[c] for c in classes]), np.asarray(classes)


def group_by_class(embeddings: np.ndarray, labels: np.ndarray, n_classes: int) -> dict[int, np.ndarray]:
    return {c: embeddings[labels == c] for c in range(n_classes)}


def _clustered_means(vectors: np.ndarray, level: str) -> np.ndarray:
    if level not in CLUSTER_LEVELS:
        raise ValueError(f"unknown cluster level {level!r}; expected one of {CLUSTER_LEVELS}")
    if len(vectors) == 1:
        return vectors.copy()
    result = finch_cluster(vectors)
    part = result.final if level == "final" else result.last_nontrivial
    return np.stack([vectors[part.assignment == k].mean(axis=0) for k in range(part.k)])


def local_signals(
    embeddings_by_class: Mapping[int, np.ndarray], client_id: int = 0, level: str = "final"
) -> LocalSignalSet:
    """Cluster each class's embeddings and keep one mean per cluster."""
    out = {}
    for cls, emb in embeddings_by_class.items():
        emb = np.asarray(emb, dtype=np.float64)
        if len(emb) == 0:
            out[cls] = emb.reshape(0, emb.shape[1] if emb.ndim == 2 else 0)
        else:
            out[cls] = _clustered_means(emb, level)
    return LocalSignalSet(client_id, out)


def avg_local_signal(embeddings_by_class: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
    return {c: np.asarray(e).mean(axis=0) for c, e in embeddings_by_class.items() if len(e)}


def avg_local_signal_set(embeddings_by_class: Mapping[int, np.ndarray], client_id: int = 0) -> LocalSignalSet:
    """Plain class means wrapped as a signal set, for the averaged-signal ablation."""
    means = avg_local_signal(embeddings_by_class)
    dim = next((np.asarray(e).shape[-1] for e in embeddings_by_class.values() if np.ndim(e) == 2), 0)
    return LocalSignalSet(
        client_id,
        {c: means[c][None, :] if c in means else np.zeros((0, dim)) for c in embeddings_by_class},
    )


def pool_signals(sets: Iterable[LocalSignalSet]) -> ClassSignalPool:
    sets = list(sets)
    if not sets:
        raise ValueError("need at least one client's signals to pool")
    vecs: dict[int, list[np.ndarray]] = {}
    owners: dict[int, list[np.ndarray]] = {}
    for s in sets:
        for cls in sorted(s.signals):
            v = s.signals[cls]
            if len(v):
                vecs.setdefault(cls, []).append(v)
                owners.setdefault(cls, []).append(np.full(len(v), s.client_id))
    return ClassSignalPool(
        {c: np.concatenate(v) for c, v in sorted(vecs.items())},
        {c: np.concatenate(o) for c, o in sorted(owners.items())},
    )


def global_signals(pool: ClassSignalPool, level: str = "final") -> GlobalSignalTable:
    """Re-cluster each class's pooled signals, then average the cluster means."""
    table = GlobalSignalTable()
    for cls in pool.classes():
        clusters = _clustered_means(pool.vectors[cls], level)
        table.clusters[cls] = clusters
        table.signals[cls] = clusters.mean(axis=0)
    if not table.signals:
        raise ValueError("signal pool is empty for every class")
    return table


def avg_global_signal(pool: ClassSignalPool) -> GlobalSignalTable:
    table = GlobalSignalTable()
    for cls in pool.classes():
        table.signals[cls] = pool.vectors[cls].mean(axis=0)
        table.clusters[cls] = table.signals[cls][None, :]
    return table


def signal_records(round_: int, pool: ClassSignalPool | None, table: GlobalSignalTable | None, seed=None):
    """JSON-lines friendly dicts ``{round, client, class, vector}``.

    Global signals carry ``client: null``.
    """
    if pool is not None:
        for cls in pool.classes():
            for client, vec in zip(pool.clients[cls], pool.vectors[cls]):
                yield {"seed": seed, "round": round_, "scope": "local", "client": int(client),
                       "class": int(cls), "vector": vec.tolist()}
    if table is not None:
        for cls in sorted(table.signals):
            yield {"seed": seed, "round": round_, "scope": "global", "client": None,
                   "class": int(cls), "vector": table.signals[cls].tolist()}


def dump_signals(fh, round_, pool, table, seed=None) -> None:
    for rec in signal_records(round_, pool, table, seed):
        fh.write(json.dumps(rec) + "\n")
