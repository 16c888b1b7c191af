"""Local and global clustered-signal contrast losses and the combined objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .numerics import ModelParams, normalize_rows
from .signals import ClassSignalPool, GlobalSignalTable


@dataclass(frozen=True)
class Ablation:
    use_local: bool = True
    use_global: bool = True


@dataclass
class ContrastContext:
    local_pool: ClassSignalPool | None = None
    global_table: GlobalSignalTable | None = None
    temperature: float = 0.07

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")

    @property
    def empty(self) -> bool:
        return self.local_pool is None and self.global_table is None


@dataclass
class LossParts:
    ce: float = 0.0
    local: float = 0.0
    global_: float = 0.0
    skipped_local: int = 0
    skipped_global: int = 0

    @property
    def skipped(self) -> int:
        return self.skipped_local + self.skipped_global


@dataclass
class ContrastResult:
    losses: np.ndarray  # (n,)
    grads: np.ndarray  # (n, d)
    skipped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def _logsumexp(s: np.ndarray, mask: np.ndarray) -> np.ndarray:
    masked = np.where(mask, s, -np.inf)
    top = masked.max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):  # rows with an empty mask give -inf
        return (top + np.log(np.exp(masked - top).sum(axis=1, keepdims=True)))[:, 0]


def contrast_batch(
    embeddings: np.ndarray,
    labels: np.ndarray,
    keys: np.ndarray,
    key_labels: np.ndarray,
    temperature: float,
) -> ContrastResult:
    """Per-sample ``-log(sum_P exp(sim/t) / sum_all exp(sim/t))`` and its gradient.

    ``P`` is the set of keys sharing the query's label; the denominator runs
    over every key.  Queries without a positive key get loss 0, gradient 0
    and are flagged as skipped.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(e)
    if n == 0 or len(keys) == 0:
        return ContrastResult(np.zeros(n), np.zeros_like(e), np.ones(n, dtype=bool))

    u, norms = normalize_rows(e)
    zhat, _ = normalize_rows(np.asarray(keys, dtype=np.float64))
    cos = u @ zhat.T
    s = cos / temperature
    pos = key_labels[None, :] == labels[:, None]
    has_pos = pos.any(axis=1)
    everything = np.ones_like(pos)

    lse_all = _logsumexp(s, everything)
    lse_pos = _logsumexp(s, pos)
    losses = np.where(has_pos, lse_all - lse_pos, 0.0)
    # rounding can leave -1e-16 when the negative set is empty
    losses = np.maximum(losses, 0.0)

    p_all = np.exp(s - lse_all[:, None])
    p_pos = np.where(pos, np.exp(s - lse_pos[:, None]), 0.0)
    ds = (p_all - p_pos) / temperature  # d loss / d cos
    ds[~has_pos] = 0.0

    # d cos_k / d e = (zhat_k - cos_k * u) / |e|
    ok = (norms >= numerics.NORM_EPS) & has_pos
    grads = np.zeros_like(e)
    g = ds @ zhat - (ds * cos).sum(axis=1, keepdims=True) * u
    grads[ok] = g[ok] / norms[ok, None]
    return ContrastResult(losses, grads, ~has_pos)


def local_contrast_batch(embeddings, labels, ctx: ContrastContext) -> ContrastResult:
    if ctx.local_pool is None:
        n = len(embeddings)
        return ContrastResult(np.zeros(n), np.zeros_like(embeddings), np.ones(n, dtype=bool))
    keys, key_labels = ctx.local_pool.stacked()
    return contrast_batch(embeddings, labels, keys, key_labels, ctx.temperature)


def global_contrast_batch(embeddings, labels, ctx: ContrastContext) -> ContrastResult:
    if ctx.global_table is None:
        n = len(embeddings)
        return ContrastResult(np.zeros(n), np.zeros_like(embeddings), np.ones(n, dtype=bool))
    keys, key_labels = ctx.global_table.stacked()
    return contrast_batch(embeddings, labels, keys, key_labels, ctx.temperature)


def local_contrast_loss(embedding, label: int, ctx: ContrastContext) -> tuple[float, np.ndarray]:
    r = local_contrast_batch(np.atleast_2d(np.asarray(embedding, dtype=np.float64)), np.array([label]), ctx)
    return float(r.losses[0]), r.grads[0]


def global_contrast_loss(embedding, label: int, ctx: ContrastContext) -> tuple[float, np.ndarray]:
    r = global_contrast_batch(np.atleast_2d(np.asarray(embedding, dtype=np.float64)), np.array([label]), ctx)
    return float(r.losses[0]), r.grads[0]


def contrast_terms(labels, ctx: ContrastContext | None, ablation: Ablation,
                   local_weight: float = 1.0, global_weight: float = 1.0, parts: LossParts | None = None):
    """Extra-loss callables for :func:`numerics.loss_and_grads`.

    Each term is the batch mean of the per-sample contrast loss (skipped
    samples count as zero) times its weight.
    """
    terms = []
    if ctx is None or ctx.empty:
        return terms
    labels = np.asarray(labels)

    def make(fn, weight, attr):
        def term(features):
            r = fn(features, labels, ctx)
            n = len(features)
            value = weight * float(r.losses.mean())
            if parts is not None:
                setattr(parts, attr, value)
                setattr(parts, "skipped_" + attr.rstrip("_"), int(r.skipped.sum()))
            return value, (weight / n) * r.grads
        return term

    if ablation.use_local and ctx.local_pool is not None:
        terms.append(make(local_contrast_batch, local_weight, "local"))
    if ablation.use_global and ctx.global_table is not None:
        terms.append(make(global_contrast_batch, global_weight, "global_"))
    return terms


def total_loss(
    batch: np.ndarray,
    labels: np.ndarray,
    params: ModelParams,
    ctx: ContrastContext | None,
    ablation: Ablation = Ablation(),
    local_weight: float = 1.0,
    global_weight: float = 1.0,
) -> tuple[float, ModelParams, LossParts]:
    """Cross-entropy plus the enabled contrast terms; returns value, gradients and parts."""
    parts = LossParts()
    terms = contrast_terms(labels, ctx, ablation, local_weight, global_weight, parts)
    value, grads = numerics.loss_and_grads(params, batch, labels, terms)
    parts.ce = value - parts.local - parts.global_
    return value, grads, parts
