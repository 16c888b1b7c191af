"""Round-based simulation: client updates, signal pooling, parameter averaging."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics
from .adversarial import AttackConfig, adversarial_total_loss, evaluate_under_attack
from .contrast import Ablation, ContrastContext, LossParts, total_loss
from .datagen import ClientDataset
from .numerics import ModelParams, TrainConfig
from .signals import (
    ClassSignalPool,
    GlobalSignalTable,
    LocalSignalSet,
    avg_global_signal,
    avg_local_signal_set,
    global_signals,
    group_by_class,
    local_signals,
    pool_signals,
)

log = logging.getLogger(__name__)

# rng stream tags: every draw is keyed by (seed, tag, ...)
INIT_STREAM, TRAIN_STREAM, EVAL_STREAM = 0, 1, 2


@dataclass
class FedConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: Ablation = field(default_factory=Ablation)
    rounds: int = 50
    hidden: tuple[int, ...] = (128, 32)
    local_signals: str = "cluster"  # or "avg"
    global_signals: str = "cluster"  # or "avg"
    cluster_level: str = "final"
    local_weight: float = 1.0
    global_weight: float = 1.0
    attack: AttackConfig | None = None  # adversarial training when set
    attack_objective: str = "ce"
    eval_attacks: dict[str, AttackConfig] = field(default_factory=dict)
    final_window: int = 5
    deterministic: bool = True
    workers: int = 0  # 0 = one thread per client

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        for name in ("local_signals", "global_signals"):
            if getattr(self, name) not in ("cluster", "avg"):
                raise ValueError(f"{name} must be 'cluster' or 'avg'")


@dataclass
class ClientMetrics:
    client: int
    n_train: int
    acc: float
    global_acc: float
    loss_ce: float
    loss_local: float
    loss_global: float
    skipped_samples: int
    attack_acc: dict[str, float] = field(default_factory=dict)


@dataclass
class RoundMetrics:
    round: int
    clients: list[ClientMetrics]
    signal_counts: dict[int, int]
    wall_time: float

    @property
    def acc(self) -> float:
        return float(np.mean([c.acc for c in self.clients]))

    @property
    def global_acc(self) -> float:
        return float(np.mean([c.global_acc for c in self.clients]))

    def attack_acc(self, name: str) -> float:
        vals = [c.attack_acc[name] for c in self.clients if name in c.attack_acc]
        return float(np.mean(vals)) if vals else float("nan")


@dataclass
class ClientUpdate:
    client: int
    params: ModelParams
    signals: LocalSignalSet
    parts: LossParts
    n_train: int


@dataclass
class TrainingResult:
    metrics: list[RoundMetrics]
    params: ModelParams
    local_params: list[ModelParams] = field(default_factory=list)
    history: list[tuple[ClassSignalPool, GlobalSignalTable]] = field(default_factory=list)


def model_layers(input_dim: int, hidden: Sequence[int], n_classes: int) -> list[int]:
    return [input_dim, *hidden, n_classes]


def initial_params(input_dim: int, n_classes: int, cfg: FedConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng([seed, INIT_STREAM])
    return numerics.init_params(model_layers(input_dim, cfg.hidden, n_classes), rng)


def client_rng(seed: int, round_: int, client: int) -> np.random.Generator:
    return np.random.default_rng([seed, TRAIN_STREAM, round_, client])


def client_signals(params: ModelParams, client: ClientDataset, cfg: FedConfig) -> LocalSignalSet:
    emb = numerics.embed(params, client.train.x)
    by_class = group_by_class(emb, client.train.y, client.train.n_classes)
    if cfg.local_signals == "avg":
        return avg_local_signal_set(by_class, client.client_id)
    return local_signals(by_class, client.client_id, cfg.cluster_level)


def client_local_update(
    client: ClientDataset,
    global_params: ModelParams,
    ctx: ContrastContext | None,
    cfg: FedConfig,
    round_: int = 0,
    seed: int = 0,
) -> ClientUpdate:
    """E epochs of mini-batch SGD from the global model, then fresh local signals."""
    rng = client_rng(seed, round_, client.client_id)
    params = global_params.copy()
    x, y = client.train.x, client.train.y
    n = len(y)
    bs = cfg.train.batch_size
    totals = LossParts()
    steps = 0
    for _ in range(cfg.train.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if cfg.attack is not None:
                _, grads, parts = adversarial_total_loss(
                    params, x[idx], y[idx], ctx, cfg.attack, rng, cfg.ablation,
                    cfg.local_weight, cfg.global_weight, cfg.attack_objective,
                )
            else:
                _, grads, parts = total_loss(
                    x[idx], y[idx], params, ctx, cfg.ablation, cfg.local_weight, cfg.global_weight
                )
            params = numerics.sgd_step(params, grads, cfg.train.learning_rate)
            totals.ce += parts.ce
            totals.local += parts.local
            totals.global_ += parts.global_
            totals.skipped_local += parts.skipped_local
            totals.skipped_global += parts.skipped_global
            steps += 1
    if steps:
        totals.ce /= steps
        totals.local /= steps
        totals.global_ /= steps
    return ClientUpdate(client.client_id, params, client_signals(params, client, cfg), totals, n)


def server_aggregate_params(contributions: Sequence[tuple[ModelParams, int]]) -> ModelParams:
    """Dataset-size weighted average of client parameters."""
    if not contributions:
        raise ValueError("nothing to aggregate")
    sizes = np.array([s for _, s in contributions], dtype=np.float64)
    total = sizes.sum()
    if total <= 0:
        raise ValueError("total dataset size is zero")
    first = contributions[0][0]
    for p, _ in contributions[1:]:
        if not first.congruent(p):
            raise numerics.ShapeError("client parameters are not congruent")
    weights = sizes / total
    out = []
    for k in range(len(first.arrays())):
        acc = weights[0] * contributions[0][0].arrays()[k]
        for w, (p, _) in zip(weights[1:], contributions[1:]):
            acc = acc + w * p.arrays()[k]
        out.append(acc)
    return ModelParams(out[0::2], out[1::2], first.split)


def build_context(pool: ClassSignalPool, cfg: FedConfig) -> tuple[ContrastContext, GlobalSignalTable]:
    if cfg.global_signals == "avg":
        table = avg_global_signal(pool)
    else:
        table = global_signals(pool, cfg.cluster_level)
    return ContrastContext(pool, table, cfg.train.temperature), table


def _evaluate(update: ClientUpdate, client: ClientDataset, global_params, cfg, round_, seed) -> ClientMetrics:
    test = client.test
    m = ClientMetrics(
        client=client.client_id,
        n_train=update.n_train,
        acc=numerics.accuracy(update.params, test.x, test.y),
        global_acc=numerics.accuracy(global_params, test.x, test.y),
        loss_ce=update.parts.ce,
        loss_local=update.parts.local,
        loss_global=update.parts.global_,
        skipped_samples=update.parts.skipped,
    )
    if cfg.eval_attacks and round_ >= cfg.rounds - cfg.final_window:
        for name in sorted(cfg.eval_attacks):
            rng = np.random.default_rng([seed, EVAL_STREAM, round_, client.client_id])
            m.attack_acc[name] = evaluate_under_attack(
                update.params, test.x, test.y, cfg.eval_attacks[name], rng
            )
    return m


def run_training(
    clients: Sequence[ClientDataset],
    cfg: FedConfig,
    seed: int = 0,
    params: ModelParams | None = None,
    on_round: Callable[[RoundMetrics, ClassSignalPool, GlobalSignalTable], None] | None = None,
    keep_history: bool = False,
) -> TrainingResult:
    """Run ``cfg.rounds`` communication rounds with full client participation.

    The contrast context used in round t is built from the signals clients
    produced in round t - 1; round 0 trains on cross-entropy alone.
    """
    active = [c for c in clients if len(c.train)]
    for c in clients:
        if not len(c.train):
            log.warning("client %d has no training data; skipped", c.client_id)
    if not active:
        raise ValueError("no client has training data")
    n_classes = active[0].train.n_classes
    if params is None:
        params = initial_params(active[0].train.x.shape[1], n_classes, cfg, seed)

    ctx: ContrastContext | None = None
    result = TrainingResult([], params)
    workers = cfg.workers or len(active)
    pool_exec = None if cfg.deterministic or workers == 1 else ThreadPoolExecutor(workers)
    try:
        for t in range(cfg.rounds):
            t0 = time.perf_counter()

            def work(c, t=t, ctx=ctx, params=params):
                return client_local_update(c, params, ctx, cfg, t, seed)

            if pool_exec is None:
                updates = [work(c) for c in active]
            else:
                updates = list(pool_exec.map(work, active))

            pool = pool_signals(u.signals for u in updates)
            ctx, table = build_context(pool, cfg)
            params = server_aggregate_params([(u.params, u.n_train) for u in updates])

            client_metrics = [_evaluate(u, c, params, cfg, t, seed) for u, c in zip(updates, active)]
            rm = RoundMetrics(t, client_metrics, pool.counts(), time.perf_counter() - t0)
            result.metrics.append(rm)
            result.local_params = [u.params for u in updates]
            if keep_history:
                result.history.append((pool, table))
            if on_round is not None:
                on_round(rm, pool, table)
    finally:
        if pool_exec is not None:
            pool_exec.shutdown()
    result.params = params
    return result
