"""Experiment driver.

Config files are UTF-8 ``key = value`` lines; ``#`` starts a comment, blank
lines are ignored, list values are comma separated.  Run ``fedccl keys`` to
list every key with its default.

Outputs of ``fedccl run`` (in the output directory):

``metrics.jsonl``
    one object per client per round (``scope: "client"``) followed by one
    per-round aggregate (``scope: "aggregate"``), fields ``seed, round,
    scope, client, acc, global_acc, loss_ce, loss_local, loss_global,
    skipped_samples`` (+ ``acc_<attack>`` when attacks are evaluated and
    ``wall_time`` on aggregates).
``summary.csv``
    one row per seed plus a ``mean`` row; accuracies are percentages
    averaged over the last ``final_window`` rounds of the aggregate records.
``signals.jsonl``
    only with ``dump_signals = true``: ``{seed, round, scope, client, class, vector}``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adversarial import AttackConfig
from .contrast import Ablation
from .datagen import REGIMES, ScenarioSpec, build_scenario
from .federation import FedConfig, RoundMetrics, run_training
from .numerics import TrainConfig
from .signals import CLUSTER_LEVELS, dump_signals

log = logging.getLogger("fedccl")

OUT_ENV = "FEDCCL_OUT"
METHODS = ("fedavg", "fedccl", "fedccl-plus", "local-only", "global-only", "avg-local", "avg-global")
ATTACKS = ("none", "fgsm", "pgd")
SUMMARY_FIELDS = (
    "seed", "method", "scenario_hash", "rounds", "final_acc", "final_global_acc",
    "final_acc_fgsm", "final_acc_pgd20",
)


class ConfigError(ValueError):
    pass


class SchemaError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _strs(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _opt_bool(text: str):
    return None if text.strip().lower() in ("", "auto") else _bool(text)


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "auto") else float(text)


@dataclass
class ExperimentConfig:
    method: str = "fedccl"
    # scenario
    regime: str = "imbalanced-intra"
    dataset: str = "synthetic"
    data_dir: str = "data"
    n_clients: int = 5
    alpha: float = 0.5
    domains: tuple[str, ...] = ()
    n_classes: int = 10
    max_train_per_client: int = 0
    synth_dim: int = 20
    synth_per_class: int = 200
    synth_noise: float = 0.5
    scenario_seed: int | None = None  # None: reuse each run seed
    # training
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 64
    learning_rate: float = 0.01
    temperature: float = 0.07
    hidden: tuple[int, ...] = (128, 32)
    use_local: bool | None = None  # None: implied by method
    use_global: bool | None = None
    local_weight: float = 1.0
    global_weight: float = 1.0
    cluster_level: str = "final"
    # adversarial
    attack: str = "none"
    eps: float = 0.3
    attack_alpha: float = 0.01
    attack_steps: int = 40
    attack_objective: str = "ce"
    eval_attacks: bool = False
    eval_eps: float | None = None  # None: same as eps
    # run control
    seeds: tuple[int, ...] = (1, 2, 3)
    final_window: int = 5
    out: str = "runs/default"
    deterministic: bool = True
    workers: int = 0
    dump_signals: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(f"{name}: {why}")

        if self.method not in METHODS:
            bad("method", f"must be one of {', '.join(METHODS)}")
        if self.regime not in REGIMES:
            bad("regime", f"must be one of {', '.join(REGIMES)}")
        if self.attack not in ATTACKS:
            bad("attack", f"must be one of {', '.join(ATTACKS)}")
        if self.cluster_level not in CLUSTER_LEVELS:
            bad("cluster_level", f"must be one of {', '.join(CLUSTER_LEVELS)}")
        if self.attack_objective not in ("ce", "total"):
            bad("attack_objective", "must be ce or total")
        implied = self.implied_flags()
        for name, want in zip(("use_local", "use_global"), implied):
            got = getattr(self, name)
            if got is not None and got != want and self.method != "fedccl":
                bad(name, f"method={self.method} requires {name}={str(want).lower()}")
        for name in ("n_clients", "rounds", "local_epochs", "batch_size", "attack_steps",
                     "final_window", "n_classes", "synth_dim", "synth_per_class"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        for name in ("alpha", "temperature", "attack_alpha"):
            if not getattr(self, name) > 0:
                bad(name, "must be > 0")
        if self.learning_rate < 0:
            bad("learning_rate", "must be >= 0")
        if self.eps < 0 or (self.eval_eps is not None and self.eval_eps < 0):
            bad("eps", "must be >= 0")
        if self.local_weight < 0 or self.global_weight < 0:
            bad("local_weight", "contrast weights must be >= 0")
        if not self.seeds:
            bad("seeds", "need at least one seed")
        if not self.hidden or min(self.hidden) < 1:
            bad("hidden", "need at least one positive layer width")
        if self.max_train_per_client < 0 or self.workers < 0:
            bad("max_train_per_client", "must be >= 0")

    def implied_flags(self) -> tuple[bool, bool]:
        return {
            "fedavg": (False, False),
            "local-only": (True, False),
            "global-only": (False, True),
        }.get(self.method, (True, True))

    def ablation(self) -> Ablation:
        use_local, use_global = self.implied_flags()
        if self.method == "fedccl":
            use_local = use_local if self.use_local is None else self.use_local
            use_global = use_global if self.use_global is None else self.use_global
        return Ablation(use_local, use_global)

    def training_attack(self) -> AttackConfig | None:
        attack = self.attack
        if self.method == "fedccl-plus" and attack == "none":
            attack = "pgd"
        if attack == "none":
            return None
        if attack == "fgsm":
            return AttackConfig.fgsm(self.eps)
        return AttackConfig(self.eps, self.attack_alpha, self.attack_steps)

    def scenario(self, seed: int) -> ScenarioSpec:
        return ScenarioSpec(
            regime=self.regime, n_clients=self.n_clients, alpha=self.alpha,
            domains=self.domains, dataset=self.dataset, data_dir=self.data_dir,
            seed=seed if self.scenario_seed is None else self.scenario_seed,
            max_train_per_client=self.max_train_per_client, n_classes=self.n_classes,
            synth_dim=self.synth_dim, synth_per_class=self.synth_per_class,
            synth_noise=self.synth_noise,
        )

    def fed_config(self, seed: int) -> FedConfig:
        eval_attacks = {}
        if self.eval_attacks:
            eps = self.eps if self.eval_eps is None else self.eval_eps
            eval_attacks = {"fgsm": AttackConfig.fgsm(eps), "pgd20": AttackConfig.pgd(eps, 20)}
        return FedConfig(
            train=TrainConfig(self.learning_rate, self.batch_size, self.local_epochs,
                              self.temperature, seed),
            ablation=self.ablation(),
            rounds=self.rounds,
            hidden=self.hidden,
            local_signals="avg" if self.method == "avg-local" else "cluster",
            global_signals="avg" if self.method == "avg-global" else "cluster",
            cluster_level=self.cluster_level,
            local_weight=self.local_weight,
            global_weight=self.global_weight,
            attack=self.training_attack(),
            attack_objective=self.attack_objective,
            eval_attacks=eval_attacks,
            final_window=self.final_window,
            deterministic=self.deterministic,
            workers=self.workers,
        )

    def scenario_hash(self) -> str:
        keys = ("regime", "dataset", "n_clients", "alpha", "domains", "n_classes",
                "max_train_per_client", "synth_dim", "synth_per_class", "synth_noise",
                "scenario_seed", "seeds", "rounds")
        blob = json.dumps({k: _format(getattr(self, k)) for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


_PARSERS = {
    "seeds": _ints,
    "hidden": _ints,
    "domains": _strs,
    "use_local": _opt_bool,
    "use_global": _opt_bool,
    "eval_eps": _opt_float,
    "scenario_seed": lambda t: None if t.strip().lower() in ("", "auto") else int(t),
}


def _field_parser(f: dataclasses.Field):
    if f.name in _PARSERS:
        return _PARSERS[f.name]
    default = f.default
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _field_parser(FIELDS[key])(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return ExperimentConfig(**values)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config_text(text, str(path))


def serialize_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{name} = {_format(getattr(cfg, name))}\n" for name in FIELDS)


# ------------------------------------------------------------------ run


def _num(x: float):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def _round_records(seed: int, rm: RoundMetrics, attack_names) -> list[dict]:
    recs = []
    for c in rm.clients:
        rec = {
            "seed": seed, "round": rm.round, "scope": "client", "client": c.client,
            "acc": c.acc, "global_acc": c.global_acc, "loss_ce": c.loss_ce,
            "loss_local": c.loss_local, "loss_global": c.loss_global,
            "skipped_samples": c.skipped_samples,
        }
        for name in attack_names:
            rec[f"acc_{name}"] = _num(c.attack_acc.get(name))
        recs.append(rec)
    agg = {
        "seed": seed, "round": rm.round, "scope": "aggregate", "client": None,
        "acc": rm.acc, "global_acc": rm.global_acc,
        "loss_ce": float(np.mean([c.loss_ce for c in rm.clients])),
        "loss_local": float(np.mean([c.loss_local for c in rm.clients])),
        "loss_global": float(np.mean([c.loss_global for c in rm.clients])),
        "skipped_samples": int(sum(c.skipped_samples for c in rm.clients)),
        "signal_counts": {str(k): v for k, v in sorted(rm.signal_counts.items())},
        "wall_time": rm.wall_time,
    }
    for name in attack_names:
        agg[f"acc_{name}"] = _num(rm.attack_acc(name))
    recs.append(agg)
    return recs


def summarize(records: list[dict], cfg: ExperimentConfig) -> list[dict]:
    """Per-seed final metrics from aggregate metric records (recomputable from metrics.jsonl)."""
    rows = []
    for seed in cfg.seeds:
        agg = [r for r in records if r["seed"] == seed and r["scope"] == "aggregate"]
        agg.sort(key=lambda r: r["round"])
        tail = agg[-cfg.final_window:]

        def mean_of(key):
            vals = [r[key] for r in tail if r.get(key) is not None]
            return 100.0 * float(np.mean(vals)) if vals else None

        rows.append({
            "seed": seed, "method": cfg.method, "scenario_hash": cfg.scenario_hash(),
            "rounds": len(agg), "final_acc": mean_of("acc"),
            "final_global_acc": mean_of("global_acc"),
            "final_acc_fgsm": mean_of("acc_fgsm"), "final_acc_pgd20": mean_of("acc_pgd20"),
        })
    mean_row = {"seed": "mean", "method": cfg.method, "scenario_hash": cfg.scenario_hash(),
                "rounds": rows[0]["rounds"] if rows else 0}
    for key in ("final_acc", "final_global_acc", "final_acc_fgsm", "final_acc_pgd20"):
        vals = [r[key] for r in rows if r[key] is not None]
        mean_row[key] = float(np.mean(vals)) if vals else None
    return rows + [mean_row]


def write_summary(rows: list[dict], path) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row[k] is None else f"{row[k]:.4f}" if isinstance(row[k], float) else row[k])
                         for k in SUMMARY_FIELDS})
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def run_seed(cfg: ExperimentConfig, seed: int, metrics_fh=None, signals_fh=None) -> list[dict]:
    clients = build_scenario(cfg.scenario(seed))
    fed = cfg.fed_config(seed)
    attack_names = sorted(fed.eval_attacks)
    records: list[dict] = []

    def on_round(rm, pool, table):
        recs = _round_records(seed, rm, attack_names)
        records.extend(recs)
        if metrics_fh is not None:
            for rec in recs:
                metrics_fh.write(json.dumps(rec) + "\n")
            metrics_fh.flush()
        if signals_fh is not None:
            dump_signals(signals_fh, rm.round, pool, table, seed)
        log.info("seed %d round %d: acc %.4f global %.4f", seed, rm.round, rm.acc, rm.global_acc)

    run_training(clients, fed, seed=seed, on_round=on_round)
    return records


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> int:
    out = Path(out_dir or os.environ.get(OUT_ENV) or cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(serialize_config(cfg), encoding="utf-8")
        records: list[dict] = []
        signals_fh = open(out / "signals.jsonl", "w", encoding="utf-8") if cfg.dump_signals else None
        try:
            with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
                for seed in cfg.seeds:
                    records.extend(run_seed(cfg, seed, fh, signals_fh))
        finally:
            if signals_fh is not None:
                signals_fh.close()
        write_summary(summarize(records, cfg), out / "summary.csv")
    except (OSError, ValueError, ArithmeticError) as exc:
        log.error("experiment failed: %s", exc)
        return 1
    return 0


# -------------------------------------------------------------- compare


def read_summary(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in SUMMARY_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        return list(reader)


def compare_runs(paths, stream=None) -> list[tuple[str, float, float]]:
    """Print each run's mean final accuracy and its delta to the first run."""
    stream = stream or sys.stdout
    if len(paths) < 2:
        raise ValueError("compare needs at least two summaries")
    rows = []
    hashes = set()
    for p in paths:
        table = read_summary(p)
        mean = [r for r in table if r["seed"] == "mean"]
        if not mean:
            raise SchemaError(f"{p}: no mean row")
        hashes.add(mean[0]["scenario_hash"])
        rows.append((mean[0]["method"], float(mean[0]["final_acc"]), str(p)))
    if len(hashes) > 1:
        raise ValueError("summaries come from different scenarios: " + ", ".join(sorted(hashes)))
    base = rows[0][1]
    out = []
    stream.write(f"{'method':<14}{'acc':>8}{'delta':>9}  file\n")
    for method, acc, p in rows:
        delta = acc - base
        # avoid printing -0.00
        delta = 0.0 if abs(delta) < 5e-3 else delta
        stream.write(f"{method:<14}{acc:>8.2f}{delta:>+9.2f}  {p}\n")
        out.append((method, acc, delta))
    return out


# ----------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedccl", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a config file")
    run.add_argument("config")
    run.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the config)")
    run.add_argument("--deterministic", action="store_true", default=None,
                     help="update clients sequentially")
    run.add_argument("--parallel", dest="deterministic", action="store_false",
                     help="update clients on worker threads")
    run.add_argument("--method", choices=METHODS)
    run.add_argument("--seeds", type=_ints)
    run.add_argument("--rounds", type=int)
    run.add_argument("--attack", choices=ATTACKS)
    run.add_argument("--eps", type=float)
    run.add_argument("--alpha", dest="attack_alpha", type=float, help="attack step size")
    run.add_argument("--steps", dest="attack_steps", type=int, help="attack steps")

    cmp_ = sub.add_parser("compare", help="delta table of summary.csv files vs the first")
    cmp_.add_argument("summaries", nargs="+")

    sub.add_parser("keys", help="print every config key with its default")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "keys":
        sys.stdout.write(serialize_config(ExperimentConfig()))
        return 0
    if args.command == "compare":
        try:
            compare_runs(args.summaries)
        except (OSError, ValueError) as exc:
            print(f"fedccl compare: {exc}", file=sys.stderr)
            return 1
        return 0
    try:
        cfg = parse_config(args.config)
        overrides = {k: getattr(args, k) for k in
                     ("method", "seeds", "rounds", "attack", "eps", "attack_alpha",
                      "attack_steps", "deterministic")
                     if getattr(args, k) is not None}
        if overrides:
            cfg = dataclasses.replace(cfg, **overrides)
    except ConfigError as exc:
        print(f"fedccl run: {exc}", file=sys.stderr)
        return 2
    return run_experiment(cfg, args.out)


if __name__ == "__main__":
    sys.exit(main())
