"""Simulated-clock training runs: tiered scheduling plus baselines.

Four runners share one scenario/dataset preparation path so a single seed
pins identical client populations and partitions across algorithms:

* ``decantfed``          tier-scheduled, LP-optimized workloads, stale updates
* ``decantfed_uniform``  same schedule but every client trains d_min samples
* ``fedavg``             synchronous, all clients, d_min, full-band queue
* ``fedprox``            synchronous, tier-1 selection only, proximal updates
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .fl import (
    DEFAULT_CLIP,
    ModelParams,
    TrainSpec,
    aggregate,
    client_rng,
    evaluate,
    init_params,
    learning_rate,
    local_train,
    participants,
)
from .scenario import (
    ClientProfile,
    LabeledDataset,
    ScenarioConfig,
    dirichlet_partition,
    generate_scenario,
    load_idx,
    synth_gaussian,
    with_partition,
)
from .scheduler import TierPlan, lead_cluster
from .wireless import ChannelParams, TierQueueSchedule, upload_latency_s
from .workload import optimize_workloads

log = logging.getLogger(__name__)

ALGORITHMS = ("decantfed", "fedavg", "fedprox", "decantfed_uniform")

CSV_HEADER = "iter,time_s,participants,train_loss,test_acc,tier_counts"


class ZeroSelectedError(RuntimeError):
    """Selection produced no clients; the deadline is too tight."""


class ConfigError(ValueError):
    """A config document failed validation; the message names the field."""


@dataclass
class DatasetSpec:
    """Where training/test data comes from: synthetic blobs or IDX files."""

    kind: str = "synth"
    # synth knobs
    n_classes: int = 10
    n_per_class: int = 300
    n_features: int = 784
    class_sep: float = 3.0
    test_per_class: int = 100
    # idx file pairs
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    limit: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("synth", "idx"):
            raise ConfigError(f"dataset.kind must be 'synth' or 'idx', got {self.kind!r}")
        if self.kind == "idx":
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                if getattr(self, name) is None:
                    raise ConfigError(f"dataset.{name} is required when kind='idx'")
        if self.limit is not None and self.limit < 1:
            raise ConfigError(f"dataset.limit must be >= 1, got {self.limit}")


@dataclass
class RunConfig:
    """Everything one training run needs; serializes to a versioned JSON doc."""

    algorithm: str = "decantfed"
    tau_s: float = 15.0
    d_min: int = 10
    iterations: int | None = 200
    time_budget_s: float | None = None
    eval_every: int = 1
    seed: int = 0
    beta: float = 1.0
    delta1: float = 0.005
    alpha: float = 1.45
    clip_zeta: float = DEFAULT_CLIP
    prox_mu: float = 0.01
    batch_size: int = 10
    layer_shapes: tuple = ((784, 10),)
    activations: tuple = ("none",)
    order: str = "ascending"
    j_max: int = 1024
    cap_workload_to_local: bool = False
    weight_by_workload: bool = False
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if (self.iterations is None) == (self.time_budget_s is None):
            raise ConfigError("exactly one of iterations and time_budget_s must be set")
        if self.iterations is not None and self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.time_budget_s is not None and not self.time_budget_s > 0:
            raise ConfigError(f"time_budget_s must be > 0, got {self.time_budget_s}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be > 0, got {self.beta!r}")
        if not (math.isfinite(self.tau_s) and self.tau_s > 0):
            raise ConfigError(f"tau_s must be finite and > 0, got {self.tau_s!r}")
        if self.d_min < 1:
            raise ConfigError(f"d_min must be >= 1, got {self.d_min}")
        self.layer_shapes = tuple(tuple(s) for s in self.layer_shapes)
        self.activations = tuple(self.activations)


CONFIG_DOC_VERSION = 1


def _dataclass_from_doc(cls, doc: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown field {where}.{unknown[0]!r}")
    try:
        return cls(**doc)
    except TypeError as err:
        raise ConfigError(f"bad fields under {where}: {err}") from err


def run_config_from_doc(doc: dict) -> RunConfig:
    """Build a RunConfig from a parsed JSON document, naming bad fields."""
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    body = dict(doc)
    version = body.pop("version", CONFIG_DOC_VERSION)
    if version != CONFIG_DOC_VERSION:
        raise ConfigError(f"unsupported config version {version!r}")
    scenario_doc = body.pop("scenario", {})
    dataset_doc = body.pop("dataset", {})
    if not isinstance(scenario_doc, dict):
        raise ConfigError("'scenario' must be a JSON object")
    if not isinstance(dataset_doc, dict):
        raise ConfigError("'dataset' must be a JSON object")
    scenario_doc = dict(scenario_doc)
    for key in ("cpu_hz_range", "cycles_range"):
        if key in scenario_doc:
            scenario_doc[key] = tuple(scenario_doc[key])
    scenario = _dataclass_from_doc(ScenarioConfig, scenario_doc, "scenario")
    dataset = _dataclass_from_doc(DatasetSpec, dataset_doc, "dataset")

    allowed = {f.name for f in fields(RunConfig)} - {"scenario", "dataset"}
    unknown = sorted(set(body) - allowed)
    if unknown:
        raise ConfigError(f"unknown field {unknown[0]!r}")
    if "layer_shapes" in body:
        body["layer_shapes"] = tuple(tuple(s) for s in body["layer_shapes"])
    if "activations" in body:
        body["activations"] = tuple(body["activations"])
    try:
        return RunConfig(scenario=scenario, dataset=dataset, **body)
    except TypeError as err:
        raise ConfigError(f"bad run config: {err}") from err


def run_config_to_doc(cfg: RunConfig) -> dict:
    doc = {
        "version": CONFIG_DOC_VERSION,
        "algorithm": cfg.algorithm,
        "tau_s": cfg.tau_s,
        "d_min": cfg.d_min,
        "iterations": cfg.iterations,
        "time_budget_s": cfg.time_budget_s,
        "eval_every": cfg.eval_every,
        "seed": cfg.seed,
        "beta": cfg.beta,
        "delta1": cfg.delta1,
        "alpha": cfg.alpha,
        "clip_zeta": cfg.clip_zeta,
        "prox_mu": cfg.prox_mu,
        "batch_size": cfg.batch_size,
        "layer_shapes": [list(s) for s in cfg.layer_shapes],
        "activations": list(cfg.activations),
        "order": cfg.order,
        "j_max": cfg.j_max,
        "cap_workload_to_local": cfg.cap_workload_to_local,
        "weight_by_workload": cfg.weight_by_workload,
        "scenario": {
            "n_clients": cfg.scenario.n_clients,
            "area_km": cfg.scenario.area_km,
            "total_bandwidth_hz": cfg.scenario.total_bandwidth_hz,
            "tx_power_w": cfg.scenario.tx_power_w,
            "noise_dbm": cfg.scenario.noise_dbm,
            "model_size_bits": cfg.scenario.model_size_bits,
            "cpu_hz_range": list(cfg.scenario.cpu_hz_range),
            "cycles_range": list(cfg.scenario.cycles_range),
            "seed": cfg.scenario.seed,
        },
        "dataset": {
            f.name: getattr(cfg.dataset, f.name) for f in fields(DatasetSpec)
        },
    }
    return doc


# --- metrics ---


@dataclass
class MetricsRow:
    iteration: int
    time_s: float
    participants: int
    train_loss: float
    test_acc: float
    tier_counts: dict[int, int]


@dataclass
class MetricsLog:
    """Evaluation rows for one run, plus scheduling provenance."""

    algorithm: str
    seed: int
    rows: list[MetricsRow]
    plan_digest: str
    # (client_id, iteration consumed, iteration of the base model trained on)
    provenance: list[tuple[int, int, int]] = field(default_factory=list)

    def final_accuracy(self) -> float:
        if not self.rows:
            raise ValueError("run produced no evaluation rows")
        return self.rows[-1].test_acc

    def time_to_accuracy(self, target: float) -> float | None:
        """First simulated time at which test accuracy reaches target, else None."""
        for row in self.rows:
            if row.test_acc >= target:
                return row.time_s
        return None

    def to_csv_text(self) -> str:
        lines = [CSV_HEADER]
        for r in self.rows:
            counts = "|".join(f"{j}:{c}" for j, c in sorted(r.tier_counts.items()))
            lines.append(
                f"{r.iteration},{r.time_s!r},{r.participants},"
                f"{r.train_loss!r},{r.test_acc!r},{counts}"
            )
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_csv_text())


def metrics_from_csv_text(text: str) -> list[MetricsRow]:
    lines = [ln for ln in text.strip().split("\n") if ln]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"unexpected metrics header {lines[0] if lines else ''!r}")
    rows = []
    for ln in lines[1:]:
        it, t, p, tl, ta, tc = ln.split(",")
        counts = {}
        if tc:
            for item in tc.split("|"):
                j, c = item.split(":")
                counts[int(j)] = int(c)
        rows.append(
            MetricsRow(int(it), float(t), int(p), float(tl), float(ta), counts)
        )
    return rows


def plan_digest(doc: dict) -> str:
    return hashlib.sha256(
        json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()


def run_summary(cfg: RunConfig, log_: MetricsLog, targets=(0.7, 0.8, 0.9)) -> dict:
    last = log_.rows[-1] if log_.rows else None
    return {
        "algorithm": log_.algorithm,
        "seed": log_.seed,
        "iterations_run": last.iteration if last else 0,
        "simulated_time_s": last.time_s if last else 0.0,
        "final_accuracy": last.test_acc if last else None,
        "final_train_loss": last.train_loss if last else None,
        "plan_digest": log_.plan_digest,
        "time_to_accuracy": {
            repr(t): log_.time_to_accuracy(t) for t in targets
        },
    }


# --- shared preparation ---


def _sub_seeds(seed: int) -> tuple[int, int, int, int]:
    """Distinct deterministic streams for scenario, data, partition, model."""
    state = np.random.SeedSequence(seed).generate_state(4)
    return tuple(int(x) for x in state)


def _load_dataset(spec: DatasetSpec, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    if spec.kind == "idx":
        train = load_idx(spec.train_images, spec.train_labels, split="train")
        test = load_idx(spec.test_images, spec.test_labels, split="test")
        if spec.limit is not None:
            train = train.subset(np.arange(min(spec.limit, train.n_samples)))
        return train, test
    # one draw with shared class means, then a per-class train/test split
    per_class = spec.n_per_class + spec.test_per_class
    full = synth_gaussian(
        spec.n_classes, per_class, spec.n_features, spec.class_sep, seed
    )
    train_idx = []
    test_idx = []
    for c in range(spec.n_classes):
        start = c * per_class
        train_idx.extend(range(start, start + spec.n_per_class))
        test_idx.extend(range(start + spec.n_per_class, start + per_class))
    train = full.subset(train_idx)
    train.split = "train"
    test = full.subset(test_idx)
    test.split = "test"
    return train, test


def prepare_run(cfg: RunConfig):
    """Scenario, partitioned profiles, and datasets shared by every runner."""
    scenario_seed, data_seed, partition_seed, model_seed = _sub_seeds(cfg.seed)
    scenario_cfg = replace(cfg.scenario, seed=scenario_seed)
    profiles = generate_scenario(scenario_cfg)
    train, test = _load_dataset(cfg.dataset, data_seed)
    parts = dirichlet_partition(train.labels, cfg.scenario.n_clients, cfg.beta, partition_seed)
    profiles = with_partition(profiles, parts)
    return profiles, train, test, model_seed


def make_plan(cfg: RunConfig, profiles: list[ClientProfile]) -> TierPlan:
    return lead_cluster(
        profiles,
        total_bandwidth_hz=cfg.scenario.total_bandwidth_hz,
        tau_s=cfg.tau_s,
        d_min=cfg.d_min,
        model_size_bits=cfg.scenario.model_size_bits,
        noise_w=cfg.scenario.noise_w,
        order=cfg.order,
        j_max=cfg.j_max,
    )


def _client_views(train: LabeledDataset, profiles):
    views = {}
    for p in profiles:
        idx = np.asarray(p.dataset_indices, dtype=int)
        views[p.id] = (train.features[idx], train.labels[idx])
    return views


def _stop_iteration(cfg: RunConfig, next_iter: int, next_time: float) -> bool:
    if cfg.iterations is not None:
        return next_iter > cfg.iterations
    return next_time > cfg.time_budget_s


def _eval_now(cfg: RunConfig, iteration: int, stopped_next: bool) -> bool:
    return iteration % cfg.eval_every == 0 or stopped_next


# --- runners ---


def _run_tiered(
    cfg: RunConfig,
    plan: TierPlan | None,
    uniform: bool,
    workloads: dict[int, int] | None = None,
) -> MetricsLog:
    """Tier-scheduled loop: one aggregation per period, stale tier updates."""
    profiles, train, test, model_seed = prepare_run(cfg)
    if plan is None:
        plan = make_plan(cfg, profiles)
    sizes = {p.id: len(p.dataset_indices) for p in profiles}
    if uniform:
        d = {p.id: cfg.d_min for p in profiles}
    else:
        if workloads is None:
            workloads = optimize_workloads(plan, profiles, cfg.d_min).d_int
        d = dict(workloads)
        if cfg.cap_workload_to_local:
            d = {i: min(v, sizes[i]) if sizes[i] > 0 else v for i, v in d.items()}
    views = _client_views(train, profiles)

    model = init_params(cfg.layer_shapes, cfg.activations, seed=model_seed)
    tier_base = {j: model for j in plan.tiers()}
    base_iter = {j: 0 for j in plan.tiers()}
    rates = {j: learning_rate(j, cfg.delta1, cfg.alpha) for j in plan.tiers()}

    rows: list[MetricsRow] = []
    provenance: list[tuple[int, int, int]] = []
    iteration = 0
    while not _stop_iteration(cfg, iteration + 1, (iteration + 1) * cfg.tau_s):
        iteration += 1
        clock = iteration * cfg.tau_s
        part = participants(iteration, plan)
        contributions = []
        for i in part.client_ids:
            j = part.staleness[i]
            spec = TrainSpec(
                d_samples=d[i],
                learning_rate=rates[j],
                batch_size=cfg.batch_size,
                clip_zeta=cfg.clip_zeta,
                prox_mu=0.0,
            )
            feats, labs = views[i]
            local = local_train(
                tier_base[j], feats, labs, spec,
                client_rng(cfg.seed, i, iteration), client_id=i,
            )
            weight = d[i] if cfg.weight_by_workload else sizes[i]
            contributions.append((local, weight))
            provenance.append((i, iteration, base_iter[j]))
        if contributions:
            model = aggregate(contributions)
            for j in set(part.staleness.values()):
                tier_base[j] = model
                base_iter[j] = iteration
        stopped_next = _stop_iteration(cfg, iteration + 1, (iteration + 1) * cfg.tau_s)
        if _eval_now(cfg, iteration, stopped_next):
            acc, _ = evaluate(model, test.features, test.labels)
            _, train_loss = evaluate(model, train.features, train.labels)
            counts = dict(Counter(part.staleness.values()))
            rows.append(MetricsRow(iteration, clock, len(part), train_loss, acc, counts))

    digest = plan_digest(plan.to_doc())
    algo = "decantfed_uniform" if uniform else "decantfed"
    return MetricsLog(algo, cfg.seed, rows, digest, provenance)


def run_decantfed(
    cfg: RunConfig,
    plan: TierPlan | None = None,
    workloads: dict[int, int] | None = None,
) -> MetricsLog:
    return _run_tiered(cfg, plan, uniform=False, workloads=workloads)


def run_uniform_decant(cfg: RunConfig, plan: TierPlan | None = None) -> MetricsLog:
    return _run_tiered(cfg, plan, uniform=True)


def _fedavg_round_duration(cfg: RunConfig, profiles) -> tuple[float, list[int]]:
    """Makespan of all clients at d_min on the full band, ascending comp order."""
    comp = {
        p.id: p.cycles_per_sample * cfg.d_min / p.cpu_hz for p in profiles
    }
    order = sorted(comp, key=lambda i: (comp[i], i))
    by_id = {p.id: p for p in profiles}
    ups = []
    for i in order:
        p = by_id[i]
        ch = ChannelParams(
            bandwidth_hz=cfg.scenario.total_bandwidth_hz,
            tx_power_w=p.tx_power_w,
            gain=p.gain,
            noise_w=cfg.scenario.noise_w,
            model_size_bits=cfg.scenario.model_size_bits,
        )
        ups.append(upload_latency_s(ch))
    queue = TierQueueSchedule(
        client_ids=tuple(order),
        comp_s=tuple(comp[i] for i in order),
        upload_s=tuple(ups),
    )
    return queue.makespan_s(), order


def run_fedavg(cfg: RunConfig) -> MetricsLog:
    """Synchronous baseline: every client, d_min samples, full-band queue."""
    profiles, train, test, model_seed = prepare_run(cfg)
    sizes = {p.id: len(p.dataset_indices) for p in profiles}
    views = _client_views(train, profiles)
    duration, order = _fedavg_round_duration(cfg, profiles)
    rate = learning_rate(1, cfg.delta1, cfg.alpha)

    model = init_params(cfg.layer_shapes, cfg.activations, seed=model_seed)
    rows: list[MetricsRow] = []
    provenance: list[tuple[int, int, int]] = []
    iteration = 0
    while not _stop_iteration(cfg, iteration + 1, (iteration + 1) * duration):
        iteration += 1
        clock = iteration * duration
        contributions = []
        for p in profiles:
            spec = TrainSpec(
                d_samples=cfg.d_min,
                learning_rate=rate,
                batch_size=cfg.batch_size,
                clip_zeta=cfg.clip_zeta,
                prox_mu=0.0,
            )
            feats, labs = views[p.id]
            local = local_train(
                model, feats, labs, spec,
                client_rng(cfg.seed, p.id, iteration), client_id=p.id,
            )
            weight = cfg.d_min if cfg.weight_by_workload else sizes[p.id]
            contributions.append((local, weight))
            provenance.append((p.id, iteration, iteration - 1))
        model = aggregate(contributions)
        stopped_next = _stop_iteration(cfg, iteration + 1, (iteration + 1) * duration)
        if _eval_now(cfg, iteration, stopped_next):
            acc, _ = evaluate(model, test.features, test.labels)
            _, train_loss = evaluate(model, train.features, train.labels)
            rows.append(
                MetricsRow(iteration, clock, len(profiles), train_loss, acc,
                           {1: len(profiles)})
            )

    digest = plan_digest(
        {"algorithm": "fedavg", "round_s": duration, "upload_order": order}
    )
    return MetricsLog("fedavg", cfg.seed, rows, digest, provenance)


def run_fedprox(cfg: RunConfig, plan: TierPlan | None = None) -> MetricsLog:
    """Proximal baseline on the deadline-feasible subset of clients.

    Selection is the tier-1 cut of the schedule (clients that would miss
    the period deadline are excluded entirely, not deferred); every round
    lasts one period and stays synchronous on the current global model.
    """
    profiles, train, test, model_seed = prepare_run(cfg)
    if plan is None:
        plan = make_plan(cfg, profiles)
    selected = list(plan.upload_order.get(1, []))
    if not selected:
        raise ZeroSelectedError(
            f"tau={cfg.tau_s} selects no clients; increase tau so at least one "
            f"client can finish inside one period"
        )
    tier1 = TierPlan(
        assignment={i: 1 for i in selected},
        tier_bandwidth_hz={1: plan.tier_bandwidth_hz[1]},
        upload_order={1: selected},
        deadline_s=plan.deadline_s,
        n_tiers=1,
        tier_weights={1: 1.0},
        total_bandwidth_hz=plan.total_bandwidth_hz,
        noise_w=plan.noise_w,
        model_size_bits=plan.model_size_bits,
        n_clients=plan.n_clients,
    )
    sizes = {p.id: len(p.dataset_indices) for p in profiles}
    d = dict(optimize_workloads(tier1, profiles, cfg.d_min).d_int)
    if cfg.cap_workload_to_local:
        d = {i: min(v, sizes[i]) if sizes[i] > 0 else v for i, v in d.items()}
    views = _client_views(train, profiles)
    rate = learning_rate(1, cfg.delta1, cfg.alpha)

    model = init_params(cfg.layer_shapes, cfg.activations, seed=model_seed)
    rows: list[MetricsRow] = []
    provenance: list[tuple[int, int, int]] = []
    iteration = 0
    while not _stop_iteration(cfg, iteration + 1, (iteration + 1) * cfg.tau_s):
        iteration += 1
        clock = iteration * cfg.tau_s
        contributions = []
        for i in selected:
            spec = TrainSpec(
                d_samples=d[i],
                learning_rate=rate,
                batch_size=cfg.batch_size,
                clip_zeta=cfg.clip_zeta,
                prox_mu=cfg.prox_mu,
            )
            feats, labs = views[i]
            local = local_train(
                model, feats, labs, spec,
                client_rng(cfg.seed, i, iteration), client_id=i,
            )
            weight = d[i] if cfg.weight_by_workload else sizes[i]
            contributions.append((local, weight))
            provenance.append((i, iteration, iteration - 1))
        model = aggregate(contributions)
        stopped_next = _stop_iteration(cfg, iteration + 1, (iteration + 1) * cfg.tau_s)
        if _eval_now(cfg, iteration, stopped_next):
            acc, _ = evaluate(model, test.features, test.labels)
            _, train_loss = evaluate(model, train.features, train.labels)
            rows.append(
                MetricsRow(iteration, clock, len(selected), train_loss, acc,
                           {1: len(selected)})
            )

    digest = plan_digest(tier1.to_doc())
    return MetricsLog("fedprox", cfg.seed, rows, digest, provenance)


def run(
    cfg: RunConfig,
    plan: TierPlan | None = None,
    workloads: dict[int, int] | None = None,
) -> MetricsLog:
    """Dispatch on cfg.algorithm."""
    if cfg.algorithm == "decantfed":
        return run_decantfed(cfg, plan, workloads)
    if cfg.algorithm == "decantfed_uniform":
        return run_uniform_decant(cfg, plan)
    if cfg.algorithm == "fedavg":
        return run_fedavg(cfg)
    if cfg.algorithm == "fedprox":
        return run_fedprox(cfg, plan)
    raise ConfigError(f"unknown algorithm {cfg.algorithm!r}")
