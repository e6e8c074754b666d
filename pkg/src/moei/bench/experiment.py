"""Method runs, forgetting reports, router statistics and the replay-size sweep."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .. import autodiff as ad
from ..adapters import AdapterSet, AdapterSpec
from ..backbone import Backbone, ModelConfig, SiteId, forward
from ..data import TaskSample, collate
from ..errors import ContractError
from ..rng import stream
from ..training import METHODS, TrainConfig, adapt, canonical_method, method_spec, pretrain
from .metrics import evaluate
from .tasks import BenchSizes, TaskFamily, gen_ei_tasks, gen_gi_tasks

logger = logging.getLogger(__name__)


@dataclass
class Bench:
    """Both task domains generated from one seed."""

    gi: Dict[str, TaskFamily]
    ei: Dict[str, TaskFamily]
    seed: int = 0

    @property
    def families(self) -> Dict[str, TaskFamily]:
        return {**self.ei, **self.gi}

    def gi_train(self) -> List[TaskSample]:
        return [s for f in self.gi.values() for s in f.train]

    def ei_train(self) -> List[TaskSample]:
        return [s for f in self.ei.values() for s in f.train]

    def eval_sets(self) -> Dict[str, List[TaskSample]]:
        return {name: f.eval for name, f in self.families.items()}

    def domain_of(self, name: str) -> str:
        return self.families[name].domain


def build_bench(seed: int = 0, sizes: Optional[BenchSizes] = None, vocab_size: int = 512) -> Bench:
    sizes = sizes or BenchSizes()
    return Bench(gen_gi_tasks(seed, sizes, vocab_size), gen_ei_tasks(seed, sizes, vocab_size), seed)


def make_replay_set(bench: Bench, size: int, seed: int) -> List[TaskSample]:
    """A fixed random subset of the GI training corpus."""
    pool = bench.gi_train()
    if size <= 0:
        return []
    pick = stream(seed, "replay_set").choice(len(pool), size=min(size, len(pool)), replace=False)
    return [pool[i] for i in pick]


def pretrain_backbone(model_cfg: ModelConfig, cfg: TrainConfig, bench: Bench, log_every: int = 0) -> Backbone:
    """Initialize from ``cfg.seed`` and pretrain on every GI family; returned frozen."""
    model = Backbone(model_cfg, stream(cfg.seed, "init"))
    pretrain(model, bench.gi_train(), cfg, log_every=log_every)
    return model


def score_all(model: Backbone, sites: Optional[AdapterSet], bench: Bench) -> Dict[str, float]:
    """Held-out metric for every EI facet and GI family."""
    return {name: evaluate(model, sites, f.eval, f.metric) for name, f in bench.families.items()}


# ---------------------------------------------------------------- reports
@dataclass
class ForgettingRow:
    """Before/after scores of one method on one seed."""

    method: str
    seed: int
    ei_before: Dict[str, float]
    ei_after: Dict[str, float]
    gi_before: Dict[str, float]
    gi_after: Dict[str, float]
    metrics: Dict[str, str] = field(default_factory=dict)

    @property
    def gi_before_mean(self) -> float:
        return float(np.mean(list(self.gi_before.values())))

    @property
    def gi_after_mean(self) -> float:
        return float(np.mean(list(self.gi_after.values())))

    @property
    def delta_GI(self) -> float:
        return self.gi_after_mean - self.gi_before_mean

    @property
    def delta_EI(self) -> Dict[str, float]:
        return {k: self.ei_after[k] - self.ei_before[k] for k in self.ei_after}

    def dimensions(self) -> List[Tuple[str, str, float, float]]:
        """``(dimension, metric, before, after)`` for each facet, GI family and the GI mean."""
        metric = lambda k: self.metrics.get(k, "accuracy")
        out = [(k, metric(k), self.ei_before[k], self.ei_after[k]) for k in self.ei_after]
        out += [(k, metric(k), self.gi_before[k], self.gi_after[k]) for k in self.gi_after]
        out.append(("GI", "mean_accuracy", self.gi_before_mean, self.gi_after_mean))
        return out


@dataclass
class ForgettingReport:
    rows: List[ForgettingRow] = field(default_factory=list)

    def add(self, row: ForgettingRow) -> None:
        self.rows.append(row)

    def methods(self) -> List[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def seeds(self) -> List[int]:
        return sorted(set(r.seed for r in self.rows))

    def row(self, method: str, seed: Optional[int] = None) -> ForgettingRow:
        method = canonical_method(method)
        for r in self.rows:
            if r.method == method and (seed is None or r.seed == seed):
                return r
        raise KeyError(f"no row for method {method} seed {seed}")

    def extend(self, other: "ForgettingReport") -> None:
        self.rows.extend(other.rows)


@dataclass
class RouterStats:
    """Token-averaged gate values per (site, dataset): ``[alpha, beta_1..beta_N]``."""

    N: int
    means: Dict[Tuple[str, str], np.ndarray]
    counts: Dict[Tuple[str, str], int]
    domains: Dict[str, str]
    summary_site: str

    def sites(self) -> List[str]:
        return list(dict.fromkeys(s for s, _ in self.means))

    def datasets(self) -> List[str]:
        return list(dict.fromkeys(d for _, d in self.means))

    def sigma_beta(self, site: str, dataset: str) -> float:
        return float(self.means[(site, dataset)][1:].sum())

    def domain_sigma_beta(self, site: str, domain: str) -> float:
        """Mean of sum(beta) over all eval tokens of every dataset in ``domain``."""
        total = weight = 0.0
        for (s, d), vec in self.means.items():
            if s == site and self.domains.get(d) == domain:
                n = self.counts[(s, d)]
                total += float(vec[1:].sum()) * n
                weight += n
        if weight == 0:
            raise ContractError(f"no {domain} datasets recorded for site {site}")
        return total / weight

    def table(self, site: Optional[str] = None) -> List[Tuple[str, np.ndarray]]:
        """Rows of ``(dataset, [alpha, beta_1..beta_N])`` for one site (default: last-layer FFN)."""
        site = site or self.summary_site
        return [(d, self.means[(site, d)]) for d in self.datasets() if (site, d) in self.means]

    def format_table(self, site: Optional[str] = None, digits: int = 2) -> str:
        site = site or self.summary_site
        header = ["dataset", "alpha"] + [f"beta_{i}" for i in range(1, self.N + 1)]
        lines = [f"site {site}", "  ".join(f"{h:>11}" for h in header)]
        for name, vec in self.table(site):
            lines.append("  ".join([f"{name:>11}"] + [f"{v:>11.{digits}f}" for v in vec]))
        return "\n".join(lines)


def router_stats(
    model: Backbone,
    sites: AdapterSet,
    datasets: Mapping[str, Sequence[TaskSample]],
    batch_size: int = 64,
) -> RouterStats:
    """Average every router's softmax over all non-padding tokens of each dataset."""
    if sites is None or not sites.gated:
        raise ContractError("router statistics need gated adapter sites")
    was_training = sites.training
    sites.eval()
    N = sites.spec.N
    sums: Dict[Tuple[str, str], np.ndarray] = {}
    counts: Dict[Tuple[str, str], int] = {}
    domains: Dict[str, str] = {}
    try:
        with ad.no_grad():
            for name, samples in datasets.items():
                if not samples:
                    raise ContractError(f"dataset {name} is empty")
                domains[name] = samples[0].domain
                for start in range(0, len(samples), batch_size):
                    batch = collate(list(samples[start : start + batch_size]))
                    sites.clear_gates()
                    forward(model, batch.inputs, sites)
                    mask = batch.token_mask
                    for site_id, gate in sites.gates().items():
                        key = (str(site_id), name)
                        vals = gate.full.data[mask].astype(np.float64)
                        sums[key] = sums.get(key, 0.0) + vals.sum(axis=0)
                        counts[key] = counts.get(key, 0) + int(mask.sum())
    finally:
        sites.clear_gates()
        sites.train(was_training)
    means = {k: sums[k] / counts[k] for k in sums}
    last = model.config.n_layers - 1
    summary = str(SiteId(last, "ffn_down"))
    if not any(s == summary for s, _ in means):
        summary = next(iter(means))[0]
    return RouterStats(N, means, counts, domains, summary)


# ---------------------------------------------------------------- running methods
@dataclass
class MethodRun:
    method: str
    seed: int
    row: ForgettingRow
    router: Optional[RouterStats]
    model: Backbone = field(repr=False)
    sites: Optional[AdapterSet] = field(default=None, repr=False)


def run_method(
    method: str,
    backbone: Backbone,
    bench: Bench,
    cfg: TrainConfig,
    adapters: Optional[AdapterSpec] = None,
    replay_set: Optional[Sequence[TaskSample]] = None,
    before: Optional[Dict[str, float]] = None,
    log_every: int = 0,
) -> MethodRun:
    """Adapt a copy of ``backbone`` with one method and score it before and after.

    The input backbone is never modified.
    """
    name = canonical_method(method)
    spec = method_spec(name, adapters)
    if replay_set is None:
        replay_set = make_replay_set(bench, cfg.replay_size, cfg.seed)
    before = before if before is not None else score_all(backbone, None, bench)
    model = copy.deepcopy(backbone)
    sites = adapt(model, spec, bench.ei_train(), replay_set, cfg, log_every=log_every)
    after = score_all(model, sites, bench)
    row = ForgettingRow(
        method=name,
        seed=cfg.seed,
        ei_before={k: before[k] for k in bench.ei},
        ei_after={k: after[k] for k in bench.ei},
        gi_before={k: before[k] for k in bench.gi},
        gi_after={k: after[k] for k in bench.gi},
        metrics={k: f.metric for k, f in bench.families.items()},
    )
    stats = router_stats(model, sites, bench.eval_sets()) if sites is not None and sites.gated else None
    logger.info("%s seed %d: delta_GI %.3f, EI %s", name, cfg.seed, row.delta_GI,
                {k: round(v, 3) for k, v in row.ei_after.items()})
    return MethodRun(name, cfg.seed, row, stats, model, sites)


@dataclass
class ExperimentResult:
    report: ForgettingReport
    runs: Dict[Tuple[str, int], MethodRun]
    backbones: Dict[int, Backbone] = field(repr=False, default_factory=dict)
    before: Dict[int, Dict[str, float]] = field(default_factory=dict)

    def run(self, method: str, seed: int) -> MethodRun:
        return self.runs[(canonical_method(method), seed)]


def run_experiment(
    methods: Iterable[str],
    seeds: Iterable[int],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    sizes: Optional[BenchSizes] = None,
    bench_seed: int = 0,
    adapters: Optional[AdapterSpec] = None,
    backbones: Optional[Mapping[int, Backbone]] = None,
    keep_models: bool = False,
    log_every: int = 0,
) -> ExperimentResult:
    """Pretrain one backbone per seed (unless given) and run every method on it."""
    methods = [canonical_method(m) for m in methods]
    bench = build_bench(bench_seed, sizes, model_cfg.vocab_size)
    result = ExperimentResult(ForgettingReport(), {})
    for seed in seeds:
        seed_cfg = replace(cfg, seed=int(seed))
        if backbones is not None and seed in backbones:
            backbone = backbones[seed]
        else:
            backbone = pretrain_backbone(model_cfg, seed_cfg, bench, log_every=log_every)
        result.backbones[seed] = backbone
        before = score_all(backbone, None, bench)
        result.before[seed] = before
        replay = make_replay_set(bench, seed_cfg.replay_size, seed_cfg.seed)
        for name in methods:
            run = run_method(name, backbone, bench, seed_cfg, adapters, replay, before, log_every)
            if not keep_models:
                run.model, run.sites = None, None
            result.runs[(name, seed)] = run
            result.report.add(run.row)
    return result


# ---------------------------------------------------------------- replay sweep
@dataclass
class SweepRow:
    method: str
    replay_size: int
    seed: int
    gi_before: float
    gi_after: float
    ei_after: Dict[str, float]

    @property
    def delta_GI(self) -> float:
        return self.gi_after - self.gi_before


def replay_size_sweep(
    sizes: Sequence[int],
    backbone: Backbone,
    bench: Bench,
    cfg: TrainConfig,
    methods: Sequence[str] = ("MoEI", "LoRA+Replay"),
    adapters: Optional[AdapterSpec] = None,
    before: Optional[Dict[str, float]] = None,
) -> List[SweepRow]:
    """GI retention and EI metrics of each method for each replay-set size."""
    before = before if before is not None else score_all(backbone, None, bench)
    rows = []
    for size in sizes:
        if int(size) < 0:
            raise ContractError(f"replay size must be >= 0, got {size}")
        size_cfg = replace(cfg, replay_size=int(size))
        replay = make_replay_set(bench, int(size), cfg.seed)
        for method in methods:
            run = run_method(method, backbone, bench, size_cfg, adapters, replay, before)
            rows.append(SweepRow(run.method, int(size), cfg.seed, run.row.gi_before_mean, run.row.gi_after_mean,
                                 dict(run.row.ei_after)))
    return rows


__all__ = [
    "Bench",
    "ExperimentResult",
    "ForgettingReport",
    "ForgettingRow",
    "METHODS",
    "MethodRun",
    "RouterStats",
    "SweepRow",
    "build_bench",
    "make_replay_set",
    "pretrain_backbone",
    "replay_size_sweep",
    "router_stats",
    "run_experiment",
    "run_method",
    "score_all",
]
