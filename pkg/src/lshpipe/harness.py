"""Experiment harness: configs, single runs, parameter sweeps, reports.

A run builds the distributed index, drains, executes the query batch,
computes recall against ground truth (loaded or brute-forced) and emits a
report embedding the resolved config verbatim, per-query result ids, and
the true ids, so recall can be recomputed offline from the persisted file.
Wall-clock numbers at desk scale are directional only and labeled as such.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
import uuid
from dataclasses import dataclass, field

import numpy as np

from lshpipe import partition
from lshpipe.dataio import VectorSet, read_vectors
from lshpipe.family import sample_family, tune_width
from lshpipe.partition import PartitionStrategy, census_from_counts
from lshpipe.runtime.engine import EngineOptions
from lshpipe.sequential import SearchParams
from lshpipe.stages import LshPipeline, PipelineTopology, QueryFailure
from lshpipe.synthetic import gen_synthetic
from lshpipe.truth import GroundTruth, brute_force_knn, load_ground_truth

CSV_COLUMNS = [
    "run_id",
    "L",
    "M",
    "T",
    "strategy",
    "n_bi",
    "n_dp",
    "recall",
    "build_s",
    "search_s",
    "logical_msgs",
    "transport_msgs",
    "bytes",
    "imbalance_pct",
    "mean_dp_touched",
]

TIMING_NOTE = (
    "wall-clock figures are desk-scale and directional only; "
    "the throughput criterion is a same-box proxy, not a cluster measurement"
)


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 1
    n_points: int = 100_000
    d: int = 128
    n_clusters: int = 8
    spread: float = 8.0
    n_queries: int = 1000
    query_noise: float | None = None


@dataclass(frozen=True)
class DataConfig:
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    base_path: str | None = None
    query_path: str | None = None
    truth_path: str | None = None
    base_count: int | None = None
    query_count: int | None = None


@dataclass(frozen=True)
class FamilyConfig:
    seed: int = 1
    L: int = 6
    M: int = 32
    w: float | None = None  # None: tuned from a data sample


@dataclass(frozen=True)
class SearchConfig:
    k: int = 10
    T: int = 4
    candidate_cap: int | None = None

    def params(self) -> SearchParams:
        return SearchParams(k=self.k, T=self.T, candidate_cap=self.candidate_cap)


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = partition.MOD
    map_seed: int = 0x5A17
    map_w: float | None = None  # None: same tuning helper as the family
    map_functions: int = partition.DEFAULT_MAP_FUNCTIONS
    zorder_bits: int = partition.DEFAULT_ZORDER_BITS
    sample_size: int = 1000


@dataclass(frozen=True)
class TopologyConfig:
    n_bi: int = 2
    n_dp: int = 8
    n_ag: int = 1
    bi_threads: int = 1
    dp_threads: int = 2
    n_processes: int = 1
    transport: str = "inproc"

    def pipeline_topology(self) -> PipelineTopology:
        return PipelineTopology(
            n_bi=self.n_bi,
            n_dp=self.n_dp,
            n_ag=self.n_ag,
            bi_threads=self.bi_threads,
            dp_threads=self.dp_threads,
            n_processes=self.n_processes,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    family: FamilyConfig = field(default_factory=FamilyConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    flush_count: int = 256
    flush_bytes: int = 65536
    run_id: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        data = dict(raw.get("data") or {})
        if data.get("synthetic") is not None:
            data["synthetic"] = SyntheticSpec(**data["synthetic"])
        return cls(
            data=DataConfig(**data),
            family=FamilyConfig(**(raw.get("family") or {})),
            search=SearchConfig(**(raw.get("search") or {})),
            strategy=StrategyConfig(**(raw.get("strategy") or {})),
            topology=TopologyConfig(**(raw.get("topology") or {})),
            flush_count=raw.get("flush_count", 256),
            flush_bytes=raw.get("flush_bytes", 65536),
            run_id=raw.get("run_id"),
        )

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class ExperimentReport:
    run_id: str
    config: dict
    ok: bool = True
    error: str | None = None
    recall: float = 0.0
    build_s: float = 0.0
    search_s: float = 0.0
    counters_build: dict = field(default_factory=dict)
    counters_search: dict = field(default_factory=dict)
    counters_total: dict = field(default_factory=dict)
    census_counts: list = field(default_factory=list)
    imbalance_pct: float = 0.0
    mean_dp_touched: float = 0.0
    mean_bi_touched: float = 0.0
    mean_candidates: float = 0.0
    result_ids: list = field(default_factory=list)
    truth_ids: list = field(default_factory=list)
    notes: str = TIMING_NOTE

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        return cls(**json.loads(text))

    def _counter_totals(self) -> tuple[int, int, int]:
        logical = sum(s["logical"] for s in self.counters_total.values())
        transport = sum(s["transport"] for s in self.counters_total.values())
        nbytes = sum(s["bytes"] for s in self.counters_total.values())
        return logical, transport, nbytes

    def csv_row(self) -> list:
        cfg = self.config
        logical, transport, nbytes = self._counter_totals()
        return [
            self.run_id,
            cfg["family"]["L"],
            cfg["family"]["M"],
            cfg["search"]["T"],
            cfg["strategy"]["kind"],
            cfg["topology"]["n_bi"],
            cfg["topology"]["n_dp"],
            f"{self.recall:.4f}",
            f"{self.build_s:.3f}",
            f"{self.search_s:.3f}",
            logical,
            transport,
            nbytes,
            f"{self.imbalance_pct:.3f}",
            f"{self.mean_dp_touched:.3f}",
        ]

    def render_text(self) -> str:
        logical, transport, nbytes = self._counter_totals()
        lines = [
            f"run {self.run_id}: {'ok' if self.ok else 'FAILED'}",
            f"  recall@{self.config['search']['k']}: {self.recall:.4f}",
            f"  build {self.build_s:.3f}s  search {self.search_s:.3f}s  ({self.notes})",
            f"  messages: logical={logical} transport={transport} payload_bytes={nbytes}",
            f"  census: {self.census_counts} imbalance={self.imbalance_pct:.3f}%",
            f"  per-query means: candidates={self.mean_candidates:.1f} "
            f"dp_touched={self.mean_dp_touched:.2f} bi_touched={self.mean_bi_touched:.2f}",
        ]
        if self.error:
            lines.append(f"  error: {self.error}")
        return "\n".join(lines)


def recall_at_k(results, truth: GroundTruth, k: int) -> float:
    """Mean over queries of |returned ids  ∩ true top-k ids| / k."""
    if len(results) != len(truth):
        raise ValueError(f"{len(results)} results vs {len(truth)} truth rows")
    if truth.k < k:
        raise ValueError(f"truth lists hold {truth.k} ids, need >= {k}")
    total = 0.0
    for row, res in zip(truth.ids, results):
        if isinstance(res, QueryFailure):
            continue
        returned = {n.obj_id for n in res.neighbors} if hasattr(res, "neighbors") else {
            n.obj_id for n in res
        }
        total += len(returned & set(int(i) for i in row[:k])) / k
    return total / len(results)


def load_dataset(config: DataConfig) -> tuple[VectorSet, VectorSet, GroundTruth | None]:
    """Reference set, query set, and ground truth when configured."""
    if config.base_path is not None:
        base = read_vectors(config.base_path, stop=config.base_count)
        if config.query_path is None:
            raise ValueError("base_path set without query_path")
        queries = read_vectors(config.query_path, stop=config.query_count)
    elif config.synthetic is not None:
        spec = config.synthetic
        base, queries = gen_synthetic(
            spec.seed,
            spec.n_points,
            spec.d,
            spec.n_clusters,
            spec.spread,
            n_queries=spec.n_queries,
            query_noise=spec.query_noise,
        )
    else:
        raise ValueError("config names neither files nor a synthetic spec")
    truth = load_ground_truth(config.truth_path) if config.truth_path else None
    return base, queries, truth


def resolve_family(config: FamilyConfig, base: VectorSet):
    w = config.w if config.w is not None else tune_width(base.coords, seed=config.seed)
    return sample_family(config.seed, base.d, config.L, config.M, w)


def resolve_strategy(config: StrategyConfig, base: VectorSet, n_dp: int) -> PartitionStrategy:
    if config.kind == partition.MOD:
        return partition.mod_strategy()
    rng = np.random.default_rng(config.map_seed)
    size = min(config.sample_size, len(base))
    sample = base.coords[rng.choice(len(base), size=size, replace=False)]
    if config.kind == partition.ZORDER:
        return partition.build_zorder_ranges(sample, n_dp, bits=config.zorder_bits)
    if config.kind == partition.LSHMAP:
        # Default mapping width is the raw mean NN distance (factor 1), a
        # finer grain than the index width, so every partition aggregates
        # many cells and stays balanced.
        w = (
            config.map_w
            if config.map_w is not None
            else tune_width(base.coords, seed=config.map_seed, factor=1.0)
        )
        return partition.lshmap_strategy(config.map_seed, base.d, w, n_functions=config.map_functions)
    raise ValueError(f"unknown strategy kind {config.kind!r}")


def run_experiment(
    config: ExperimentConfig,
    preloaded: tuple[VectorSet, VectorSet, GroundTruth] | None = None,
) -> ExperimentReport:
    run_id = config.run_id or uuid.uuid4().hex[:10]
    report = ExperimentReport(run_id=run_id, config=config.to_dict())
    try:
        if preloaded is not None:
            base, queries, truth = preloaded
        else:
            base, queries, truth = load_dataset(config.data)
        params = config.search.params()
        if truth is None:
            truth = brute_force_knn(base, queries, params.k)
        family = resolve_family(config.family, base)
        strategy = resolve_strategy(config.strategy, base, config.topology.n_dp)
        report.config["family"]["w"] = family.w  # resolved value for provenance

        options = EngineOptions(flush_count=config.flush_count, flush_bytes=config.flush_bytes)
        pipe = LshPipeline(
            family,
            strategy,
            config.topology.pipeline_topology(),
            transport=config.topology.transport,
            options=options,
        )
        try:
            report.build_s = pipe.build(base)
            report.counters_build = pipe.counters_snapshot().as_dict()
            cens = census_from_counts(pipe.dp_object_counts())
            report.census_counts = cens.counts.tolist()
            report.imbalance_pct = cens.imbalance_pct

            t0 = time.perf_counter()
            results, delta = pipe.search_batch(queries, params)
            report.search_s = time.perf_counter() - t0
            report.counters_search = delta.as_dict()
            report.counters_total = pipe.counters_snapshot().as_dict()
        finally:
            pipe.close()

        failures = [r for r in results if isinstance(r, QueryFailure)]
        if failures:
            report.ok = False
            report.error = f"{len(failures)} queries failed; first: {failures[0].error}"
        good = [r for r in results if not isinstance(r, QueryFailure)]
        if good:
            report.mean_dp_touched = float(np.mean([r.stats.dp_touched for r in good]))
            report.mean_bi_touched = float(np.mean([r.stats.bi_touched for r in good]))
            report.mean_candidates = float(np.mean([r.stats.candidates for r in good]))
        report.recall = recall_at_k(results, truth, params.k)
        report.result_ids = [
            [] if isinstance(r, QueryFailure) else [n.obj_id for n in r.neighbors] for r in results
        ]
        report.truth_ids = truth.ids[:, : params.k].tolist()
    except Exception as exc:
        report.ok = False
        report.error = f"{type(exc).__name__}: {exc}"
    return report


_SWEEP_AXES = ("L", "M", "T", "strategy", "topology")


def _apply_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "L":
        return dataclasses.replace(config, family=dataclasses.replace(config.family, L=int(value)))
    if axis == "M":
        return dataclasses.replace(config, family=dataclasses.replace(config.family, M=int(value)))
    if axis == "T":
        return dataclasses.replace(config, search=dataclasses.replace(config.search, T=int(value)))
    if axis == "strategy":
        return dataclasses.replace(
            config, strategy=dataclasses.replace(config.strategy, kind=str(value))
        )
    if axis == "topology":
        n_bi, n_dp = value
        return dataclasses.replace(
            config, topology=dataclasses.replace(config.topology, n_bi=int(n_bi), n_dp=int(n_dp))
        )
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {_SWEEP_AXES}")


def sweep(config: ExperimentConfig, axis: str, values) -> list[ExperimentReport]:
    """One run per value with a shared dataset and ground truth."""
    base, queries, truth = load_dataset(config.data)
    if truth is None:
        truth = brute_force_knn(base, queries, config.search.k)
    reports = []
    for i, value in enumerate(values):
        run_cfg = _apply_axis(config, axis, value)
        run_cfg = dataclasses.replace(
            run_cfg, run_id=f"{config.run_id or 'sweep'}-{axis}{value if not isinstance(value, tuple) else 'x'.join(map(str, value))}"
        )
        reports.append(run_experiment(run_cfg, preloaded=(base, queries, truth)))
    return reports


def write_report(report: ExperimentReport, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")


def append_csv(reports, path: str) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a") as fh:
        if new:
            fh.write(",".join(CSV_COLUMNS) + "\n")
        for report in reports if isinstance(reports, (list, tuple)) else [reports]:
            fh.write(",".join(str(v) for v in report.csv_row()) + "\n")


def recompute_recall(report: ExperimentReport) -> float:
    """Offline recall from the persisted result and truth id lists."""
    k = report.config["search"]["k"]
    total = 0.0
    for returned, true in zip(report.result_ids, report.truth_ids):
        total += len(set(returned) & set(true[:k])) / k
    return total / max(len(report.truth_ids), 1)
