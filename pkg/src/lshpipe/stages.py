"""The five pipeline stages and the driver-facing pipeline facade.

Index building: the input reader (IR) partitions objects among data-point
(DP) copies without replication and emits one index entry per (object,
table) to the bucket-index (BI) copies. Search: the query receiver (QR)
computes each query's L x T probes, packs the probes bound for one BI copy
into a single message, and announces the query to its aggregator (AG) copy.
BI copies look up probed buckets, deduplicate candidate ids per query, and
send one candidate list per DP copy involved; DP copies rank their local
candidates and send local top-k lists; the AG merges them into the final
answer once the completion accounting (query start + one report per
contacted BI copy + one local top-k per announced candidate message) adds
up, and forwards it to the collector (CO) in the driver process.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from lshpipe import kernels, messages, ranking
from lshpipe.family import LshFamily, bucket_digests
from lshpipe.partition import PartitionStrategy, ZORDER, obj_map_batch
from lshpipe.probing import query_probes
from lshpipe.ranking import Neighbor
from lshpipe.runtime.engine import Engine, EngineOptions, PipelineStallError
from lshpipe.runtime.graph import (
    DISPATCH_CONCURRENT,
    DISPATCH_SERIAL,
    ROUTE_DIRECT,
    ROUTE_MOD,
    Graph,
    StageDef,
    StageTopology,
    StreamDef,
)
from lshpipe.sequential import SearchParams

IR, QR, BI, DP, AG, CO = "IR", "QR", "BI", "DP", "AG", "CO"

S_STORE = "store"
S_INDEX = "index"
S_QUERY = "query"
S_CANDIDATES = "candidates"
S_LOCAL_TOPK = "local_topk"
S_QUERY_START = "query_start"
S_BI_REPORT = "bi_report"
S_RESULTS = "results"

BUILD_STREAMS = (S_STORE, S_INDEX)
SEARCH_STREAMS = (S_QUERY, S_CANDIDATES, S_LOCAL_TOPK, S_QUERY_START, S_BI_REPORT, S_RESULTS)


class ProtocolError(RuntimeError):
    """Routing contract violated (e.g. a candidate id absent from its DP copy)."""


@dataclass(frozen=True)
class PipelineSpec:
    """Everything a worker process needs to rebuild its stage handlers."""

    family: LshFamily
    strategy: PartitionStrategy


@dataclass(frozen=True)
class PipelineTopology:
    """Copy/thread counts for the five stages plus process placement."""

    n_bi: int = 1
    n_dp: int = 1
    n_ag: int = 1
    n_ir: int = 1
    n_qr: int = 1
    bi_threads: int = 1
    dp_threads: int = 1
    n_processes: int = 1

    def stage_topology(self) -> StageTopology:
        return StageTopology(
            copies={IR: self.n_ir, QR: self.n_qr, BI: self.n_bi, DP: self.n_dp, AG: self.n_ag, CO: 1},
            threads={BI: self.bi_threads, DP: self.dp_threads},
            n_processes=self.n_processes,
        )


@dataclass(frozen=True)
class QueryStats:
    candidates: int
    dp_touched: int
    bi_touched: int


@dataclass(frozen=True)
class QueryResult:
    query_id: int
    neighbors: tuple[Neighbor, ...]
    stats: QueryStats


@dataclass(frozen=True)
class QueryFailure:
    query_id: int
    error: str


class BucketIndexHandler:
    """BI stage copy: bucket store of (obj_id, dp_copy) references."""

    def __init__(self, copy_index: int):
        self.copy_index = copy_index
        self._building: dict[tuple[int, int, int], tuple[list, list]] = {}
        self._frozen: dict[tuple[int, int, int], tuple[np.ndarray, np.ndarray]] | None = None
        self._freeze_lock = threading.Lock()
        self._entries = 0

    def on_message(self, stream: str, tag: int, payload: bytes, ctx) -> None:
        if stream == S_INDEX:
            self._handle_entry(payload)
        elif stream == S_QUERY:
            self._handle_query(payload, ctx)
        else:
            raise ProtocolError(f"BI received unexpected stream {stream!r}")

    def _handle_entry(self, payload: bytes) -> None:
        route, fp, obj_id, table, dp_copy = messages.unpack_index_entry(payload)
        key = (table, route, fp)
        bucket = self._building.get(key)
        if bucket is None:
            bucket = ([], [])
            self._building[key] = bucket
        bucket[0].append(obj_id)
        bucket[1].append(dp_copy)
        self._entries += 1
        self._frozen = None

    def _freeze(self) -> dict:
        frozen = self._frozen
        if frozen is not None:
            return frozen
        with self._freeze_lock:
            if self._frozen is None:
                # Canonical ascending-id order inside every bucket, matching
                # the sequential index, so candidate caps truncate alike.
                out = {}
                for key, (ids, dps) in self._building.items():
                    ids_a = np.array(ids, dtype=np.int64)
                    dps_a = np.array(dps, dtype=np.int64)
                    order = np.argsort(ids_a)
                    out[key] = (ids_a[order], dps_a[order])
                self._frozen = out
            return self._frozen

    def _handle_query(self, payload: bytes, ctx) -> None:
        query_id, k, cap, coords, probes = messages.unpack_query_probes(payload)
        buckets = self._freeze()
        hits = []
        for p in probes:
            found = buckets.get((int(p["table"]), int(p["route"]), int(p["fp"])))
            if found is not None:
                hits.append(found)
        if not hits:
            ctx.send(S_BI_REPORT, query_id, messages.pack_bi_report(query_id, 0, 0))
            return
        if cap is None:
            if len(hits) == 1:
                # one probed bucket: entries are unique (one per object and
                # table) and already frozen in ascending-id order
                uniq_ids, uniq_dps = hits[0]
            else:
                ids_all = np.concatenate([h[0] for h in hits])
                dps_all = np.concatenate([h[1] for h in hits])
                uniq_ids, first = np.unique(ids_all, return_index=True)
                uniq_dps = dps_all[first]
            order = np.argsort(uniq_dps, kind="stable")
            sorted_dps = uniq_dps[order]
            sorted_ids = uniq_ids[order]
            bounds = np.flatnonzero(np.diff(sorted_dps)) + 1
            groups = np.split(sorted_ids, bounds)
            dp_values = sorted_dps[np.concatenate(([0], bounds))] if len(sorted_dps) else []
            total = int(uniq_ids.shape[0])
        else:
            # Probe-rank order with the cap applied across probes, mirroring
            # the sequential gather exactly (bit-identical when one BI copy
            # serves the whole query).
            seen: set[int] = set()
            per_dp: dict[int, list[int]] = {}
            total = 0
            done = False
            for h_ids, h_dps in hits:
                for obj, dpc in zip(h_ids, h_dps):
                    obj = int(obj)
                    if obj in seen:
                        continue
                    seen.add(obj)
                    per_dp.setdefault(int(dpc), []).append(obj)
                    total += 1
                    if total >= cap:
                        done = True
                        break
                if done:
                    break
            dp_values = sorted(per_dp)
            groups = [np.array(per_dp[dpc], dtype=np.int64) for dpc in dp_values]
        for dpc, group in zip(dp_values, groups):
            ctx.send(
                S_CANDIDATES, int(dpc), messages.pack_candidates(query_id, k, coords, group)
            )
        ctx.send(S_BI_REPORT, query_id, messages.pack_bi_report(query_id, len(groups), total))

    def stats(self) -> dict:
        return {"stage": BI, "buckets": len(self._building), "entries": self._entries}


class DataPointsHandler:
    """DP stage copy: the only holder of its objects' coordinates."""

    def __init__(self, copy_index: int):
        self.copy_index = copy_index
        self._ids: list[int] = []
        self._rows: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None
        self._row_of: np.ndarray | None = None
        self._freeze_lock = threading.Lock()

    def on_message(self, stream: str, tag: int, payload: bytes, ctx) -> None:
        if stream == S_STORE:
            obj_id, coords = messages.unpack_store(payload)
            self._ids.append(obj_id)
            self._rows.append(coords)
            self._matrix = None
        elif stream == S_CANDIDATES:
            self._handle_candidates(payload, ctx)
        else:
            raise ProtocolError(f"DP received unexpected stream {stream!r}")

    def _freeze(self) -> tuple[np.ndarray, np.ndarray]:
        if self._matrix is None:
            with self._freeze_lock:
                if self._matrix is None:
                    ids = np.array(self._ids, dtype=np.int64)
                    max_id = int(ids.max()) if ids.size else -1
                    row_of = np.full(max_id + 1, -1, dtype=np.int64)
                    row_of[ids] = np.arange(ids.shape[0])
                    self._row_of = row_of
                    self._matrix = (
                        np.stack(self._rows) if self._rows else np.empty((0, 0), dtype=np.float32)
                    )
        return self._matrix, self._row_of

    def _handle_candidates(self, payload: bytes, ctx) -> None:
        query_id, k, coords, obj_ids = messages.unpack_candidates(payload)
        matrix, row_of = self._freeze()
        ids = obj_ids.view(np.int64)  # ids < 2^63; zero-copy reinterpret
        if ids.size == 0:
            return
        if row_of.shape[0] == 0 or ids.max() >= row_of.shape[0]:
            raise ProtocolError(
                f"DP copy {self.copy_index} asked for object it does not store "
                f"(query {query_id}); routing bug"
            )
        rows = row_of[ids]
        if (rows < 0).any():
            missing = ids[rows < 0][:5].tolist()
            raise ProtocolError(
                f"DP copy {self.copy_index} missing objects {missing} for query {query_id}; "
                "routing bug"
            )
        top_ids, top_dists = kernels.local_topk(matrix, rows, ids, coords, k)
        ctx.send(
            S_LOCAL_TOPK,
            query_id,
            messages.pack_local_topk(query_id, self.copy_index, top_ids, top_dists),
        )

    def stats(self) -> dict:
        return {"stage": DP, "objects": len(self._ids)}


class _QueryAccumulator:
    __slots__ = ("n_bi", "k", "bi_reports", "expected_topk", "got_topk", "ids", "dists", "dp_copies", "candidates")

    def __init__(self):
        self.n_bi = None
        self.k = None
        self.bi_reports = 0
        self.expected_topk = 0
        self.got_topk = 0
        self.ids: list[np.ndarray] = []
        self.dists: list[np.ndarray] = []
        self.dp_copies: set[int] = set()
        self.candidates = 0

    @property
    def complete(self) -> bool:
        return self.n_bi is not None and self.bi_reports == self.n_bi and self.got_topk == self.expected_topk


class AggregatorHandler:
    """AG stage copy: per-query reduction with counter-based completion."""

    def __init__(self, copy_index: int):
        self.copy_index = copy_index
        self._pending: dict[int, _QueryAccumulator] = {}
        self._completed = 0

    def on_message(self, stream: str, tag: int, payload: bytes, ctx) -> None:
        if stream == S_QUERY_START:
            query_id, n_bi, k = messages.unpack_query_start(payload)
            if n_bi < 1:
                raise ValueError(f"query {query_id} announced zero contacted BI copies")
            acc = self._acc(query_id)
            acc.n_bi = n_bi
            acc.k = k
        elif stream == S_BI_REPORT:
            query_id, n_msgs, n_cands = messages.unpack_bi_report(payload)
            acc = self._acc(query_id)
            acc.bi_reports += 1
            acc.expected_topk += n_msgs
            acc.candidates += n_cands
        elif stream == S_LOCAL_TOPK:
            query_id, dp_copy, ids, dists = messages.unpack_local_topk(payload)
            acc = self._acc(query_id)
            acc.got_topk += 1
            acc.dp_copies.add(dp_copy)
            acc.ids.append(ids)
            acc.dists.append(dists)
        else:
            raise ProtocolError(f"AG received unexpected stream {stream!r}")
        acc = self._pending.get(tag)
        if acc is not None and acc.complete:
            self._finalize(tag, acc, ctx)

    def _acc(self, query_id: int) -> _QueryAccumulator:
        acc = self._pending.get(query_id)
        if acc is None:
            acc = _QueryAccumulator()
            self._pending[query_id] = acc
        return acc

    def _finalize(self, query_id: int, acc: _QueryAccumulator, ctx) -> None:
        del self._pending[query_id]
        self._completed += 1
        if acc.ids:
            merged = [
                Neighbor(int(i), float(d))
                for ids, dists in zip(acc.ids, acc.dists)
                for i, d in zip(ids, dists)
            ]
            best = ranking.top_k(merged, acc.k)
        else:
            best = []
        payload = messages.pack_result(
            query_id,
            [n.obj_id for n in best],
            [n.dist_sq for n in best],
            bi_touched=acc.n_bi,
            dp_touched=len(acc.dp_copies),
            candidates=acc.candidates,
        )
        ctx.send(S_RESULTS, query_id, payload)

    def stats(self) -> dict:
        return {
            "stage": AG,
            "pending": len(self._pending),
            "pending_queries": sorted(self._pending)[:32],
            "completed": self._completed,
        }


class CollectorHandler:
    """CO stage copy in the driver process: gathers final query results."""

    def __init__(self, copy_index: int):
        self.copy_index = copy_index
        self._lock = threading.Lock()
        self._arrived = threading.Condition(self._lock)
        self._results: dict[int, QueryResult] = {}

    def on_message(self, stream: str, tag: int, payload: bytes, ctx) -> None:
        query_id, ids, dists, bi_touched, dp_touched, candidates = messages.unpack_result(payload)
        neighbors = tuple(Neighbor(int(i), float(d)) for i, d in zip(ids, dists))
        result = QueryResult(
            query_id=query_id,
            neighbors=neighbors,
            stats=QueryStats(candidates=candidates, dp_touched=dp_touched, bi_touched=bi_touched),
        )
        with self._lock:
            self._results[query_id] = result
            self._arrived.notify_all()

    def count(self) -> int:
        with self._lock:
            return len(self._results)

    def wait_for(self, query_ids, timeout: float) -> dict[int, QueryResult]:
        deadline = time.monotonic() + timeout
        wanted = set(query_ids)
        with self._lock:
            while not wanted.issubset(self._results):
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                self._arrived.wait(min(remaining, 0.2))
            return {qid: self._results[qid] for qid in wanted if qid in self._results}

    def pop_all(self) -> dict[int, QueryResult]:
        with self._lock:
            out = self._results
            self._results = {}
            return out

    def stats(self) -> dict:
        with self._lock:
            return {"stage": CO, "results": len(self._results)}


def build_graph(spec: PipelineSpec) -> Graph:
    """Assemble the five-stage graph; module-level so workers can rebuild it."""
    graph = Graph()
    graph.add_stage(StageDef(IR, source=True))
    graph.add_stage(StageDef(QR, source=True))
    graph.add_stage(StageDef(BI), BucketIndexHandler)
    graph.add_stage(StageDef(DP), DataPointsHandler)
    graph.add_stage(StageDef(AG), AggregatorHandler)
    graph.add_stage(StageDef(CO, pin_to_driver=True), CollectorHandler)
    graph.add_stream(StreamDef(S_STORE, IR, DP, route=ROUTE_DIRECT, dispatch=DISPATCH_SERIAL))
    graph.add_stream(StreamDef(S_INDEX, IR, BI, route=ROUTE_MOD, dispatch=DISPATCH_SERIAL))
    graph.add_stream(StreamDef(S_QUERY, QR, BI, route=ROUTE_DIRECT, dispatch=DISPATCH_CONCURRENT))
    graph.add_stream(StreamDef(S_CANDIDATES, BI, DP, route=ROUTE_DIRECT, dispatch=DISPATCH_CONCURRENT))
    graph.add_stream(StreamDef(S_LOCAL_TOPK, DP, AG, route=ROUTE_MOD, dispatch=DISPATCH_SERIAL))
    graph.add_stream(StreamDef(S_QUERY_START, QR, AG, route=ROUTE_MOD, dispatch=DISPATCH_SERIAL))
    graph.add_stream(StreamDef(S_BI_REPORT, BI, AG, route=ROUTE_MOD, dispatch=DISPATCH_SERIAL))
    graph.add_stream(StreamDef(S_RESULTS, AG, CO, route=ROUTE_MOD, dispatch=DISPATCH_SERIAL))
    return graph


class LshPipeline:
    """Driver facade: build the distributed index, then run query batches."""

    def __init__(
        self,
        family: LshFamily,
        strategy: PartitionStrategy,
        topology: PipelineTopology,
        *,
        transport: str = "inproc",
        options: EngineOptions | None = None,
        search_timeout: float = 120.0,
    ):
        if strategy.kind == ZORDER and strategy.zorder_ranges is not None:
            if strategy.zorder_ranges.shape[0] != topology.n_dp - 1:
                raise ValueError(
                    f"zorder ranges target {strategy.zorder_ranges.shape[0] + 1} DP copies, "
                    f"topology has {topology.n_dp}"
                )
        self.family = family
        self.strategy = strategy
        self.topology = topology
        self.search_timeout = search_timeout
        self.spec = PipelineSpec(family=family, strategy=strategy)
        self.engine = Engine(
            build_graph,
            self.spec,
            topology.stage_topology(),
            transport=transport,
            options=options,
        )
        self.engine.start()
        self._next_query_id = 0
        self.ingest_rejects = 0

    # -- index building ------------------------------------------------------

    def ingest(self, dataset, batch_size: int = 1024, ir_copy: int = 0) -> int:
        """Send store + index-entry messages for every object; returns count.

        Objects whose dimension does not match the family are rejected and
        tallied in ``ingest_rejects``.
        """
        sender = self.engine.sender(IR, ir_copy)
        ids = np.asarray(dataset.ids, dtype=np.int64)
        coords = dataset.coords
        if coords.shape[1] != self.family.d:
            self.ingest_rejects += ids.shape[0]
            return 0
        n_dp, n_l = self.topology.n_dp, self.family.L
        sent = 0
        for start in range(0, ids.shape[0], batch_size):
            stop = min(start + batch_size, ids.shape[0])
            chunk_ids = ids[start:stop]
            chunk = np.ascontiguousarray(coords[start:stop], dtype=np.float32)
            dp = obj_map_batch(self.strategy, chunk_ids, chunk, n_dp)
            _, routes, fps = bucket_digests(self.family, chunk)
            store_pairs = []
            index_pairs = []
            for i in range(chunk_ids.shape[0]):
                obj = int(chunk_ids[i])
                dpc = int(dp[i])
                store_pairs.append((dpc, messages.pack_store(obj, chunk[i])))
                for t in range(n_l):
                    route = int(routes[i, t])
                    index_pairs.append(
                        (route, messages.pack_index_entry(route, int(fps[i, t]), obj, t, dpc))
                    )
                sent += 1
            # every object's store message precedes its index entries
            sender.send_many(S_STORE, store_pairs)
            sender.send_many(S_INDEX, index_pairs)
        return sent

    def build(self, dataset, batch_size: int = 1024) -> float:
        """Ingest and drain; returns the build wall time in seconds."""
        t0 = time.perf_counter()
        self.ingest(dataset, batch_size=batch_size)
        self.engine.flush_all()
        self.engine.drain_barrier()
        return time.perf_counter() - t0

    # -- search ----------------------------------------------------------------

    def submit_query(self, coords, params: SearchParams, qr_copy: int = 0) -> int:
        """QR stage: probe computation, per-BI packing, completion announce."""
        sender = self.engine.sender(QR, qr_copy)
        query_id = self._next_query_id
        self._next_query_id += 1
        probes = query_probes(self.family, coords, params.T)
        n_bi = self.topology.n_bi
        groups: dict[int, list[tuple[int, int, int, int]]] = {}
        for rank, key in enumerate(probes):
            copy = key.route_hash % n_bi
            groups.setdefault(copy, []).append((key.route_hash, key.fingerprint, key.table, rank))
        coords32 = np.ascontiguousarray(coords, dtype=np.float32)
        for copy in sorted(groups):
            probe_arr = np.array(groups[copy], dtype=messages.PROBE_DTYPE)
            sender.send(
                S_QUERY,
                copy,
                messages.pack_query_probes(
                    query_id, params.k, params.candidate_cap, coords32, probe_arr
                ),
            )
        sender.send(
            S_QUERY_START, query_id, messages.pack_query_start(query_id, len(groups), params.k)
        )
        return query_id

    def search_batch(self, queries, params: SearchParams):
        """Run a query batch; returns (results in submission order, counter delta).

        Completion is awaited through the drain barrier: once the pipeline is
        quiescent every completed query's result has reached the collector.
        A query missing after a stalled drain yields a QueryFailure naming
        the missing contributions; other queries are unaffected.
        """
        before = self.engine.counters_snapshot()
        query_ids = [
            self.submit_query(np.ascontiguousarray(q, dtype=np.float32), params)
            for q in np.asarray(queries.coords if hasattr(queries, "coords") else queries)
        ]
        self.engine.flush_all()
        stall: str | None = None
        try:
            self.engine.drain_barrier(timeout=self.search_timeout)
        except PipelineStallError as exc:
            stall = str(exc)
        collector: CollectorHandler = self.engine.local_handler(CO, 0)
        collected = collector.wait_for(query_ids, timeout=1.0 if stall else 10.0)
        missing = [qid for qid in query_ids if qid not in collected]
        results_map: dict[int, QueryResult | QueryFailure] = dict(collected)
        if missing:
            diag = self._missing_diagnostics(missing)
            for qid in missing:
                reason = diag.get(qid, "incomplete")
                if stall:
                    reason = f"{reason}; {stall}"
                results_map[qid] = QueryFailure(qid, reason)
        results = [results_map[qid] for qid in query_ids]
        delta = self.engine.counters_snapshot().delta(before)
        return results, delta

    def _missing_diagnostics(self, missing) -> dict[int, str]:
        out: dict[int, str] = {}
        try:
            stats = self.engine.stage_stats()
        except Exception as exc:  # diagnostics best-effort
            return {qid: f"query incomplete; stats unavailable: {exc}" for qid in missing}
        pending = {
            qid
            for (stage, _), s in stats.items()
            if stage == AG
            for qid in s.get("pending_queries", [])
        }
        for qid in missing:
            state = "awaiting BI/DP contributions" if qid in pending else "never reached its aggregator"
            out[qid] = f"query {qid} timed out: {state}"
        return out

    # -- introspection ---------------------------------------------------------

    def dp_object_counts(self) -> np.ndarray:
        stats = self.engine.stage_stats()
        counts = np.zeros(self.topology.n_dp, dtype=np.int64)
        for (stage, copy), s in stats.items():
            if stage == DP:
                counts[copy] = s["objects"]
        return counts

    def index_entry_count(self) -> int:
        return sum(
            s["entries"] for (stage, _), s in self.engine.stage_stats().items() if stage == BI
        )

    def counters_snapshot(self):
        return self.engine.counters_snapshot()

    def close(self) -> None:
        self.engine.close()

    def __enter__(self) -> "LshPipeline":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
