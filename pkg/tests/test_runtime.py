"""Dataflow runtime: routing, buffering, drain, counters, both transports."""

import struct
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lshpipe.runtime.engine import (
    Engine,
    EngineOptions,
    PipelineHandlerError,
    PipelineStallError,
)
from lshpipe.runtime import frames
from lshpipe.runtime.graph import (
    DISPATCH_CONCURRENT,
    ROUTE_DIRECT,
    ROUTE_MOD,
    Graph,
    StageDef,
    StageTopology,
    StreamDef,
)


class Recorder:
    """Handler that logs (stream, tag, src-visible payload) in arrival order."""

    def __init__(self, copy_index):
        self.copy_index = copy_index
        self.lock = threading.Lock()
        self.seen = []

    def on_message(self, stream, tag, payload, ctx):
        with self.lock:
            self.seen.append((stream, tag, payload))

    def stats(self):
        return {"seen": len(self.seen)}


class Forwarder:
    """Forwards every payload from stream 'in' to stream 'out' with tag 0."""

    def __init__(self, copy_index):
        self.copy_index = copy_index

    def on_message(self, stream, tag, payload, ctx):
        ctx.send("out", 0, payload)

    def stats(self):
        return {}


class Wedge:
    def __init__(self, copy_index):
        self.copy_index = copy_index

    def on_message(self, stream, tag, payload, ctx):
        time.sleep(60.0)

    def stats(self):
        return {}


class Boom:
    def __init__(self, copy_index):
        self.copy_index = copy_index

    def on_message(self, stream, tag, payload, ctx):
        raise RuntimeError("boom")

    def stats(self):
        return {}


def sink_graph(handler_cls=Recorder, dispatch=DISPATCH_CONCURRENT):
    def build(spec):
        graph = Graph()
        graph.add_stage(StageDef("SRC", source=True))
        graph.add_stage(StageDef("SINK"), handler_cls)
        graph.add_stream(StreamDef("in", "SRC", "SINK", route=ROUTE_MOD, dispatch=dispatch))
        return graph

    return build


def chain_graph(spec):
    graph = Graph()
    graph.add_stage(StageDef("SRC", source=True))
    graph.add_stage(StageDef("MID"), Forwarder)
    graph.add_stage(StageDef("SINK", pin_to_driver=True), Recorder)
    graph.add_stream(StreamDef("in", "SRC", "MID", route=ROUTE_MOD))
    graph.add_stream(StreamDef("out", "MID", "SINK", route=ROUTE_MOD))
    return graph


def pinned_sink_graph(spec):
    graph = Graph()
    graph.add_stage(StageDef("SRC", source=True))
    graph.add_stage(StageDef("SINK", pin_to_driver=True), Recorder)
    graph.add_stream(StreamDef("in", "SRC", "SINK", route=ROUTE_MOD))
    return graph


def topo(**kw):
    copies = {"SRC": 1, "SINK": 1}
    copies.update(kw.pop("copies", {}))
    return StageTopology(copies=copies, **kw)


class TestGraphValidation:
    def test_duplicate_stage(self):
        graph = Graph()
        graph.add_stage(StageDef("A", source=True))
        with pytest.raises(ValueError, match="twice"):
            graph.add_stage(StageDef("A", source=True))

    def test_duplicate_stream(self):
        graph = sink_graph()(None)
        with pytest.raises(ValueError, match="twice"):
            graph.add_stream(StreamDef("in", "SRC", "SINK"))

    def test_minimal_five_stage_graph_runs(self):
        from lshpipe.stages import build_graph, PipelineSpec
        from lshpipe.family import sample_family
        from lshpipe.partition import mod_strategy

        spec = PipelineSpec(sample_family(1, 4, 1, 1, 1.0), mod_strategy())
        graph = build_graph(spec)
        topology = StageTopology(copies={s: 1 for s in graph.stages})
        engine = Engine(lambda s: build_graph(spec), spec, topology)
        with engine:
            engine.drain_barrier()

    def test_zero_copies_rejected(self):
        with pytest.raises(ValueError, match="copy"):
            Engine(sink_graph(), None, topo(copies={"SINK": 0}))

    def test_zero_threads_rejected(self):
        with pytest.raises(ValueError, match="thread"):
            Engine(sink_graph(), None, topo(threads={"SINK": 0}))

    def test_bi_dp_ratio_honored(self):
        from lshpipe.stages import build_graph, PipelineTopology

        st_topo = PipelineTopology(n_bi=2, n_dp=8).stage_topology()
        assert st_topo.copies["DP"] == 4 * st_topo.copies["BI"]


class TestSendRouting:
    def test_equal_tags_same_destination(self):
        with Engine(sink_graph(), None, topo(copies={"SINK": 4})) as engine:
            sender = engine.sender("SRC")
            sender.send("in", 6, b"a")
            sender.send("in", 6, b"b")
            engine.flush_all()
            engine.drain_barrier()
            h2 = engine.local_handler("SINK", 2)
            assert [p for _, _, p in h2.seen] == [b"a", b"b"]

    def test_unknown_stream(self):
        with Engine(sink_graph(), None, topo()) as engine:
            with pytest.raises(ValueError, match="unknown stream"):
                engine.sender("SRC").send("nope", 0, b"")

    def test_direct_route_bounds(self):
        def build(spec):
            graph = Graph()
            graph.add_stage(StageDef("SRC", source=True))
            graph.add_stage(StageDef("SINK"), Recorder)
            graph.add_stream(StreamDef("in", "SRC", "SINK", route=ROUTE_DIRECT))
            return graph

        with Engine(build, None, topo(copies={"SINK": 2})) as engine:
            with pytest.raises(ValueError, match="direct tag"):
                engine.sender("SRC").send("in", 5, b"")

    def test_source_only_streams(self):
        with Engine(sink_graph(), None, topo()) as engine:
            with pytest.raises(ValueError, match="not a source"):
                engine.sender("SINK")


class TestAggregation:
    def test_flush_count_batching(self):
        opts = EngineOptions(flush_count=100, flush_bytes=1 << 30)
        with Engine(sink_graph(), None, topo(), options=opts) as engine:
            sender = engine.sender("SRC")
            for i in range(1000):
                sender.send("in", 0, b"x")
            engine.flush_all()
            engine.drain_barrier()
            c = engine.counters_snapshot().stream("in")
            assert c.logical == 1000
            assert c.transport <= 11  # 10 full batches + at most one tail

    def test_counters_after_sends(self):
        with Engine(sink_graph(), None, topo()) as engine:
            sender = engine.sender("SRC")
            for i in range(40):
                sender.send("in", i, bytes(i))
            engine.flush_all()
            engine.drain_barrier()
            c = engine.counters_snapshot().stream("in")
            assert c.logical == 40
            assert c.bytes == sum(range(40))
            assert c.delivered == 40

    def test_single_flush_of_fifty(self):
        with Engine(sink_graph(), None, topo()) as engine:
            sender = engine.sender("SRC")
            for _ in range(50):
                sender.send("in", 3, b"p")
            engine.flush_all()
            engine.drain_barrier()
            c = engine.counters_snapshot().stream("in")
            assert (c.logical, c.transport) == (50, 1)

    def test_flush_empty_no_transport(self):
        with Engine(sink_graph(), None, topo()) as engine:
            engine.flush_all()
            engine.drain_barrier()
            assert engine.counters_snapshot().stream("in").transport == 0

    def test_single_stream_flush(self):
        with Engine(sink_graph(), None, topo()) as engine:
            engine.sender("SRC").send("in", 0, b"x")
            engine.flush("in")
            engine.drain_barrier()
            assert engine.counters_snapshot().stream("in").delivered == 1
            with pytest.raises(ValueError, match="unknown stream"):
                engine.flush("nope")

    def test_fresh_pipeline_all_zero(self):
        with Engine(sink_graph(), None, topo()) as engine:
            c = engine.counters_snapshot()
            assert c.total_logical == c.total_transport == c.total_bytes == 0


class TestOrdering:
    def test_fifo_within_pair(self):
        with Engine(sink_graph(), None, topo()) as engine:
            sender = engine.sender("SRC")
            for i in range(500):
                sender.send("in", 0, struct.pack("<I", i))
                if i % 37 == 0:
                    engine.flush_all()
            engine.flush_all()
            engine.drain_barrier()
            handler = engine.local_handler("SINK", 0)
            got = [struct.unpack("<I", p)[0] for _, _, p in handler.seen]
            assert got == list(range(500))


class TestDrainBarrier:
    def test_idle_returns_immediately(self):
        with Engine(sink_graph(), None, topo()) as engine:
            t0 = time.perf_counter()
            engine.drain_barrier()
            assert time.perf_counter() - t0 < 1.0

    def test_cascade_drains_through_stages(self):
        topology = StageTopology(copies={"SRC": 1, "MID": 2, "SINK": 1})
        with Engine(chain_graph, None, topology) as engine:
            sender = engine.sender("SRC")
            for i in range(300):
                sender.send("in", i, b"z")
            engine.flush_all()
            engine.drain_barrier()
            sink = engine.local_handler("SINK", 0)
            assert len(sink.seen) == 300
            c = engine.counters_snapshot()
            assert c.stream("in").delivered == 300
            assert c.stream("out").delivered == 300

    def test_wedged_handler_stall_names_stage(self):
        opts = EngineOptions(drain_timeout=1.0)
        with Engine(sink_graph(Wedge), None, topo(), options=opts) as engine:
            engine.sender("SRC").send("in", 0, b"")
            engine.flush_all()
            with pytest.raises(PipelineStallError, match="SINK"):
                engine.drain_barrier()

    def test_handler_exception_surfaces(self):
        with Engine(sink_graph(Boom), None, topo()) as engine:
            engine.sender("SRC").send("in", 0, b"")
            engine.flush_all()
            with pytest.raises(PipelineHandlerError, match="boom"):
                engine.drain_barrier()


class TestFrames:
    def test_envelope_wire_layout(self):
        payload = b"hello"
        data = frames.encode_envelope(3, 0xAABB, 2, 7, payload)
        length, stream_id, tag, src, seq = struct.unpack_from("<IHQIQ", data)
        assert length == 22 + len(payload)
        assert (stream_id, tag, src, seq) == (3, 0xAABB, 2, 7)
        assert data[26:] == payload
        assert data[:4] == struct.pack("<I", length)

    def test_parser_reassembles(self):
        envs = [(1, 10, 0, i, bytes([i] * i)) for i in range(6)]
        blob = frames.encode_batch(envs)
        parser = frames.FrameParser()
        got = parser.feed(blob)
        assert got == envs
        assert parser.pending_bytes == 0

    @given(st.integers(1, 40), st.integers(1, 64))
    @settings(max_examples=60, deadline=None)
    def test_parser_chunked_feed(self, n_envs, chunk):
        envs = [(2, i * 3, 1, i, bytes((i % 7,)) * (i % 11)) for i in range(n_envs)]
        blob = frames.encode_batch(envs)
        parser = frames.FrameParser()
        got = []
        for off in range(0, len(blob), chunk):
            got.extend(parser.feed(blob[off : off + chunk]))
        assert got == envs
        assert parser.pending_bytes == 0


def _collect_sequences(handler):
    return [(s, t, p) for s, t, p in handler.seen]


@pytest.mark.slow
class TestSocketTransport:
    def test_transport_equivalence(self):
        # identical inputs on both transports produce identical per-(src,
        # dst) message sequences
        def run(transport, n_processes):
            topology = StageTopology(
                copies={"SRC": 1, "MID": 2, "SINK": 1}, n_processes=n_processes
            )
            with Engine(chain_graph, None, topology, transport=transport) as engine:
                sender = engine.sender("SRC")
                for i in range(200):
                    sender.send("in", i, struct.pack("<I", i))
                engine.flush_all()
                engine.drain_barrier()
                sink = engine.local_handler("SINK", 0)
                counters = engine.counters_snapshot()
                return sorted(struct.unpack("<I", p)[0] for _, _, p in sink.seen), counters

        local, c_local = run("inproc", 1)
        remote, c_remote = run("socket", 3)
        assert local == remote == list(range(200))
        for stream in ("in", "out"):
            assert c_local.stream(stream).logical == c_remote.stream(stream).logical
            assert c_remote.stream(stream).delivered == c_remote.stream(stream).logical

    def test_socket_fifo_per_pair(self):
        topology = StageTopology(copies={"SRC": 1, "SINK": 1}, n_processes=2)
        # SINK pinned to driver but with a worker process in the mesh; the
        # per-pair sequence check inside dispatch asserts FIFO regardless
        with Engine(pinned_sink_graph, None, topology, transport="socket") as engine:
            sender = engine.sender("SRC")
            for i in range(100):
                sender.send("in", 0, struct.pack("<I", i))
            engine.flush_all()
            engine.drain_barrier()
            got = [struct.unpack("<I", p)[0] for _, _, p in engine.local_handler("SINK", 0).seen]
            assert got == list(range(100))
