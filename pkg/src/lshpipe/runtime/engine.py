"""Dataflow engine: stage copies, tag routing, buffering, drain barrier.

One ProcessNode hosts the stage copies placed in the current OS process.
Sends append to per-(stream, destination copy) buffers that flush as one
transport message when they reach the byte/count thresholds, at phase
boundaries, and on explicit request. Delivery is asynchronous; senders never
wait on the receiver's processing, but block when a bounded inbox is full.

The in-process transport dispatches flushed batches straight into local
inboxes; the socket transport (see socketmode) moves the same frames over
TCP between processes. Handler-observed message sequences per (source copy,
destination copy, stream) are FIFO on both.
"""

from __future__ import annotations

import itertools
import threading
import time
import traceback
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from lshpipe.runtime import frames
from lshpipe.runtime.counters import CounterBoard, TrafficCounters
from lshpipe.runtime.frames import PAYLOAD, SEQ, SRC, STREAM, TAG
from lshpipe.runtime.graph import (
    DISPATCH_SERIAL,
    ROUTE_DIRECT,
    Graph,
    StageTopology,
)


class PipelineStallError(RuntimeError):
    """Drain barrier timed out; message carries per-stage queue diagnostics."""


class PipelineHandlerError(RuntimeError):
    """A stage handler raised; message carries the first recorded traceback."""


@dataclass(frozen=True)
class EngineOptions:
    flush_count: int = 256
    flush_bytes: int = 65536
    inbox_cap: int = 1 << 16
    drain_timeout: float = 120.0
    poll_interval: float = 0.002
    socket_host: str = "127.0.0.1"
    rpc_timeout: float = 60.0


@dataclass
class ProcState:
    """Picklable quiescence snapshot of one process."""

    counters: TrafficCounters
    depths: dict = field(default_factory=dict)  # (stage, copy) -> queued + in-flight
    buffers_empty: bool = True
    errors: list = field(default_factory=list)


class _Inbox:
    """Bounded envelope queue; producers block while over capacity."""

    def __init__(self, cap: int):
        self._cap = cap
        self._batches: deque[list] = deque()
        self._count = 0
        self._lock = threading.Lock()
        self._nonempty = threading.Condition(self._lock)
        self._nonfull = threading.Condition(self._lock)
        self._closed = False

    def put(self, envelopes: list) -> None:
        with self._lock:
            while self._count + len(envelopes) > self._cap and not self._closed:
                self._nonfull.wait(0.1)
            if self._closed:
                return
            self._batches.append(envelopes)
            self._count += len(envelopes)
            self._nonempty.notify()

    def get(self) -> list | None:
        with self._lock:
            while not self._batches and not self._closed:
                self._nonempty.wait()
            if not self._batches:
                return None
            batch = self._batches.popleft()
            self._count -= len(batch)
            self._nonfull.notify_all()
            return batch

    def close(self) -> None:
        with self._lock:
            self._closed = True
            self._nonempty.notify_all()
            self._nonfull.notify_all()

    @property
    def count(self) -> int:
        with self._lock:
            return self._count


class HandlerContext:
    """What a handler sees: its identity plus a non-blocking send."""

    def __init__(self, node: "ProcessNode", stage: str, copy_index: int):
        self._node = node
        self.stage = stage
        self.copy_index = copy_index

    def send(self, stream: str, tag: int, payload: bytes) -> None:
        self._node.send_from(self.stage, self.copy_index, stream, tag, payload)

    def n_copies(self, stage: str) -> int:
        return self._node.topology.n_copies(stage)


class CopyRuntime:
    """One stage copy: bounded inbox, dispatcher thread, worker pool.

    Serial streams run on the dispatcher thread, so state mutations are
    serialized per copy; concurrent streams fan out to the pool and must
    only read copy state.
    """

    def __init__(self, node: "ProcessNode", stage: str, copy_index: int, handler, n_threads: int):
        self.node = node
        self.stage = stage
        self.copy_index = copy_index
        self.handler = handler
        self.inbox = _Inbox(node.options.inbox_cap)
        self.ctx = HandlerContext(node, stage, copy_index)
        self._lock = threading.Lock()
        self._in_flight = 0
        # With one worker thread, pooled execution equals in-order inline
        # execution, so skip the pool and its submit overhead entirely.
        self._pool = (
            ThreadPoolExecutor(max_workers=n_threads, thread_name_prefix=f"{stage}{copy_index}-worker")
            if n_threads > 1
            else None
        )
        self._dispatcher = threading.Thread(
            target=self._run, name=f"{stage}{copy_index}-dispatch", daemon=True
        )

    def start(self) -> None:
        self._dispatcher.start()

    def stop(self) -> None:
        self.inbox.close()
        self._dispatcher.join(timeout=5.0)
        if self._pool is not None:
            self._pool.shutdown(wait=False, cancel_futures=True)

    def _run(self) -> None:
        serial = self.node.serial_by_sid
        names = self.node.graph.stream_names
        pool = self._pool
        while True:
            batch = self.inbox.get()
            if batch is None:
                return
            with self._lock:
                self._in_flight += len(batch)
            inline: dict[int, int] = {}
            for env in batch:
                if pool is None or serial[env[STREAM]]:
                    self._invoke(env)
                    inline[env[STREAM]] = inline.get(env[STREAM], 0) + 1
                else:
                    pool.submit(self._process, env)
            if inline:
                done = 0
                for sid, n in inline.items():
                    self.node.counters.delivered(names[sid], n)
                    done += n
                with self._lock:
                    self._in_flight -= done

    def _invoke(self, env) -> None:
        name = self.node.graph.stream_names[env[STREAM]]
        try:
            self.handler.on_message(name, env[TAG], env[PAYLOAD], self.ctx)
        except Exception:
            self.node.record_error(
                f"handler error in stage {self.stage} copy {self.copy_index} "
                f"on stream {name}:\n{traceback.format_exc()}"
            )

    def _process(self, env) -> None:
        try:
            self._invoke(env)
        finally:
            self.node.counters.delivered(self.node.graph.stream_names[env[STREAM]])
            with self._lock:
                self._in_flight -= 1

    @property
    def depth(self) -> int:
        with self._lock:
            in_flight = self._in_flight
        return self.inbox.count + in_flight


class SendContext:
    """Per-(stage copy) outbound side: routing, sequencing, aggregation."""

    def __init__(self, node: "ProcessNode", stage: str, copy_index: int):
        self._node = node
        self._stage = stage
        self._copy = copy_index
        self._lock = threading.RLock()
        self._bufs: dict[tuple[str, int], tuple[list, int]] = {}
        self._seq: dict[tuple[int, int], int] = {}
        info = {}
        for name, stream in node.graph.streams.items():
            if stream.src != stage:
                continue
            info[name] = (
                node.graph.stream_ids[name],
                stream.route == ROUTE_DIRECT,
                node.topology.n_copies(stream.dst),
                stream.dst,
            )
        self._stream_info = info

    def send(self, stream: str, tag: int, payload: bytes) -> None:
        try:
            sid, direct, n_dst, dst_stage = self._stream_info[stream]
        except KeyError:
            known = self._node.graph.streams.get(stream)
            if known is None:
                raise ValueError(f"unknown stream {stream!r}") from None
            raise ValueError(f"stream {stream!r} does not originate at stage {self._stage!r}") from None
        if direct:
            dst = tag
            if not 0 <= dst < n_dst:
                raise ValueError(f"direct tag {tag} outside [0, {n_dst}) on stream {stream!r}")
        else:
            dst = tag % n_dst
        opts = self._node.options
        with self._lock:
            seq = self._seq.get((sid, dst), 0)
            self._seq[(sid, dst)] = seq + 1
            key = (stream, dst)
            buf, nbytes = self._bufs.get(key, (None, 0))
            if buf is None:
                buf = []
            buf.append((sid, tag, self._copy, seq, payload))
            nbytes += len(payload)
            self._node.counters.sent(stream, 1, len(payload))
            if len(buf) >= opts.flush_count or nbytes >= opts.flush_bytes:
                self._bufs.pop(key, None)
                self._dispatch(stream, dst_stage, dst, buf)
            else:
                self._bufs[key] = (buf, nbytes)

    def send_many(self, stream: str, pairs) -> None:
        """Send (tag, payload) pairs in order; one bookkeeping pass per call."""
        try:
            sid, direct, n_dst, dst_stage = self._stream_info[stream]
        except KeyError:
            self.send(stream, *next(iter(pairs)))  # re-raise with the same diagnostics
            return
        opts = self._node.options
        n_sent = 0
        total_bytes = 0
        with self._lock:
            for tag, payload in pairs:
                if direct:
                    dst = tag
                    if not 0 <= dst < n_dst:
                        raise ValueError(f"direct tag {tag} outside [0, {n_dst}) on stream {stream!r}")
                else:
                    dst = tag % n_dst
                seq = self._seq.get((sid, dst), 0)
                self._seq[(sid, dst)] = seq + 1
                key = (stream, dst)
                buf, nbytes = self._bufs.get(key, (None, 0))
                if buf is None:
                    buf = []
                buf.append((sid, tag, self._copy, seq, payload))
                nbytes += len(payload)
                n_sent += 1
                total_bytes += len(payload)
                if len(buf) >= opts.flush_count or nbytes >= opts.flush_bytes:
                    self._bufs.pop(key, None)
                    self._node.counters.sent(stream, n_sent, total_bytes)
                    n_sent = 0
                    total_bytes = 0
                    self._dispatch(stream, dst_stage, dst, buf)
                else:
                    self._bufs[key] = (buf, nbytes)
            if n_sent:
                self._node.counters.sent(stream, n_sent, total_bytes)

    def _dispatch(self, stream: str, dst_stage: str, dst_copy: int, envs: list) -> None:
        self._node.counters.transported(stream)
        self._node.deliver(dst_stage, dst_copy, envs)

    def flush(self, stream: str | None = None) -> None:
        with self._lock:
            keys = [k for k in self._bufs if stream is None or k[0] == stream]
            for key in keys:
                buf, _ = self._bufs.pop(key)
                _, _, _, dst_stage = self._stream_info[key[0]]
                self._dispatch(key[0], dst_stage, key[1], buf)

    @property
    def empty(self) -> bool:
        with self._lock:
            return not self._bufs


class ProcessNode:
    """All engine state living in one OS process."""

    def __init__(
        self,
        graph: Graph,
        topology: StageTopology,
        options: EngineOptions,
        proc_id: int,
        deliver_remote=None,
    ):
        self.graph = graph
        self.topology = topology
        self.options = options
        self.proc_id = proc_id
        self.deliver_remote = deliver_remote  # (dst_proc, envelopes) -> None
        self.placement = topology.resolved_placement(graph)
        self.counters = CounterBoard(graph.streams)
        self.serial_by_sid = [
            graph.streams[graph.stream_names[sid]].dispatch == DISPATCH_SERIAL
            for sid in range(len(graph.streams))
        ]
        self._recv_info = [
            (
                graph.streams[graph.stream_names[sid]].dst,
                graph.streams[graph.stream_names[sid]].route == ROUTE_DIRECT,
                topology.n_copies(graph.streams[graph.stream_names[sid]].dst),
            )
            for sid in range(len(graph.streams))
        ]
        self._errors: list[str] = []
        self._err_lock = threading.Lock()
        self._seq_seen: dict[tuple[int, int, int], int] = {}
        self._seq_lock = threading.Lock()

        self.copies: dict[tuple[str, int], CopyRuntime] = {}
        for name, stage in graph.stages.items():
            if stage.source:
                continue
            factory = graph.handler_factories[name]
            for copy_index, proc in enumerate(self.placement[name]):
                if proc == proc_id:
                    handler = factory(copy_index)
                    self.copies[(name, copy_index)] = CopyRuntime(
                        self, name, copy_index, handler, topology.n_threads(name)
                    )
        self._send_ctxs: dict[tuple[str, int], SendContext] = {}
        self._send_lock = threading.Lock()

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        for copy in self.copies.values():
            copy.start()

    def stop(self) -> None:
        for copy in self.copies.values():
            copy.stop()

    # -- sending -----------------------------------------------------------

    def send_context(self, stage: str, copy_index: int) -> SendContext:
        key = (stage, copy_index)
        ctx = self._send_ctxs.get(key)
        if ctx is None:
            with self._send_lock:
                ctx = self._send_ctxs.get(key)
                if ctx is None:
                    if stage not in self.graph.stages:
                        raise ValueError(f"unknown stage {stage!r}")
                    if self.placement[stage][copy_index] != self.proc_id:
                        raise ValueError(f"stage {stage!r} copy {copy_index} is not local")
                    ctx = SendContext(self, stage, copy_index)
                    self._send_ctxs[key] = ctx
        return ctx

    def send_from(self, stage: str, copy_index: int, stream: str, tag: int, payload: bytes) -> None:
        self.send_context(stage, copy_index).send(stream, tag, payload)

    def flush_local(self, stream: str | None = None) -> None:
        with self._send_lock:
            ctxs = list(self._send_ctxs.values())
        for ctx in ctxs:
            ctx.flush(stream)

    def deliver(self, dst_stage: str, dst_copy: int, envs: list) -> None:
        proc = self.placement[dst_stage][dst_copy]
        if proc == self.proc_id:
            self._check_sequences(envs, dst_copy)
            self.copies[(dst_stage, dst_copy)].inbox.put(envs)
        else:
            self.deliver_remote(proc, envs)

    def dispatch_incoming(self, envs: list) -> None:
        """Route a parsed remote batch to local inboxes, grouping runs."""
        group: list = []
        group_key: tuple[str, int] | None = None
        for env in envs:
            dst_stage, direct, n_dst = self._recv_info[env[STREAM]]
            dst_copy = env[TAG] if direct else env[TAG] % n_dst
            key = (dst_stage, dst_copy)
            if key != group_key and group:
                self._check_sequences(group, group_key[1])
                self.copies[group_key].inbox.put(group)
                group = []
            group_key = key
            group.append(env)
        if group:
            self._check_sequences(group, group_key[1])
            self.copies[group_key].inbox.put(group)

    def _check_sequences(self, envs: list, dst_copy: int) -> None:
        with self._seq_lock:
            for env in envs:
                key = (env[STREAM], env[SRC], dst_copy)
                expected = self._seq_seen.get(key, 0)
                if env[SEQ] != expected:
                    self.record_error(
                        f"out-of-order envelope on stream "
                        f"{self.graph.stream_names[env[STREAM]]} src copy {env[SRC]} "
                        f"dst copy {dst_copy}: seq {env[SEQ]}, expected {expected}"
                    )
                self._seq_seen[key] = env[SEQ] + 1

    # -- state -------------------------------------------------------------

    def record_error(self, message: str) -> None:
        with self._err_lock:
            self._errors.append(message)

    def state(self) -> ProcState:
        with self._send_lock:
            buffers_empty = all(ctx.empty for ctx in self._send_ctxs.values())
        depths = {key: copy.depth for key, copy in self.copies.items()}
        with self._err_lock:
            errors = list(self._errors)
        return ProcState(
            counters=self.counters.snapshot(),
            depths=depths,
            buffers_empty=buffers_empty,
            errors=errors,
        )

    def stage_stats(self) -> dict:
        return {key: copy.handler.stats() for key, copy in self.copies.items()}


class Engine:
    """Driver-facing facade over one in-process or multi-process pipeline."""

    def __init__(
        self,
        graph_builder,
        spec,
        topology: StageTopology,
        *,
        transport: str = "inproc",
        options: EngineOptions | None = None,
    ):
        if transport not in ("inproc", "socket"):
            raise ValueError(f"unknown transport {transport!r}")
        self.options = options or EngineOptions()
        self.graph = graph_builder(spec)
        topology.validate(self.graph)
        self.topology = topology
        self.transport = transport
        self._cluster = None
        if transport == "socket" and topology.n_processes > 1:
            from lshpipe.runtime import socketmode

            self._cluster = socketmode.SocketCluster(
                graph_builder, spec, topology, self.options
            )
            self.node = self._cluster.node
        else:
            if topology.n_processes != 1:
                raise ValueError("in-process transport requires n_processes == 1")
            self.node = ProcessNode(self.graph, topology, self.options, proc_id=0)
        self._started = False

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "Engine":
        if self._started:
            raise RuntimeError("engine already started")
        self.node.start()
        if self._cluster is not None:
            self._cluster.start()
        self._started = True
        return self

    def close(self) -> None:
        if self._cluster is not None:
            self._cluster.shutdown()
            self._cluster = None
        self.node.stop()
        self._started = False

    def __enter__(self) -> "Engine":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()

    # -- data plane --------------------------------------------------------

    def sender(self, stage: str, copy_index: int = 0) -> SendContext:
        if not self.graph.stages[stage].source:
            raise ValueError(f"stage {stage!r} is not a source stage")
        return self.node.send_context(stage, copy_index)

    def local_handler(self, stage: str, copy_index: int = 0):
        return self.node.copies[(stage, copy_index)].handler

    def flush(self, stream: str) -> None:
        """Dispatch buffered envelopes of one stream from local senders.

        Remote copies flush all streams (the control op is not
        stream-filtered); flushing more than asked never reorders anything.
        """
        if stream not in self.graph.streams:
            raise ValueError(f"unknown stream {stream!r}")
        self.node.flush_local(stream)
        if self._cluster is not None:
            self._cluster.broadcast_flush()

    def flush_all(self) -> None:
        self.node.flush_local()
        if self._cluster is not None:
            self._cluster.broadcast_flush()

    # -- control plane -----------------------------------------------------

    def _gather_states(self) -> list[ProcState]:
        states = [self.node.state()]
        if self._cluster is not None:
            states.extend(self._cluster.gather_states())
        return states

    def counters_snapshot(self) -> TrafficCounters:
        merged = TrafficCounters()
        for state in self._gather_states():
            merged = merged.merged(state.counters)
        return merged

    def stage_stats(self) -> dict:
        stats = dict(self.node.stage_stats())
        if self._cluster is not None:
            for remote in self._cluster.gather_stats():
                stats.update(remote)
        return stats

    def drain_barrier(self, timeout: float | None = None) -> None:
        """Return once every buffer, transport queue, and inbox is empty.

        Callers must have stopped producing new input; handlers may still be
        cascading sends, which the repeated flush/poll loop drains level by
        level. Quiescence is confirmed twice in a row before returning.
        """
        timeout = self.options.drain_timeout if timeout is None else timeout
        deadline = time.monotonic() + timeout
        stable = 0
        poll = self.options.poll_interval
        while True:
            self.flush_all()
            states = self._gather_states()
            errors = list(itertools.chain.from_iterable(s.errors for s in states))
            if errors:
                raise PipelineHandlerError(errors[0])
            merged = TrafficCounters()
            for state in states:
                merged = merged.merged(state.counters)
            quiescent = (
                all(s.buffers_empty for s in states)
                and all(d == 0 for s in states for d in s.depths.values())
                and all(c.logical == c.delivered for c in merged.streams.values())
            )
            if quiescent:
                stable += 1
                if stable >= 2:
                    return
            else:
                stable = 0
            if time.monotonic() > deadline:
                raise PipelineStallError(self._stall_diagnostics(states, merged))
            # Back off while handlers chew through long batches; the sleep
            # keeps the control thread off the workers' cores.
            time.sleep(poll)
            poll = min(poll * 1.5, 0.05)

    def _stall_diagnostics(self, states: list[ProcState], merged: TrafficCounters) -> str:
        lines = ["pipeline stalled during drain:"]
        for proc, state in enumerate(states):
            for (stage, copy), depth in sorted(state.depths.items()):
                if depth:
                    lines.append(
                        f"  process {proc}: stage {stage} copy {copy} has {depth} queued/in-flight envelopes"
                    )
            if not state.buffers_empty:
                lines.append(f"  process {proc}: unflushed send buffers")
        for name, c in sorted(merged.streams.items()):
            if c.logical != c.delivered:
                lines.append(f"  stream {name}: sent {c.logical} != delivered {c.delivered}")
        return "\n".join(lines)
