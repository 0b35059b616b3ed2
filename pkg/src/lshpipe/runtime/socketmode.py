"""Multi-process transport: length-prefixed binary frames over TCP sockets.

The driver (process 0) hosts source stages and driver-pinned stages; worker
processes host the rest per the topology placement. Every process pair that
exchanges messages holds one TCP connection carrying both data envelopes and
control frames (stream id 0xFFFF): hello/peers handshakes, flush, state and
stats snapshots, shutdown. Per-connection sends are serialized, so TCP
preserves the per-(source copy, destination copy, stream) FIFO order that
the in-process transport provides.
"""

from __future__ import annotations

import multiprocessing as mp
import pickle
import socket
import struct
import threading
import time
import traceback
from concurrent.futures import ThreadPoolExecutor

from lshpipe.runtime import frames
from lshpipe.runtime.engine import EngineOptions, PipelineStallError, ProcessNode
from lshpipe.runtime.frames import STREAM, encode_batch, encode_envelope
from lshpipe.runtime.graph import CONTROL_STREAM_ID, StageTopology

_mp_ctx = None


def _mp_context():
    global _mp_ctx
    if _mp_ctx is None:
        methods = mp.get_all_start_methods()
        if "forkserver" in methods:
            ctx = mp.get_context("forkserver")
            try:
                ctx.set_forkserver_preload(["lshpipe.runtime.socketmode"])
            except (ValueError, RuntimeError):
                pass
            _mp_ctx = ctx
        else:
            _mp_ctx = mp.get_context("spawn")
    return _mp_ctx


class Connection:
    """One socket with a write lock and a frame-parsing reader thread."""

    def __init__(self, sock: socket.socket, name: str, on_control, on_data):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self.name = name
        self._on_control = on_control
        self._on_data = on_data
        self._wlock = threading.Lock()
        self.peer: int | None = None
        self._reader = threading.Thread(target=self._read_loop, name=f"conn-{name}", daemon=True)

    def start(self) -> None:
        self._reader.start()

    def send_bytes(self, data: bytes) -> None:
        with self._wlock:
            self.sock.sendall(data)

    def send_control(self, op: str, body, req_id: int = 0, src: int = 0) -> None:
        payload = pickle.dumps((op, body), protocol=pickle.HIGHEST_PROTOCOL)
        self.send_bytes(encode_envelope(CONTROL_STREAM_ID, 0, src, req_id, payload))

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()

    def _read_loop(self) -> None:
        parser = frames.FrameParser()
        try:
            while True:
                data = self.sock.recv(1 << 16)
                if not data:
                    return
                batch: list = []
                for env in parser.feed(data):
                    if env[STREAM] == CONTROL_STREAM_ID:
                        if batch:
                            self._on_data(batch)
                            batch = []
                        op, body = pickle.loads(env[4])
                        self._on_control(self, op, body, env[3], env[2])
                    else:
                        batch.append(env)
                if batch:
                    self._on_data(batch)
        except OSError:
            return


def _serve_listener(listener: socket.socket, register) -> threading.Thread:
    def loop():
        while True:
            try:
                sock, _ = listener.accept()
            except OSError:
                return
            register(sock)

    thread = threading.Thread(target=loop, name="accept-loop", daemon=True)
    thread.start()
    return thread


class _Mesh:
    """Shared connection registry: proc id -> Connection."""

    def __init__(self, proc_id: int, on_control, on_data):
        self.proc_id = proc_id
        self.on_control = on_control
        self.on_data = on_data
        self.conns: dict[int, Connection] = {}
        self._lock = threading.Lock()
        self._changed = threading.Condition(self._lock)

    def adopt(self, sock: socket.socket, peer: int | None = None) -> Connection:
        conn = Connection(sock, f"p{self.proc_id}", self.on_control, self.on_data)
        conn.peer = peer
        if peer is not None:
            self.register(conn, peer)
        conn.start()
        return conn

    def register(self, conn: Connection, peer: int) -> None:
        conn.peer = peer
        with self._lock:
            self.conns[peer] = conn
            self._changed.notify_all()

    def wait_for(self, peers, timeout: float) -> None:
        deadline = time.monotonic() + timeout
        with self._lock:
            while not all(p in self.conns for p in peers):
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    missing = [p for p in peers if p not in self.conns]
                    raise PipelineStallError(f"mesh setup timed out waiting for processes {missing}")
                self._changed.wait(remaining)

    def deliver(self, proc: int, envelopes: list) -> None:
        self.conns[proc].send_bytes(encode_batch(envelopes))

    def close_all(self) -> None:
        with self._lock:
            conns = list(self.conns.values())
        for conn in conns:
            conn.close()


# ---------------------------------------------------------------------------
# worker side
# ---------------------------------------------------------------------------


def worker_main(
    proc_id: int,
    driver_addr: tuple[str, int],
    graph_builder,
    spec,
    topology: StageTopology,
    options: EngineOptions,
) -> None:
    try:
        _run_worker(proc_id, driver_addr, graph_builder, spec, topology, options)
    except Exception:  # pragma: no cover - surfaced via driver timeout
        traceback.print_exc()
        raise


def _run_worker(proc_id, driver_addr, graph_builder, spec, topology, options) -> None:
    graph = graph_builder(spec)
    node = ProcessNode(graph, topology, options, proc_id=proc_id)
    shutdown = threading.Event()
    ops_pool = ThreadPoolExecutor(max_workers=2, thread_name_prefix=f"w{proc_id}-control")

    def on_control(conn: Connection, op: str, body, req_id: int, src: int) -> None:
        if op == "ident":
            mesh.register(conn, body)
        elif op == "peers":
            # connect to every lower-numbered peer we exchange data with
            def connect_peers():
                for peer, addr in body.items():
                    if peer < proc_id and peer != 0:
                        sock = socket.create_connection(addr)
                        c = mesh.adopt(sock, peer)
                        c.send_control("ident", proc_id, src=proc_id)
                conn.send_control("resp", None, req_id=req_id, src=proc_id)

            ops_pool.submit(connect_peers)
        elif op == "flush":
            ops_pool.submit(
                lambda: (node.flush_local(), conn.send_control("resp", None, req_id=req_id, src=proc_id))
            )
        elif op == "state":
            conn.send_control("resp", node.state(), req_id=req_id, src=proc_id)
        elif op == "stats":
            conn.send_control("resp", node.stage_stats(), req_id=req_id, src=proc_id)
        elif op == "shutdown":
            conn.send_control("resp", None, req_id=req_id, src=proc_id)
            shutdown.set()

    mesh = _Mesh(proc_id, on_control, lambda envs: node.dispatch_incoming(envs))
    node.deliver_remote = mesh.deliver

    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.bind((options.socket_host, 0))
    listener.listen(16)
    accept_thread = _serve_listener(listener, lambda sock: mesh.adopt(sock))

    node.start()
    driver_sock = socket.create_connection(driver_addr)
    driver_conn = mesh.adopt(driver_sock, peer=0)
    driver_conn.send_control("hello", (proc_id, listener.getsockname()[1]), src=proc_id)

    shutdown.wait()
    node.stop()
    listener.close()
    mesh.close_all()
    ops_pool.shutdown(wait=False)


# ---------------------------------------------------------------------------
# driver side
# ---------------------------------------------------------------------------


class SocketCluster:
    """Driver-side owner of the worker processes and the control plane."""

    def __init__(self, graph_builder, spec, topology: StageTopology, options: EngineOptions):
        self.topology = topology
        self.options = options
        self._graph_builder = graph_builder
        self._spec = spec
        self._req_counter = 0
        self._req_lock = threading.Lock()
        self._pending: dict[int, tuple[threading.Event, list]] = {}
        self._hello: dict[int, tuple[str, int]] = {}
        self._hello_lock = threading.Condition()
        self.mesh = _Mesh(0, self._on_control, self._on_data)
        graph = graph_builder(spec)
        self.node = ProcessNode(graph, topology, options, proc_id=0, deliver_remote=self.mesh.deliver)
        self._procs: list = []
        self._listener: socket.socket | None = None

    # -- control callbacks ---------------------------------------------------

    def _on_control(self, conn: Connection, op: str, body, req_id: int, src: int) -> None:
        if op == "hello":
            proc_id, port = body
            self.mesh.register(conn, proc_id)
            with self._hello_lock:
                self._hello[proc_id] = (self.options.socket_host, port)
                self._hello_lock.notify_all()
        elif op == "resp":
            entry = self._pending.get(req_id)
            if entry is not None:
                entry[1].append(body)
                entry[0].set()

    def _on_data(self, envs: list) -> None:
        self.node.dispatch_incoming(envs)

    # -- lifecycle -------------------------------------------------------------

    def start(self) -> None:
        n_workers = self.topology.n_processes - 1
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.bind((self.options.socket_host, 0))
        listener.listen(n_workers + 4)
        self._listener = listener
        _serve_listener(listener, lambda sock: self.mesh.adopt(sock))
        addr = listener.getsockname()

        ctx = _mp_context()
        for proc_id in range(1, self.topology.n_processes):
            proc = ctx.Process(
                target=worker_main,
                args=(proc_id, addr, self._graph_builder, self._spec, self.topology, self.options),
                daemon=True,
                name=f"lshpipe-worker-{proc_id}",
            )
            proc.start()
            self._procs.append(proc)

        deadline = time.monotonic() + self.options.rpc_timeout
        with self._hello_lock:
            while len(self._hello) < n_workers:
                self._check_procs()
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise PipelineStallError(
                        f"worker handshake timed out; heard from {sorted(self._hello)}"
                    )
                self._hello_lock.wait(min(remaining, 0.2))
        peers = dict(self._hello)
        self._broadcast("peers", peers)

    def shutdown(self) -> None:
        try:
            self._broadcast("shutdown", None, timeout=5.0)
        except (PipelineStallError, OSError):
            pass
        for proc in self._procs:
            proc.join(timeout=5.0)
            if proc.is_alive():
                proc.terminate()
        self.mesh.close_all()
        if self._listener is not None:
            self._listener.close()

    # -- RPC ---------------------------------------------------------------------

    def _check_procs(self) -> None:
        for proc in self._procs:
            if not proc.is_alive():
                raise PipelineStallError(f"worker process {proc.name} exited with {proc.exitcode}")

    def _rpc(self, proc_id: int, op: str, body, timeout: float | None = None):
        timeout = self.options.rpc_timeout if timeout is None else timeout
        with self._req_lock:
            self._req_counter += 1
            req_id = self._req_counter
        event: threading.Event = threading.Event()
        slot: list = []
        self._pending[req_id] = (event, slot)
        try:
            self.mesh.conns[proc_id].send_control(op, body, req_id=req_id)
            deadline = time.monotonic() + timeout
            while not event.wait(0.2):
                self._check_procs()
                if time.monotonic() > deadline:
                    raise PipelineStallError(f"control request {op!r} to process {proc_id} timed out")
            return slot[0]
        finally:
            self._pending.pop(req_id, None)

    def _broadcast(self, op: str, body, timeout: float | None = None) -> list:
        return [
            self._rpc(proc_id, op, body, timeout=timeout)
            for proc_id in range(1, self.topology.n_processes)
        ]

    def broadcast_flush(self) -> None:
        self._broadcast("flush", None)

    def gather_states(self) -> list:
        return self._broadcast("state", None)

    def gather_stats(self) -> list:
        return self._broadcast("stats", None)
