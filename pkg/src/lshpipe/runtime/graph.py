"""Stage graph and copy topology.

A Graph declares stages, the tag-routed streams connecting them, and per
handler-stage a factory building the message handler for one copy. A
StageTopology sets copy counts, worker threads per copy, and the process
placement of every copy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

ROUTE_MOD = "mod"  # destination copy = tag % n_dst
ROUTE_DIRECT = "direct"  # tag is the destination copy index

DISPATCH_SERIAL = "serial"  # processed by the copy's dispatcher thread
DISPATCH_CONCURRENT = "concurrent"  # fanned out to the copy's worker pool

CONTROL_STREAM_ID = 0xFFFF


@dataclass(frozen=True)
class StageDef:
    """One pipeline stage; sources are driven by the caller and get no inbox."""

    name: str
    source: bool = False
    pin_to_driver: bool = False


@dataclass(frozen=True)
class StreamDef:
    """A labeled stream: tag deterministically selects the destination copy."""

    name: str
    src: str
    dst: str
    route: str = ROUTE_MOD
    dispatch: str = DISPATCH_SERIAL

    def __post_init__(self):
        if self.route not in (ROUTE_MOD, ROUTE_DIRECT):
            raise ValueError(f"unknown route mode {self.route!r}")
        if self.dispatch not in (DISPATCH_SERIAL, DISPATCH_CONCURRENT):
            raise ValueError(f"unknown dispatch mode {self.dispatch!r}")


class Graph:
    def __init__(self):
        self.stages: dict[str, StageDef] = {}
        self.streams: dict[str, StreamDef] = {}
        self.stream_ids: dict[str, int] = {}
        self.stream_names: dict[int, str] = {}
        self.handler_factories: dict[str, Callable[[int], object]] = {}

    def add_stage(self, stage: StageDef, handler_factory: Callable[[int], object] | None = None) -> None:
        if stage.name in self.stages:
            raise ValueError(f"stage {stage.name!r} registered twice")
        if stage.source and handler_factory is not None:
            raise ValueError(f"source stage {stage.name!r} cannot take a handler")
        if not stage.source and handler_factory is None:
            raise ValueError(f"stage {stage.name!r} needs a handler factory")
        self.stages[stage.name] = stage
        if handler_factory is not None:
            self.handler_factories[stage.name] = handler_factory

    def add_stream(self, stream: StreamDef) -> None:
        if stream.name in self.streams:
            raise ValueError(f"stream {stream.name!r} registered twice")
        if stream.src not in self.stages or stream.dst not in self.stages:
            raise ValueError(f"stream {stream.name!r} references unknown stages")
        if self.stages[stream.dst].source:
            raise ValueError(f"stream {stream.name!r} targets source stage {stream.dst!r}")
        sid = len(self.streams)
        if sid >= CONTROL_STREAM_ID:
            raise ValueError("too many streams")
        self.streams[stream.name] = stream
        self.stream_ids[stream.name] = sid
        self.stream_names[sid] = stream.name


@dataclass(frozen=True)
class StageTopology:
    """Copy counts, threads per copy, and copy-to-process placement."""

    copies: dict[str, int]
    threads: dict[str, int] = field(default_factory=dict)
    n_processes: int = 1
    placement: dict[str, tuple[int, ...]] | None = None

    def n_copies(self, stage: str) -> int:
        return self.copies[stage]

    def n_threads(self, stage: str) -> int:
        return self.threads.get(stage, 1)

    def validate(self, graph: Graph) -> None:
        for name in graph.stages:
            if self.copies.get(name, 0) < 1:
                raise ValueError(f"stage {name!r} needs at least one copy")
            if self.threads.get(name, 1) < 1:
                raise ValueError(f"stage {name!r} needs at least one worker thread")
        if self.n_processes < 1:
            raise ValueError("n_processes must be >= 1")
        if self.placement is not None:
            for name, procs in self.placement.items():
                stage = graph.stages[name]
                if len(procs) != self.copies[name]:
                    raise ValueError(f"placement for {name!r} must list one process per copy")
                if any(not 0 <= p < self.n_processes for p in procs):
                    raise ValueError(f"placement for {name!r} names an unknown process")
                if (stage.source or stage.pin_to_driver) and any(p != 0 for p in procs):
                    raise ValueError(f"stage {name!r} must stay in the driver process")

    def resolved_placement(self, graph: Graph) -> dict[str, tuple[int, ...]]:
        """Explicit placement, defaulting driver-pinned stages to process 0 and
        spreading the rest round-robin over worker processes."""
        out: dict[str, tuple[int, ...]] = {}
        workers = max(1, self.n_processes - 1)
        for name, stage in graph.stages.items():
            if self.placement is not None and name in self.placement:
                out[name] = tuple(self.placement[name])
            elif stage.source or stage.pin_to_driver or self.n_processes == 1:
                out[name] = (0,) * self.copies[name]
            else:
                out[name] = tuple(1 + (c % workers) for c in range(self.copies[name]))
        return out
