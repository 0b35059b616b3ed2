"""Per-stream traffic accounting.

A logical message is one envelope handed to ``send``; a transport message is
one post-aggregation batch handed to the transport; bytes count payloads
only. Delivery increments after the destination handler returns, so a
quiescent pipeline satisfies sent == delivered on every stream.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field


@dataclass
class StreamCounters:
    logical: int = 0
    transport: int = 0
    bytes: int = 0
    delivered: int = 0

    def merged(self, other: "StreamCounters") -> "StreamCounters":
        return StreamCounters(
            logical=self.logical + other.logical,
            transport=self.transport + other.transport,
            bytes=self.bytes + other.bytes,
            delivered=self.delivered + other.delivered,
        )


@dataclass
class TrafficCounters:
    streams: dict[str, StreamCounters] = field(default_factory=dict)

    def stream(self, name: str) -> StreamCounters:
        return self.streams.get(name, StreamCounters())

    @property
    def total_logical(self) -> int:
        return sum(s.logical for s in self.streams.values())

    @property
    def total_transport(self) -> int:
        return sum(s.transport for s in self.streams.values())

    @property
    def total_bytes(self) -> int:
        return sum(s.bytes for s in self.streams.values())

    @property
    def total_delivered(self) -> int:
        return sum(s.delivered for s in self.streams.values())

    def merged(self, other: "TrafficCounters") -> "TrafficCounters":
        out = {name: StreamCounters(**vars(c)) for name, c in self.streams.items()}
        for name, c in other.streams.items():
            out[name] = out[name].merged(c) if name in out else StreamCounters(**vars(c))
        return TrafficCounters(streams=out)

    def delta(self, earlier: "TrafficCounters") -> "TrafficCounters":
        out: dict[str, StreamCounters] = {}
        for name, c in self.streams.items():
            e = earlier.streams.get(name, StreamCounters())
            out[name] = StreamCounters(
                logical=c.logical - e.logical,
                transport=c.transport - e.transport,
                bytes=c.bytes - e.bytes,
                delivered=c.delivered - e.delivered,
            )
        return TrafficCounters(streams=out)

    def as_dict(self) -> dict:
        return {name: vars(c).copy() for name, c in sorted(self.streams.items())}


class CounterBoard:
    """Thread-safe per-process accumulator feeding TrafficCounters snapshots."""

    def __init__(self, stream_names):
        self._lock = threading.Lock()
        self._streams = {name: StreamCounters() for name in stream_names}

    def sent(self, stream: str, n_logical: int, n_bytes: int) -> None:
        with self._lock:
            c = self._streams[stream]
            c.logical += n_logical
            c.bytes += n_bytes

    def transported(self, stream: str) -> None:
        with self._lock:
            self._streams[stream].transport += 1

    def delivered(self, stream: str, n: int = 1) -> None:
        with self._lock:
            self._streams[stream].delivered += n

    def snapshot(self) -> TrafficCounters:
        with self._lock:
            return TrafficCounters(
                streams={name: StreamCounters(**vars(c)) for name, c in self._streams.items()}
            )
