"""Stage/labeled-stream dataflow substrate with two interchangeable transports."""

from lshpipe.runtime.counters import StreamCounters, TrafficCounters
from lshpipe.runtime.engine import Engine, EngineOptions, PipelineHandlerError, PipelineStallError
from lshpipe.runtime.graph import Graph, StageDef, StageTopology, StreamDef

__all__ = [
    "Engine",
    "EngineOptions",
    "Graph",
    "PipelineHandlerError",
    "PipelineStallError",
    "StageDef",
    "StageTopology",
    "StreamCounters",
    "StreamDef",
    "TrafficCounters",
]
