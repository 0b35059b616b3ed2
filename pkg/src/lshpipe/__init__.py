"""Distributed multi-probe LSH for approximate k-NN search.

The package decomposes LSH indexing and search into a five-stage dataflow
pipeline (input reader, query receiver, bucket index, data points,
aggregator) connected by tag-routed streams, with pluggable data-partition
strategies and an experiment harness measuring recall/traffic trade-offs.
"""

from lshpipe.family import BucketKey, FeatureVector, LshFamily, hash_point, sample_family, tune_width
from lshpipe.probing import probe_sequence
from lshpipe.ranking import Neighbor, distance_sq, top_k
from lshpipe.sequential import SearchParams, SequentialIndex, sequential_search

__version__ = "0.1.0"

__all__ = [
    "BucketKey",
    "FeatureVector",
    "LshFamily",
    "Neighbor",
    "SearchParams",
    "SequentialIndex",
    "distance_sq",
    "hash_point",
    "probe_sequence",
    "sample_family",
    "sequential_search",
    "top_k",
    "tune_width",
    "__version__",
]
