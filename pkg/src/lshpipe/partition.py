"""Data-partition strategies: object-to-DP and bucket-to-BI assignment.

Three object-mapping strategies are supported:

* ``mod`` - object id modulo copy count; perfectly balanced, no locality.
* ``zorder`` - Morton code of the leading coordinates, mapped through
  sample-quantile curve ranges so nearby points land on the same copy.
* ``lshmap`` - the route hash of a dedicated single-table LSH function
  (independent seed from the index family) modulo copy count.

Buckets always map by route hash modulo the BI copy count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lshpipe import kernels
from lshpipe.family import BucketKey, FeatureVector, LshFamily, sample_family

MOD = "mod"
ZORDER = "zorder"
LSHMAP = "lshmap"

DEFAULT_ZORDER_BITS = 4
DEFAULT_MAP_FUNCTIONS = 8


@dataclass(frozen=True)
class PartitionCensus:
    counts: np.ndarray
    imbalance_pct: float


@dataclass(frozen=True)
class PartitionStrategy:
    kind: str
    zorder_bits: int | None = None
    zorder_mins: np.ndarray | None = field(default=None, repr=False)
    zorder_maxs: np.ndarray | None = field(default=None, repr=False)
    zorder_ranges: np.ndarray | None = field(default=None, repr=False)
    map_family: LshFamily | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in (MOD, ZORDER, LSHMAP):
            raise ValueError(f"unknown partition strategy kind {self.kind!r}")
        if self.kind == ZORDER and self.zorder_bits is not None and self.zorder_bits < 1:
            raise ValueError("zorder bits per dimension must be >= 1")


def mod_strategy() -> PartitionStrategy:
    return PartitionStrategy(kind=MOD)


def lshmap_strategy(seed: int, d: int, w: float, n_functions: int = DEFAULT_MAP_FUNCTIONS) -> PartitionStrategy:
    """A single g-function mapping; seed must differ from the index family's."""
    fam = sample_family(seed, d, L=1, M=n_functions, w=w)
    return PartitionStrategy(kind=LSHMAP, map_family=fam)


def _coords_matrix(v) -> np.ndarray:
    arr = v.coords if isinstance(v, FeatureVector) else np.asarray(v)
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    return arr.reshape(1, -1) if arr.ndim == 1 else arr


def morton_codes(coords: np.ndarray, bits: int, mins: np.ndarray, maxs: np.ndarray) -> np.ndarray:
    """Morton (Z-order) codes for a batch of vectors.

    Uses the first floor(64 / bits) dimensions when d is larger, scales each
    retained coordinate affinely to [0, 2^bits) and clamps, then interleaves
    bits dimension-major (dimension 0 holds the least-significant bit of
    each group).
    """
    if bits < 1:
        raise ValueError(f"bits per dimension must be >= 1, got {bits}")
    coords = _coords_matrix(coords)
    nd = min(coords.shape[1], 64 // bits)
    mins = np.asarray(mins, dtype=np.float64)[:nd]
    maxs = np.asarray(maxs, dtype=np.float64)[:nd]
    if np.any(maxs <= mins):
        raise ValueError("each retained dimension needs min < max")
    scale = (1 << bits) / (maxs - mins)
    slots = np.floor((coords[:, :nd].astype(np.float64) - mins) * scale)
    np.clip(slots, 0, (1 << bits) - 1, out=slots)
    return kernels.morton_interleave(slots.astype(np.int64), bits)


def morton_code(v, bits: int, mins, maxs) -> int:
    return int(morton_codes(_coords_matrix(v), bits, mins, maxs)[0])


def build_zorder_ranges(sample, n_dp: int, bits: int = DEFAULT_ZORDER_BITS) -> PartitionStrategy:
    """Z-order strategy with curve cut points at the sample (i/n_dp)-quantiles.

    Contiguous curve ranges of roughly equal sample mass preserve locality;
    mapping positions mod n_dp would destroy it.
    """
    coords = getattr(sample, "coords", sample)
    coords = _coords_matrix(coords)
    if n_dp < 1:
        raise ValueError(f"n_dp must be >= 1, got {n_dp}")
    if coords.shape[0] == 0:
        raise ValueError("sample must be non-empty")
    if coords.shape[0] < n_dp:
        raise ValueError(f"sample of {coords.shape[0]} points cannot seed {n_dp} ranges")
    nd = min(coords.shape[1], 64 // bits)
    mins = coords[:, :nd].min(axis=0).astype(np.float64)
    maxs = coords[:, :nd].max(axis=0).astype(np.float64)
    flat = maxs <= mins
    maxs[flat] = mins[flat] + 1.0
    codes = np.sort(morton_codes(coords, bits, mins, maxs))
    cuts = np.empty(n_dp - 1, dtype=np.uint64)
    n = codes.shape[0]
    for i in range(1, n_dp):
        cuts[i - 1] = codes[min(n - 1, (i * n) // n_dp)]
    return PartitionStrategy(
        kind=ZORDER, zorder_bits=bits, zorder_mins=mins, zorder_maxs=maxs, zorder_ranges=cuts
    )


def obj_map_batch(strategy: PartitionStrategy, ids: np.ndarray, coords: np.ndarray, n_dp: int) -> np.ndarray:
    """Destination DP copy for each object; int64 array in [0, n_dp)."""
    if n_dp < 1:
        raise ValueError(f"n_dp must be >= 1, got {n_dp}")
    ids = np.asarray(ids, dtype=np.int64)
    if strategy.kind == MOD:
        return ids % n_dp
    if strategy.kind == ZORDER:
        if strategy.zorder_ranges is None:
            raise RuntimeError("zorder strategy used before build_zorder_ranges")
        if strategy.zorder_ranges.shape[0] != n_dp - 1:
            raise ValueError(
                f"zorder ranges were built for {strategy.zorder_ranges.shape[0] + 1} copies, not {n_dp}"
            )
        codes = morton_codes(coords, strategy.zorder_bits, strategy.zorder_mins, strategy.zorder_maxs)
        # side='left': a code equal to a cut point joins the lower range.
        return np.searchsorted(strategy.zorder_ranges, codes, side="left").astype(np.int64)
    fam = strategy.map_family
    if fam is None:
        raise RuntimeError("lshmap strategy has no mapping family")
    coords = _coords_matrix(coords)
    values = kernels.project(coords, *fam.flat_coefficients(), fam.w)
    slots = np.floor(values).astype(np.int64)
    routes = kernels.bucket_hashes(np.ascontiguousarray(slots), 0, kernels.ROUTE_SEED)
    return (routes % np.uint64(n_dp)).astype(np.int64)


def obj_map(strategy: PartitionStrategy, v, n_dp: int) -> int:
    """DP copy for one object; deterministic for a fixed strategy."""
    obj_id = v.id if isinstance(v, FeatureVector) else 0
    return int(obj_map_batch(strategy, np.array([obj_id]), _coords_matrix(v), n_dp)[0])


def bucket_map(key, n_bi: int) -> int:
    """BI copy owning a bucket: route hash modulo copy count."""
    if n_bi < 1:
        raise ValueError(f"n_bi must be >= 1, got {n_bi}")
    route = key.route_hash if isinstance(key, BucketKey) else int(key)
    return int(route % n_bi)


def census(assignments, n: int) -> PartitionCensus:
    """Per-copy object counts and the max-above-mean imbalance percentage."""
    assignments = np.asarray(assignments, dtype=np.int64)
    if assignments.size == 0:
        raise ValueError("census of an empty assignment list")
    if assignments.min() < 0 or assignments.max() >= n:
        raise ValueError(f"assignments outside [0, {n})")
    return census_from_counts(np.bincount(assignments, minlength=n))


def census_from_counts(counts) -> PartitionCensus:
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size == 0 or counts.sum() == 0:
        raise ValueError("census of an empty partition census")
    mean = counts.mean()
    imbalance = 100.0 * (counts.max() - mean) / mean
    return PartitionCensus(counts=counts, imbalance_pct=float(imbalance))
