"""p-stable LSH hash family: sampling, evaluation, bucket keys.

Each elementary hash is ``h(v) = floor((a . v + b) / w)`` with ``a`` drawn
from a standard normal per coordinate and ``b`` uniform on ``[0, w)``. A
table concatenates M elementary hashes; L independent tables form the index.

Sampling is counter-based: the coefficients of function (table j, slot i)
come from a Philox stream keyed by (seed, j, i), so enlarging L or M never
perturbs previously sampled functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lshpipe import kernels

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class FeatureVector:
    """One indexed point: a non-negative 64-bit id plus float32 coordinates."""

    id: int
    coords: np.ndarray

    def __post_init__(self):
        if self.id < 0:
            raise ValueError(f"object id must be non-negative, got {self.id}")
        coords = np.ascontiguousarray(self.coords, dtype=np.float32)
        object.__setattr__(self, "coords", coords)

    @property
    def d(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class BucketKey:
    """Identity of one bucket: table index, slot tuple, and two 64-bit digests.

    route_hash drives partition routing; fingerprint resolves exact matches
    inside a bucket store. Two keys denote the same bucket iff table,
    route_hash and fingerprint all agree; slots are kept for debugging only
    and are not persisted by bucket stores.
    """

    table: int
    slots: tuple[int, ...]
    route_hash: int
    fingerprint: int

    def same_bucket(self, other: "BucketKey") -> bool:
        return (
            self.table == other.table
            and self.route_hash == other.route_hash
            and self.fingerprint == other.fingerprint
        )

    @property
    def store_key(self) -> tuple[int, int, int]:
        return (self.table, self.route_hash, self.fingerprint)


@dataclass(frozen=True)
class LshFamily:
    """L tables of M concatenated p-stable hash functions over dimension d."""

    d: int
    L: int
    M: int
    w: float
    seed: int
    a: np.ndarray = field(repr=False)  # (L, M, d) float64
    b: np.ndarray = field(repr=False)  # (L, M) float64

    def table_coefficients(self, table: int) -> tuple[np.ndarray, np.ndarray]:
        if not 0 <= table < self.L:
            raise ValueError(f"table index {table} outside [0, {self.L})")
        return self.a[table], self.b[table]

    def flat_coefficients(self) -> tuple[np.ndarray, np.ndarray]:
        return self.a.reshape(self.L * self.M, self.d), self.b.reshape(self.L * self.M)


def _function_rng(seed: int, table: int, index: int) -> np.random.Generator:
    key = np.array([seed & _MASK64, ((table & 0xFFFFFFFF) << 32) | (index & 0xFFFFFFFF)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_family(seed: int, d: int, L: int, M: int, w: float) -> LshFamily:
    """Sample a full family deterministically from (seed, d, L, M, w)."""
    if d < 1 or L < 1 or M < 1:
        raise ValueError(f"d, L, M must all be >= 1 (got d={d}, L={L}, M={M})")
    if not w > 0:
        raise ValueError(f"quantization width w must be positive, got {w}")
    a = np.empty((L, M, d), dtype=np.float64)
    b = np.empty((L, M), dtype=np.float64)
    for j in range(L):
        for i in range(M):
            rng = _function_rng(seed, j, i)
            a[j, i] = rng.standard_normal(d)
            b[j, i] = rng.random() * w
    return LshFamily(d=d, L=L, M=M, w=float(w), seed=seed, a=a, b=b)


def _check_dim(family: LshFamily, coords: np.ndarray) -> np.ndarray:
    coords = np.ascontiguousarray(coords, dtype=np.float32)
    if coords.ndim == 1:
        coords = coords.reshape(1, -1)
    if coords.shape[1] != family.d:
        raise ValueError(f"vector dimension {coords.shape[1]} != family dimension {family.d}")
    return coords


def projection_values(family: LshFamily, table: int, coords: np.ndarray) -> np.ndarray:
    """Raw (a.v + b) / w values for one table; shape (n, M) float64."""
    coords = _check_dim(family, coords)
    a, b = family.table_coefficients(table)
    return kernels.project(coords, a, b, family.w)


def hash_slots(family: LshFamily, coords: np.ndarray) -> np.ndarray:
    """Slot matrix for all tables at once; shape (n, L, M) int64."""
    coords = _check_dim(family, coords)
    a_flat, b_flat = family.flat_coefficients()
    values = kernels.project(coords, a_flat, b_flat, family.w)
    slots = np.floor(values).astype(np.int64)
    return slots.reshape(coords.shape[0], family.L, family.M)


def bucket_digests(family: LshFamily, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slots plus per-table route/fingerprint digests for a batch of vectors.

    Returns (slots (n, L, M) int64, routes (n, L) uint64, fps (n, L) uint64).
    """
    slots = hash_slots(family, coords)
    n = slots.shape[0]
    routes = np.empty((n, family.L), dtype=np.uint64)
    fps = np.empty((n, family.L), dtype=np.uint64)
    for j in range(family.L):
        table_slots = np.ascontiguousarray(slots[:, j, :])
        routes[:, j] = kernels.bucket_hashes(table_slots, j, kernels.ROUTE_SEED)
        fps[:, j] = kernels.bucket_hashes(table_slots, j, kernels.FP_SEED)
    return slots, routes, fps


def key_from_slots(table: int, slots: np.ndarray) -> BucketKey:
    """Build a BucketKey (with both digests) from an explicit slot vector."""
    row = np.ascontiguousarray(slots, dtype=np.int64).reshape(1, -1)
    route = int(kernels.bucket_hashes(row, table, kernels.ROUTE_SEED)[0])
    fp = int(kernels.bucket_hashes(row, table, kernels.FP_SEED)[0])
    return BucketKey(table=table, slots=tuple(int(s) for s in row[0]), route_hash=route, fingerprint=fp)


def hash_point(family: LshFamily, table: int, v) -> BucketKey:
    """Hash one vector into its bucket for the given table."""
    coords = v.coords if isinstance(v, FeatureVector) else np.asarray(v)
    values = projection_values(family, table, coords)
    slots = np.floor(values[0]).astype(np.int64)
    return key_from_slots(table, slots)


def tune_width(coords: np.ndarray, sample_size: int = 1000, seed: int = 0, factor: float = 4.0) -> float:
    """Propose w as ``factor`` times the mean sample nearest-neighbor distance.

    Keeps buckets populated at useful granularity when no width is given.
    """
    coords = np.asarray(coords, dtype=np.float32)
    n = coords.shape[0]
    if n < 2:
        raise ValueError("need at least two vectors to tune the width")
    if n > sample_size:
        idx = np.random.default_rng(seed).choice(n, size=sample_size, replace=False)
        sample = coords[idx].astype(np.float64)
    else:
        sample = coords.astype(np.float64)
    sq = ((sample[:, None, :] - sample[None, :, :]) ** 2).sum(axis=2) if sample.shape[0] <= 256 else None
    if sq is None:
        norms = (sample * sample).sum(axis=1)
        sq = norms[:, None] + norms[None, :] - 2.0 * (sample @ sample.T)
        np.maximum(sq, 0.0, out=sq)
    np.fill_diagonal(sq, np.inf)
    nn = np.sqrt(sq.min(axis=1))
    w = factor * float(nn.mean())
    if not w > 0:
        raise ValueError("degenerate sample: nearest-neighbor distances are all zero")
    return w
