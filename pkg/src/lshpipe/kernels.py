"""Hot numeric kernels: projections, bucket hashing, distances, Morton codes.

Every kernel has two implementations, a numba ``@njit`` version and a pure
numpy fallback. The active one is chosen at import time: numba is used when
it imports cleanly unless the environment variable ``LSHPIPE_NUMBA`` is set
to ``0``. Both variants stay importable through :data:`IMPLEMENTATIONS` so
the benchmark suite can time them side by side.

Integer kernels (bucket hashing, Morton interleaving) produce bit-identical
output on both paths. Float kernels accumulate in float64 but may differ in
the last ulp between paths because numpy reduces pairwise while the numba
loops accumulate in index order; each path is deterministic on its own.

On the numba path, projections are additionally batch-shape-independent: a
vector hashes bit-identically whether projected alone or inside any batch,
which makes distributed results exactly reproducible against the sequential
oracle. The numpy fallback delegates to BLAS, whose per-row rounding is not
formally guaranteed across batch shapes; a slot can flip only when a
projection lands within ~1e-13 of a quantization boundary, which is
negligible in practice but not impossible.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("LSHPIPE_NUMBA", "1") != "0"

# splitmix64 constants
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_ONE = np.uint64(1)

# Independent seeds for the two 64-bit bucket digests: ROUTE drives
# partition routing, FP disambiguates buckets within one store.
ROUTE_SEED = np.uint64(0x2545F4914F6CDD1D)
FP_SEED = np.uint64(0x9E6C63D0876A9F4B)


# ---------------------------------------------------------------------------
# pure numpy implementations
# ---------------------------------------------------------------------------


def _np_project(vectors, a, b, w):
    """(a_k . v_i + b_k) / w for every vector i and hash function k.

    vectors: (n, d) float32; a: (K, d) float64; b: (K,) float64.
    Returns (n, K) float64.
    """
    proj = vectors.astype(np.float64) @ a.T
    return (proj + b) / w


def _np_mix64(z):
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


def _np_bucket_hashes(slots, table, seed):
    """One 64-bit digest per row of ``slots`` (int64, shape (n, M)); seed uint64."""
    n, m = slots.shape
    # Python-int modular arithmetic: numpy warns on scalar uint64 overflow.
    init = (int(seed) ^ (((table + 1) * int(_GAMMA)) & 0xFFFFFFFFFFFFFFFF)) & 0xFFFFFFFFFFFFFFFF
    state = _np_mix64(np.full(n, init, dtype=np.uint64))
    u = np.ascontiguousarray(slots, dtype=np.int64).view(np.uint64)
    for i in range(m):
        state = _np_mix64((state ^ u[:, i]) + _GAMMA)
    return state


def _np_sq_dists(q, points):
    """Squared Euclidean distance from q (d,) to every row of points (m, d)."""
    diff = points.astype(np.float64) - q.astype(np.float64)
    return (diff * diff).sum(axis=1)


def _np_pairwise_sq_dists(queries, points):
    """(nq, m) squared distances; norms + Gram-matrix formulation."""
    q = queries.astype(np.float64)
    x = points.astype(np.float64)
    qq = (q * q).sum(axis=1)[:, None]
    xx = (x * x).sum(axis=1)[None, :]
    out = qq + xx - 2.0 * (q @ x.T)
    np.maximum(out, 0.0, out=out)
    return out


def _np_local_topk(points, rows, ids, q, k):
    """Distances of points[rows] to q plus k-smallest selection by (dist, id).

    ids must be unique; returns (ids, dists) sorted ascending, length <= k.
    """
    pts = points[rows]
    diff = pts.astype(np.float64) - q.astype(np.float64)
    dists = (diff * diff).sum(axis=1)
    m = dists.shape[0]
    if m > k:
        part = np.argpartition(dists, k - 1)
        threshold = dists[part[:k]].max()
        keep = np.flatnonzero(dists <= threshold)
    else:
        keep = np.arange(m)
    order = np.lexsort((ids[keep], dists[keep]))[:k]
    sel = keep[order]
    return ids[sel].astype(np.int64), dists[sel]


def _np_morton_interleave(slots, bits):
    """Interleave per-dimension slot values (n, nd) into one code per row.

    Dimension 0 contributes the least-significant bit of each group of nd
    bits; bit level l of dimension k lands at position l * nd + k.
    """
    n, nd = slots.shape
    u = slots.astype(np.uint64)
    out = np.zeros(n, dtype=np.uint64)
    for level in range(bits):
        for dim in range(nd):
            bit = (u[:, dim] >> np.uint64(level)) & _ONE
            out |= bit << np.uint64(level * nd + dim)
    return out


def _np_morton_deinterleave(codes, nd, bits):
    n = codes.shape[0]
    out = np.zeros((n, nd), dtype=np.uint64)
    for level in range(bits):
        for dim in range(nd):
            bit = (codes >> np.uint64(level * nd + dim)) & _ONE
            out[:, dim] |= bit << np.uint64(level)
    return out


_NUMPY_IMPLS = {
    "project": _np_project,
    "bucket_hashes": _np_bucket_hashes,
    "sq_dists": _np_sq_dists,
    "pairwise_sq_dists": _np_pairwise_sq_dists,
    "local_topk": _np_local_topk,
    "morton_interleave": _np_morton_interleave,
    "morton_deinterleave": _np_morton_deinterleave,
}


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    # fastmath vectorizes the dot product; the accumulation order is fixed
    # by the compiled binary and independent of the batch shape, so a vector
    # hashes identically whether projected alone or inside any batch.
    @njit(cache=True, nogil=True, fastmath=True)
    def _nb_project(vectors, a, b, w):
        n, d = vectors.shape
        k = a.shape[0]
        out = np.empty((n, k), dtype=np.float64)
        for i in range(n):
            for f in range(k):
                acc = 0.0
                for j in range(d):
                    acc += a[f, j] * np.float64(vectors[i, j])
                out[i, f] = (acc + b[f]) / w
        return out

    @njit(cache=True, nogil=True)
    def _nb_mix64(z):
        z = (z ^ (z >> _S30)) * _MIX1
        z = (z ^ (z >> _S27)) * _MIX2
        return z ^ (z >> _S31)

    @njit(cache=True, nogil=True)
    def _nb_bucket_hashes(slots, table, seed):
        n, m = slots.shape
        out = np.empty(n, dtype=np.uint64)
        init = _nb_mix64(seed ^ (np.uint64(table + 1) * _GAMMA))
        for i in range(n):
            state = init
            for j in range(m):
                state = _nb_mix64((state ^ np.uint64(slots[i, j])) + _GAMMA)
            out[i] = state
        return out

    @njit(cache=True, nogil=True)
    def _nb_sq_dists(q, points):
        m, d = points.shape
        out = np.empty(m, dtype=np.float64)
        for i in range(m):
            acc = 0.0
            for j in range(d):
                diff = np.float64(points[i, j]) - np.float64(q[j])
                acc += diff * diff
            out[i] = acc
        return out

    @njit(cache=True, nogil=True)
    def _nb_pairwise_sq_dists(queries, points):
        nq = queries.shape[0]
        m, d = points.shape
        out = np.empty((nq, m), dtype=np.float64)
        for qi in range(nq):
            for i in range(m):
                acc = 0.0
                for j in range(d):
                    diff = np.float64(points[i, j]) - np.float64(queries[qi, j])
                    acc += diff * diff
                out[qi, i] = acc
        return out

    @njit(cache=True, nogil=True)
    def _nb_local_topk(points, rows, ids, q, k):
        m = rows.shape[0]
        d = points.shape[1]
        kk = min(k, m)
        best_d = np.empty(kk, dtype=np.float64)
        best_i = np.empty(kk, dtype=np.int64)
        size = 0
        for r in range(m):
            row = rows[r]
            acc = 0.0
            for j in range(d):
                diff = np.float64(points[row, j]) - np.float64(q[j])
                acc += diff * diff
            oid = ids[r]
            if size < kk:
                pos = size
                size += 1
            elif acc < best_d[size - 1] or (acc == best_d[size - 1] and oid < best_i[size - 1]):
                pos = size - 1
            else:
                continue
            while pos > 0 and (
                best_d[pos - 1] > acc or (best_d[pos - 1] == acc and best_i[pos - 1] > oid)
            ):
                best_d[pos] = best_d[pos - 1]
                best_i[pos] = best_i[pos - 1]
                pos -= 1
            best_d[pos] = acc
            best_i[pos] = oid
        return best_i, best_d

    @njit(cache=True, nogil=True)
    def _nb_morton_interleave(slots, bits):
        n, nd = slots.shape
        out = np.zeros(n, dtype=np.uint64)
        for i in range(n):
            code = np.uint64(0)
            for level in range(bits):
                for dim in range(nd):
                    bit = (np.uint64(slots[i, dim]) >> np.uint64(level)) & _ONE
                    code |= bit << np.uint64(level * nd + dim)
            out[i] = code
        return out

    @njit(cache=True, nogil=True)
    def _nb_morton_deinterleave(codes, nd, bits):
        n = codes.shape[0]
        out = np.zeros((n, nd), dtype=np.uint64)
        for i in range(n):
            for level in range(bits):
                for dim in range(nd):
                    bit = (codes[i] >> np.uint64(level * nd + dim)) & _ONE
                    out[i, dim] |= bit << np.uint64(level)
        return out

    _NUMBA_IMPLS = {
        "project": _nb_project,
        "bucket_hashes": _nb_bucket_hashes,
        "sq_dists": _nb_sq_dists,
        "pairwise_sq_dists": _nb_pairwise_sq_dists,
        "local_topk": _nb_local_topk,
        "morton_interleave": _nb_morton_interleave,
        "morton_deinterleave": _nb_morton_deinterleave,
    }
else:  # pragma: no cover
    _NUMBA_IMPLS = {}

IMPLEMENTATIONS = {"numpy": _NUMPY_IMPLS}
if HAS_NUMBA:
    IMPLEMENTATIONS["numba"] = _NUMBA_IMPLS

ACTIVE = "numba" if USE_NUMBA else "numpy"
_active = IMPLEMENTATIONS[ACTIVE]

project = _active["project"]
bucket_hashes = _active["bucket_hashes"]
sq_dists = _active["sq_dists"]
pairwise_sq_dists = _active["pairwise_sq_dists"]
local_topk = _active["local_topk"]
morton_interleave = _active["morton_interleave"]
morton_deinterleave = _active["morton_deinterleave"]


def bucket_hash_single(slots, table, seed):
    """Digest one slot vector; wraps the batch kernel."""
    row = np.asarray(slots, dtype=np.int64).reshape(1, -1)
    return int(bucket_hashes(row, table, seed)[0])


def warmup():
    """Force JIT compilation of every active kernel (no-op on numpy path)."""
    v = np.zeros((2, 3), dtype=np.float32)
    a = np.zeros((2, 3), dtype=np.float64)
    b = np.zeros(2, dtype=np.float64)
    project(v, a, b, 1.0)
    slots = np.zeros((2, 2), dtype=np.int64)
    bucket_hashes(slots, 0, ROUTE_SEED)
    sq_dists(v[0], v)
    pairwise_sq_dists(v, v)
    local_topk(v, np.zeros(2, dtype=np.int64), np.zeros(2, dtype=np.int64), v[0], 1)
    codes = morton_interleave(slots, 2)
    morton_deinterleave(codes, 2, 2)
