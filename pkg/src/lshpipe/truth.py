"""Exact brute-force k-NN ground truth for recall measurement.

Deliberately independent of the LSH search path: distances come from a
chunked norms-plus-Gram-matrix computation in float64 and selection from a
full lexicographic sort, so the oracle shares no code with the index. Ties
break toward the smaller object id, matching the search ranking contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lshpipe.dataio import VectorSet, read_vectors, write_vectors

_QUERY_CHUNK = 128


@dataclass(frozen=True)
class GroundTruth:
    """Per query, the true nearest object ids in ascending distance order."""

    ids: np.ndarray  # (n_queries, k) int64
    dists_sq: np.ndarray | None = None  # (n_queries, k) float64

    @property
    def k(self) -> int:
        return self.ids.shape[1]

    def __len__(self) -> int:
        return self.ids.shape[0]


def brute_force_knn(reference: VectorSet, queries: VectorSet, k: int) -> GroundTruth:
    """Exact k smallest distances per query over the whole reference set."""
    n_ref = len(reference)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n_ref:
        raise ValueError(f"k={k} exceeds reference size {n_ref}")
    ref = reference.coords.astype(np.float64)
    ref_ids = reference.ids
    ref_norms = (ref * ref).sum(axis=1)
    n_q = len(queries)
    out_ids = np.empty((n_q, k), dtype=np.int64)
    out_dists = np.empty((n_q, k), dtype=np.float64)
    for start in range(0, n_q, _QUERY_CHUNK):
        stop = min(start + _QUERY_CHUNK, n_q)
        q = queries.coords[start:stop].astype(np.float64)
        d2 = (q * q).sum(axis=1)[:, None] + ref_norms[None, :] - 2.0 * (q @ ref.T)
        np.maximum(d2, 0.0, out=d2)
        for r in range(d2.shape[0]):
            order = np.lexsort((ref_ids, d2[r]))[:k]
            out_ids[start + r] = ref_ids[order]
            out_dists[start + r] = d2[r, order]
    return GroundTruth(ids=out_ids, dists_sq=out_dists)


def save_ground_truth(path: str, truth: GroundTruth) -> None:
    """Persist as an int32 id-list file (the public BIGANN distribution layout)."""
    write_vectors(path, "int32", truth.ids.astype(np.int32))


def load_ground_truth(path: str) -> GroundTruth:
    ids = read_vectors(path, kind="int32").coords.astype(np.int64)
    return GroundTruth(ids=ids)
