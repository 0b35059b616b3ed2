"""Distance computation and top-k candidate selection.

Ranking is totally ordered by (dist_sq, obj_id): distances accumulate in
double precision and ties break toward the smaller object id, so sequential
and distributed searches produce identical result lists.
"""

from __future__ import annotations

from typing import Iterable, NamedTuple

import numpy as np

from lshpipe import kernels
from lshpipe.family import FeatureVector


class Neighbor(NamedTuple):
    obj_id: int
    dist_sq: float


def _coords(v) -> np.ndarray:
    arr = v.coords if isinstance(v, FeatureVector) else np.asarray(v)
    return np.ascontiguousarray(arr, dtype=np.float32)


def distance_sq(u, v) -> float:
    """Squared Euclidean distance, accumulated in float64."""
    cu, cv = _coords(u), _coords(v)
    if cu.shape != cv.shape:
        raise ValueError(f"dimension mismatch: {cu.shape} vs {cv.shape}")
    return float(kernels.sq_dists(cu, cv.reshape(1, -1))[0])


def batch_distances(query_coords: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Squared distances from one query to many rows; float64 output."""
    q = np.ascontiguousarray(query_coords, dtype=np.float32)
    pts = np.ascontiguousarray(points, dtype=np.float32)
    if pts.shape[1] != q.shape[0]:
        raise ValueError(f"dimension mismatch: {pts.shape[1]} vs {q.shape[0]}")
    return kernels.sq_dists(q, pts)


def top_k(candidates: Iterable[Neighbor], k: int) -> list[Neighbor]:
    """The k smallest candidates by (dist_sq, obj_id), duplicates collapsed.

    Returns fewer than k entries when the input is short; a duplicated
    obj_id keeps its smallest distance.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ordered = sorted(candidates, key=lambda c: (c.dist_sq, c.obj_id))
    out: list[Neighbor] = []
    seen: set[int] = set()
    for cand in ordered:
        if cand.obj_id in seen:
            continue
        seen.add(cand.obj_id)
        out.append(Neighbor(int(cand.obj_id), float(cand.dist_sq)))
        if len(out) == k:
            break
    return out


def top_k_arrays(ids: np.ndarray, dists: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Array form of :func:`top_k` for already-deduplicated candidates.

    Selects via argpartition, then resolves boundary ties exactly by
    (dist_sq, obj_id) so the outcome matches a full sort.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    m = ids.shape[0]
    if m == 0:
        return ids[:0].astype(np.int64), dists[:0].astype(np.float64)
    if m > k:
        part = np.argpartition(dists, k - 1)
        threshold = dists[part[:k]].max()
        keep = np.flatnonzero(dists <= threshold)
    else:
        keep = np.arange(m)
    order = np.lexsort((ids[keep], dists[keep]))[:k]
    sel = keep[order]
    return ids[sel].astype(np.int64), dists[sel].astype(np.float64)


def neighbors_from_arrays(ids: np.ndarray, dists: np.ndarray) -> list[Neighbor]:
    return [Neighbor(int(i), float(d)) for i, d in zip(ids, dists)]
