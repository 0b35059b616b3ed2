"""Single-process LSH index and search: the oracle for the distributed path.

The index holds L hash tables mapping bucket digests to object-id lists plus
one copy of the dataset coordinates. Search visits the query's L x T probe
buckets in the canonical global order, gathers candidates (honoring an
optional candidate cap along that order), ranks by exact squared distance
and returns the top k. The distributed pipeline must reproduce these result
lists bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lshpipe import ranking
from lshpipe.family import FeatureVector, LshFamily, bucket_digests
from lshpipe.probing import query_probes
from lshpipe.ranking import Neighbor


@dataclass(frozen=True)
class SearchParams:
    """k neighbors wanted, T probes per table, optional candidate cap."""

    k: int
    T: int = 1
    candidate_cap: int | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.candidate_cap is not None and self.candidate_cap < self.k:
            raise ValueError(f"candidate_cap {self.candidate_cap} must be >= k {self.k}")


class SequentialIndex:
    """In-memory L-table index over one dataset; read-only once built."""

    def __init__(self, family: LshFamily):
        self.family = family
        self._tables: list[dict[tuple[int, int], np.ndarray]] = [{} for _ in range(family.L)]
        self._coords: np.ndarray | None = None
        self._row_of: np.ndarray | None = None
        self._ids: np.ndarray | None = None

    @property
    def size(self) -> int:
        return 0 if self._ids is None else int(self._ids.shape[0])

    def build(self, ids: np.ndarray, coords: np.ndarray) -> None:
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        coords = np.ascontiguousarray(coords, dtype=np.float32)
        if ids.shape[0] != coords.shape[0]:
            raise ValueError("ids and coords row counts differ")
        self._ids = ids
        self._coords = coords
        max_id = int(ids.max()) if ids.size else -1
        self._row_of = np.full(max_id + 1, -1, dtype=np.int64)
        self._row_of[ids] = np.arange(ids.shape[0])

        _, routes, fps = bucket_digests(self.family, coords)
        for j in range(self.family.L):
            table: dict[tuple[int, int], list[int]] = {}
            rj, fj = routes[:, j], fps[:, j]
            for row in range(ids.shape[0]):
                key = (int(rj[row]), int(fj[row]))
                table.setdefault(key, []).append(int(ids[row]))
            # Freeze buckets sorted by object id: a canonical order shared
            # with the distributed bucket stores, so candidate caps truncate
            # identically on both paths.
            self._tables[j] = {key: np.array(sorted(members), dtype=np.int64) for key, members in table.items()}

    def candidate_ids(self, q, params: SearchParams) -> np.ndarray:
        """Deduplicated candidate ids in probe order, cap applied."""
        probes = query_probes(self.family, q, params.T)
        cap = params.candidate_cap
        seen: set[int] = set()
        out: list[int] = []
        for key in probes:
            bucket = self._tables[key.table].get((key.route_hash, key.fingerprint))
            if bucket is None:
                continue
            for obj in bucket:
                obj = int(obj)
                if obj in seen:
                    continue
                seen.add(obj)
                out.append(obj)
                if cap is not None and len(out) >= cap:
                    return np.array(out, dtype=np.int64)
        return np.array(out, dtype=np.int64)

    def search(self, q, params: SearchParams) -> list[Neighbor]:
        if self._coords is None or self.size == 0:
            return []
        coords = q.coords if isinstance(q, FeatureVector) else np.asarray(q)
        cand = self.candidate_ids(q, params)
        if cand.size == 0:
            return []
        rows = self._row_of[cand]
        dists = ranking.batch_distances(coords, self._coords[rows])
        ids, top_dists = ranking.top_k_arrays(cand, dists, params.k)
        return ranking.neighbors_from_arrays(ids, top_dists)


def build_index(family: LshFamily, dataset) -> SequentialIndex:
    """Index a dataset given as (ids, coords) arrays or a VectorSet-like."""
    index = SequentialIndex(family)
    ids = getattr(dataset, "ids", None)
    coords = getattr(dataset, "coords", None)
    if ids is None or coords is None:
        ids, coords = dataset
    index.build(np.asarray(ids), np.asarray(coords))
    return index


def sequential_search(index: SequentialIndex, q, params: SearchParams) -> list[Neighbor]:
    """Search a built index; returns neighbors sorted by (dist_sq, obj_id)."""
    return index.search(q, params)
