"""Query-directed multi-probe sequence generation.

For a query's slot vector in one table, each slot i sits at a fractional
offset inside its quantization cell; perturbing slot i by -1 or +1 costs the
squared distance from the query's projection to the corresponding cell
boundary (in units of w). Perturbation sets are enumerated in ascending
total cost with a heap over the classic (shift-last, expand-last) moves,
which visits every valid set exactly once in nondecreasing score order.

A set is valid when it never perturbs the same slot both ways. M slots give
3^M distinct buckets (the unperturbed bucket plus 3^M - 1 perturbations), so
a requested probe count above that is truncated.
"""

from __future__ import annotations

import heapq

import numpy as np

from lshpipe import kernels
from lshpipe.family import BucketKey, FeatureVector, LshFamily, projection_values


def max_probes(m: int) -> int:
    """Number of generatable probes per table for M = m (3^M, capped)."""
    return 3**m if m < 40 else (1 << 62)


def probe_slot_vectors(family: LshFamily, table: int, q, t: int) -> np.ndarray:
    """Slot vectors of the first ``t`` probe buckets, shape (n <= t, M).

    Row 0 is the query's own slot vector; later rows apply perturbation sets
    in ascending total boundary-distance score.
    """
    if t < 1:
        raise ValueError(f"probe count must be >= 1, got {t}")
    coords = q.coords if isinstance(q, FeatureVector) else np.asarray(q)
    values = projection_values(family, table, coords)[0]
    base = np.floor(values).astype(np.int64)
    if t == 1:
        return base.reshape(1, -1)
    frac = values - base  # in [0, 1)

    m = family.M
    # 2M candidate moves sorted by squared distance to the crossed boundary:
    # delta -1 costs frac(i)^2, delta +1 costs (1 - frac(i))^2.
    moves = []
    for i in range(m):
        moves.append((float(frac[i]) ** 2, i, -1))
        moves.append(((1.0 - float(frac[i])) ** 2, i, +1))
    moves.sort()
    scores = [mv[0] for mv in moves]
    n_moves = len(moves)

    rows = [base]
    # Heap entries are (total score, tuple of ascending move indices); the
    # tuple doubles as a deterministic tie-break.
    heap: list[tuple[float, tuple[int, ...]]] = [(scores[0], (0,))]
    while heap and len(rows) < t:
        score, members = heapq.heappop(heap)
        slot_ids = [moves[ix][1] for ix in members]
        if len(set(slot_ids)) == len(slot_ids):
            slots = base.copy()
            for ix in members:
                _, i, delta = moves[ix]
                slots[i] += delta
            rows.append(slots)
        last = members[-1]
        if last + 1 < n_moves:
            heapq.heappush(heap, (score - scores[last] + scores[last + 1], members[:-1] + (last + 1,)))
            heapq.heappush(heap, (score + scores[last + 1], members + (last + 1,)))
    return np.stack(rows)


def probe_sequence(family: LshFamily, table: int, q, t: int) -> list[BucketKey]:
    """The first ``t`` buckets to visit in ``table`` for query ``q``.

    Element 0 is the query's own bucket; later elements are perturbed
    buckets in ascending boundary-distance score. Returns fewer than ``t``
    keys when M is small enough to exhaust all 3^M distinct buckets.
    """
    slots = probe_slot_vectors(family, table, q, t)
    routes = kernels.bucket_hashes(slots, table, kernels.ROUTE_SEED)
    fps = kernels.bucket_hashes(slots, table, kernels.FP_SEED)
    return [
        BucketKey(
            table=table,
            slots=tuple(int(s) for s in slots[i]),
            route_hash=int(routes[i]),
            fingerprint=int(fps[i]),
        )
        for i in range(slots.shape[0])
    ]


def query_probes(family: LshFamily, q, t: int) -> list[BucketKey]:
    """All L x t probes for a query in the canonical global visiting order.

    The order is rank-major: the rank-0 bucket of every table first (tables
    ascending), then every table's rank-1 probe, and so on. Candidate caps
    are applied along this order, which reduces to plain table order for
    t = 1 (the basic-LSH visiting sequence).
    """
    sequences = [probe_sequence(family, j, q, t) for j in range(family.L)]
    ordered: list[BucketKey] = []
    for rank in range(t):
        for j in range(family.L):
            if rank < len(sequences[j]):
                ordered.append(sequences[j][rank])
    return ordered
