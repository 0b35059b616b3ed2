"""Message body layouts for the five pipeline stages.

All bodies are fixed little-endian layouts with no padding; coordinates are
serialized as float32 and distances as float64. These byte layouts are the
inter-process contract of the socket transport.

store (IR -> DP), tag = destination DP copy:
    u64 obj_id | u32 d | d x f32 coords

index entry (IR -> BI), tag = bucket route hash:
    u64 route_hash | u64 fingerprint | u64 obj_id | u16 table | u32 dp_copy

query probes (QR -> BI), tag = destination BI copy:
    u64 query_id | u32 k | u32 cap (0 = unlimited) | u32 d | u32 n_probes
    | d x f32 coords | n_probes x (u64 route_hash | u64 fingerprint
    | u16 table | u32 probe_rank)

candidates (BI -> DP), tag = destination DP copy:
    u64 query_id | u32 k | u32 d | u32 n | u32 reserved (0)
    | n x u64 obj_id | d x f32 coords

local top-k (DP -> AG), tag = query id:
    u64 query_id | u32 dp_copy | u32 n | n x (u64 obj_id | f64 dist_sq)

query start (QR -> AG), tag = query id:
    u64 query_id | u32 n_bi_contacted | u32 k

BI report (BI -> AG), tag = query id:
    u64 query_id | u32 n_candidate_messages | u32 n_candidates

result (AG -> collector), tag = query id:
    u64 query_id | u32 n | u32 bi_touched | u32 dp_touched | u64 candidates
    | u32 reserved (0) | n x (u64 obj_id | f64 dist_sq)

The reserved fields pad the variable-length sections to 8-byte alignment so
id/pair arrays parse zero-copy.
"""

from __future__ import annotations

import struct

import numpy as np

_STORE = struct.Struct("<QI")
_ENTRY = struct.Struct("<QQQHI")
_PROBES_HEAD = struct.Struct("<QIIII")
_CAND_HEAD = struct.Struct("<QIIII")
_TOPK_HEAD = struct.Struct("<QII")
_START = struct.Struct("<QII")
_REPORT = struct.Struct("<QII")
_RESULT_HEAD = struct.Struct("<QIIIQI")

PROBE_DTYPE = np.dtype([("route", "<u8"), ("fp", "<u8"), ("table", "<u2"), ("rank", "<u4")])
PAIR_DTYPE = np.dtype([("id", "<u8"), ("dist", "<f8")])


def _f32_bytes(coords) -> bytes:
    return np.ascontiguousarray(coords, dtype="<f4").tobytes()


def pack_store(obj_id: int, coords) -> bytes:
    arr = np.ascontiguousarray(coords, dtype="<f4")
    return _STORE.pack(obj_id, arr.shape[0]) + arr.tobytes()


def unpack_store(payload: bytes) -> tuple[int, np.ndarray]:
    obj_id, d = _STORE.unpack_from(payload)
    coords = np.frombuffer(payload, dtype="<f4", count=d, offset=_STORE.size)
    return obj_id, coords


def pack_index_entry(route: int, fp: int, obj_id: int, table: int, dp_copy: int) -> bytes:
    return _ENTRY.pack(route, fp, obj_id, table, dp_copy)


def unpack_index_entry(payload: bytes) -> tuple[int, int, int, int, int]:
    return _ENTRY.unpack(payload)


def pack_query_probes(query_id: int, k: int, cap: int | None, coords, probes: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(coords, dtype="<f4")
    probes = np.ascontiguousarray(probes, dtype=PROBE_DTYPE)
    head = _PROBES_HEAD.pack(query_id, k, 0 if cap is None else cap, arr.shape[0], probes.shape[0])
    return head + arr.tobytes() + probes.tobytes()


def unpack_query_probes(payload: bytes) -> tuple[int, int, int | None, np.ndarray, np.ndarray]:
    query_id, k, cap, d, n = _PROBES_HEAD.unpack_from(payload)
    off = _PROBES_HEAD.size
    coords = np.frombuffer(payload, dtype="<f4", count=d, offset=off)
    probes = np.frombuffer(payload, dtype=PROBE_DTYPE, count=n, offset=off + 4 * d)
    return query_id, k, (None if cap == 0 else cap), coords, probes


def pack_candidates(query_id: int, k: int, coords, obj_ids) -> bytes:
    arr = np.ascontiguousarray(coords, dtype="<f4")
    ids = np.ascontiguousarray(obj_ids, dtype="<u8")
    head = _CAND_HEAD.pack(query_id, k, arr.shape[0], ids.shape[0], 0)
    return head + ids.tobytes() + arr.tobytes()


def unpack_candidates(payload: bytes) -> tuple[int, int, np.ndarray, np.ndarray]:
    query_id, k, d, n, _ = _CAND_HEAD.unpack_from(payload)
    off = _CAND_HEAD.size
    ids = np.frombuffer(payload, dtype="<u8", count=n, offset=off)
    coords = np.frombuffer(payload, dtype="<f4", count=d, offset=off + 8 * n)
    return query_id, k, coords, ids


def _pack_pairs(ids, dists) -> bytes:
    pairs = np.empty(len(ids), dtype=PAIR_DTYPE)
    pairs["id"] = ids
    pairs["dist"] = dists
    return pairs.tobytes()


def pack_local_topk(query_id: int, dp_copy: int, ids, dists) -> bytes:
    return _TOPK_HEAD.pack(query_id, dp_copy, len(ids)) + _pack_pairs(ids, dists)


def unpack_local_topk(payload: bytes) -> tuple[int, int, np.ndarray, np.ndarray]:
    query_id, dp_copy, n = _TOPK_HEAD.unpack_from(payload)
    pairs = np.frombuffer(payload, dtype=PAIR_DTYPE, count=n, offset=_TOPK_HEAD.size)
    return query_id, dp_copy, pairs["id"].astype(np.int64), pairs["dist"].astype(np.float64)


def pack_query_start(query_id: int, n_bi_contacted: int, k: int) -> bytes:
    return _START.pack(query_id, n_bi_contacted, k)


def unpack_query_start(payload: bytes) -> tuple[int, int, int]:
    return _START.unpack(payload)


def pack_bi_report(query_id: int, n_candidate_messages: int, n_candidates: int) -> bytes:
    return _REPORT.pack(query_id, n_candidate_messages, n_candidates)


def unpack_bi_report(payload: bytes) -> tuple[int, int, int]:
    return _REPORT.unpack(payload)


def pack_result(
    query_id: int, ids, dists, bi_touched: int, dp_touched: int, candidates: int
) -> bytes:
    head = _RESULT_HEAD.pack(query_id, len(ids), bi_touched, dp_touched, candidates, 0)
    return head + _pack_pairs(ids, dists)


def unpack_result(payload: bytes) -> tuple[int, np.ndarray, np.ndarray, int, int, int]:
    query_id, n, bi_touched, dp_touched, candidates, _ = _RESULT_HEAD.unpack_from(payload)
    pairs = np.frombuffer(payload, dtype=PAIR_DTYPE, count=n, offset=_RESULT_HEAD.size)
    return (
        query_id,
        pairs["id"].astype(np.int64),
        pairs["dist"].astype(np.float64),
        bi_touched,
        dp_touched,
        candidates,
    )
