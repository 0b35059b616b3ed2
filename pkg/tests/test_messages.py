"""Message body codecs: round trips and frozen byte layouts."""

import struct

import numpy as np

from lshpipe import messages


def test_store_roundtrip_and_layout():
    coords = np.array([1.5, -2.0, 3.25], dtype=np.float32)
    payload = messages.pack_store(42, coords)
    assert payload == struct.pack("<QI", 42, 3) + coords.tobytes()
    obj_id, got = messages.unpack_store(payload)
    assert obj_id == 42
    assert np.array_equal(got, coords)


def test_index_entry_layout():
    payload = messages.pack_index_entry(2**63 + 5, 17, 99, 3, 7)
    assert len(payload) == 30  # u64 + u64 + u64 + u16 + u32, no padding
    assert messages.unpack_index_entry(payload) == (2**63 + 5, 17, 99, 3, 7)


def test_query_probes_roundtrip():
    coords = np.arange(4, dtype=np.float32)
    probes = np.array([(111, 222, 2, 0), (333, 444, 0, 1)], dtype=messages.PROBE_DTYPE)
    payload = messages.pack_query_probes(9, 10, None, coords, probes)
    qid, k, cap, got_coords, got_probes = messages.unpack_query_probes(payload)
    assert (qid, k, cap) == (9, 10, None)
    assert np.array_equal(got_coords, coords)
    assert np.array_equal(got_probes, probes)
    # probe record is packed to 22 bytes
    assert messages.PROBE_DTYPE.itemsize == 22
    # cap is explicit when set
    payload = messages.pack_query_probes(9, 10, 18, coords, probes)
    assert messages.unpack_query_probes(payload)[2] == 18


def test_candidates_roundtrip():
    coords = np.array([0.5, 1.5], dtype=np.float32)
    ids = np.array([5, 3, 8], dtype=np.int64)
    payload = messages.pack_candidates(4, 10, coords, ids)
    qid, k, got_coords, got_ids = messages.unpack_candidates(payload)
    assert (qid, k) == (4, 10)
    assert np.array_equal(got_coords, coords)
    assert got_ids.tolist() == [5, 3, 8]
    # 24-byte header, then 8-aligned ids, then coords
    assert len(payload) == 24 + 24 + 8


def test_local_topk_roundtrip():
    payload = messages.pack_local_topk(6, 2, [9, 4], [1.25, 2.5])
    qid, dp_copy, ids, dists = messages.unpack_local_topk(payload)
    assert (qid, dp_copy) == (6, 2)
    assert ids.tolist() == [9, 4]
    assert dists.tolist() == [1.25, 2.5]
    assert messages.PAIR_DTYPE.itemsize == 16


def test_accounting_messages():
    assert messages.unpack_query_start(messages.pack_query_start(7, 3, 10)) == (7, 3, 10)
    assert messages.unpack_bi_report(messages.pack_bi_report(7, 4, 123)) == (7, 4, 123)


def test_result_roundtrip():
    payload = messages.pack_result(11, [1, 2], [0.5, 1.0], bi_touched=2, dp_touched=3, candidates=77)
    qid, ids, dists, bi, dp, cands = messages.unpack_result(payload)
    assert (qid, bi, dp, cands) == (11, 2, 3, 77)
    assert ids.tolist() == [1, 2]
    assert dists.tolist() == [0.5, 1.0]


def test_little_endian_golden_bytes():
    # pin the exact on-wire encoding of the accounting messages
    assert messages.pack_query_start(1, 2, 3).hex() == "010000000000000002000000" + "03000000"
    assert messages.pack_bi_report(0x0102, 1, 2).hex() == "020100000000000001000000" + "02000000"
