"""Vector file formats, synthetic generation, and the brute-force oracle."""

import numpy as np
import pytest

from lshpipe.dataio import (
    VectorFormatError,
    VectorSet,
    describe_vector_file,
    read_vectors,
    write_vectors,
)
from lshpipe.sequential import SearchParams, build_index, sequential_search
from lshpipe.synthetic import gen_synthetic
from lshpipe.family import sample_family, tune_width
from lshpipe.truth import brute_force_knn, load_ground_truth, save_ground_truth


class TestVectorFiles:
    def test_single_float32_record(self, tmp_path):
        path = str(tmp_path / "one.fvecs")
        write_vectors(path, "float32", np.array([[1.0, 2.0, 3.0, 4.0]], dtype=np.float32))
        vf = describe_vector_file(path)
        assert (vf.d, vf.count) == (4, 1)
        got = read_vectors(path)
        assert got.ids.tolist() == [0]
        assert got.coords.tolist() == [[1.0, 2.0, 3.0, 4.0]]

    def test_partial_range_ids(self, tmp_path):
        path = str(tmp_path / "hundred.fvecs")
        data = np.arange(300, dtype=np.float32).reshape(100, 3)
        write_vectors(path, "float32", data)
        got = read_vectors(path, 10, 20)
        assert got.ids.tolist() == list(range(10, 20))
        assert np.array_equal(got.coords, data[10:20])

    def test_layout_arithmetic(self, tmp_path):
        path = str(tmp_path / "three.fvecs")
        vf = write_vectors(path, "float32", np.zeros((3, 2), dtype=np.float32))
        import os

        assert os.path.getsize(path) == 3 * (4 + 8) == 36
        assert vf.count == 3

    def test_empty_file(self, tmp_path):
        path = str(tmp_path / "empty.fvecs")
        vf = write_vectors(path, "float32", np.empty((0, 4), dtype=np.float32))
        assert vf.count == 0
        assert len(read_vectors(path)) == 0

    @pytest.mark.parametrize("kind,dtype", [("float32", np.float32), ("uint8", np.uint8), ("int32", np.int32)])
    def test_roundtrip_all_kinds(self, tmp_path, kind, dtype):
        rng = np.random.default_rng(5)
        if kind == "float32":
            data = rng.normal(0, 100, size=(10_000, 12)).astype(dtype)
        else:
            data = rng.integers(0, 200, size=(10_000, 12)).astype(dtype)
        path = str(tmp_path / f"x.{kind}")
        write_vectors(path, kind, data)
        got = read_vectors(path, kind=kind)
        if kind == "uint8":
            assert got.coords.dtype == np.float32  # bytes widen to real values
            assert np.array_equal(got.coords, data.astype(np.float32))
        else:
            assert got.coords.dtype == dtype
            assert np.array_equal(got.coords, data)

    def test_int32_ground_truth_roundtrip(self, tmp_path):
        ids = np.array([[3, 1, 4], [1, 5, 9]], dtype=np.int32)
        path = str(tmp_path / "gt.ivecs")
        write_vectors(path, "int32", ids)
        got = read_vectors(path)
        assert got.coords.dtype == np.int32
        assert np.array_equal(got.coords, ids)

    def test_truncated_file_offset(self, tmp_path):
        path = str(tmp_path / "trunc.fvecs")
        write_vectors(path, "float32", np.zeros((4, 3), dtype=np.float32))
        with open(path, "r+b") as fh:
            fh.truncate(4 * 16 - 5)
        with pytest.raises(VectorFormatError, match="offset"):
            describe_vector_file(path)

    def test_inconsistent_dimension_offset(self, tmp_path):
        path = str(tmp_path / "baddim.fvecs")
        write_vectors(path, "float32", np.zeros((4, 3), dtype=np.float32))
        with open(path, "r+b") as fh:
            fh.seek(2 * 16)
            fh.write(np.array([7], dtype="<i4").tobytes())
        with pytest.raises(VectorFormatError, match=f"offset {2 * 16}"):
            read_vectors(path)

    def test_unknown_suffix_needs_kind(self, tmp_path):
        path = str(tmp_path / "x.bin")
        with pytest.raises(ValueError, match="kind"):
            describe_vector_file(path)

    def test_range_validation(self, tmp_path):
        path = str(tmp_path / "r.fvecs")
        write_vectors(path, "float32", np.zeros((5, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            read_vectors(path, 2, 9)


class TestSynthetic:
    def test_deterministic(self):
        a = gen_synthetic(9, 500, 8, 3, 2.0, n_queries=40)
        b = gen_synthetic(9, 500, 8, 3, 2.0, n_queries=40)
        assert np.array_equal(a[0].coords, b[0].coords)
        assert np.array_equal(a[1].coords, b[1].coords)

    def test_degenerate_single_cluster(self):
        ref, queries = gen_synthetic(1, 300, 4, 1, 1e-6, n_queries=20, query_noise=0.5)
        # all reference points effectively coincide
        assert np.allclose(ref.coords.std(axis=0), 0.0, atol=1e-3)
        truth = brute_force_knn(ref, queries, 1)
        # the 1-NN distance approximates the perturbation magnitude
        d = np.sqrt(truth.dists_sq[:, 0])
        assert 0.05 < d.mean() < 5.0

    def test_validation(self):
        with pytest.raises(ValueError):
            gen_synthetic(1, 10, 4, 0, 1.0)
        with pytest.raises(ValueError):
            gen_synthetic(1, 10, 4, 2, 0.0)

    def test_vectorset_sequence_protocol(self):
        ref, _ = gen_synthetic(2, 50, 4, 2, 1.0, n_queries=5)
        assert len(ref) == 50
        fv = ref[7]
        assert fv.id == 7
        assert fv.coords.dtype == np.float32
        assert isinstance(ref[2:5], VectorSet)
        assert sum(1 for _ in ref) == 50


class TestBruteForce:
    def test_query_equals_reference_point(self):
        ref, _ = gen_synthetic(3, 200, 6, 2, 2.0, n_queries=5)
        queries = VectorSet(np.arange(3), ref.coords[[4, 9, 2]])
        truth = brute_force_knn(ref, queries, 3)
        assert truth.ids[0, 0] == 4
        assert truth.ids[1, 0] == 9
        assert truth.ids[2, 0] == 2
        assert np.all(truth.dists_sq[:, 0] == 0.0)

    def test_k_equals_reference_size(self):
        ref, queries = gen_synthetic(4, 30, 4, 1, 1.0, n_queries=3)
        truth = brute_force_knn(ref, queries, 30)
        for row, drow in zip(truth.ids, truth.dists_sq):
            assert sorted(row.tolist()) == list(range(30))
            assert np.all(np.diff(drow) >= 0)

    def test_k_too_large(self):
        ref, queries = gen_synthetic(4, 10, 4, 1, 1.0, n_queries=2)
        with pytest.raises(ValueError):
            brute_force_knn(ref, queries, 11)

    def test_permutation_invariance(self):
        ref, queries = gen_synthetic(5, 100, 4, 2, 1.0, n_queries=10)
        perm = np.random.default_rng(0).permutation(100)
        shuffled = VectorSet(ref.ids[perm], ref.coords[perm])
        a = brute_force_knn(ref, queries, 5)
        b = brute_force_knn(shuffled, queries, 5)
        assert np.array_equal(a.ids, b.ids)

    def test_saturated_lsh_agrees_with_oracle(self):
        # with enough tables and probes on a 1k dataset recall saturates at 1
        ref, queries = gen_synthetic(6, 1000, 8, 4, 2.0, n_queries=50)
        truth = brute_force_knn(ref, queries, 5)
        fam = sample_family(seed=3, d=8, L=8, M=4, w=tune_width(ref.coords, seed=0))
        index = build_index(fam, ref)
        for i in range(len(queries)):
            res = sequential_search(index, queries.coords[i], SearchParams(k=5, T=32))
            assert [n.obj_id for n in res] == truth.ids[i].tolist()

    def test_save_load_roundtrip(self, tmp_path):
        ref, queries = gen_synthetic(7, 100, 4, 2, 1.0, n_queries=8)
        truth = brute_force_knn(ref, queries, 4)
        path = str(tmp_path / "gt.ivecs")
        save_ground_truth(path, truth)
        back = load_ground_truth(path)
        assert np.array_equal(back.ids, truth.ids)

    def test_byte_vectors_cross_checked_with_integer_arithmetic(self):
        # byte-valued SIFT-like data: all squared distances are exactly
        # representable, so the oracle must agree with pure python ints
        rng = np.random.default_rng(11)
        ref_raw = rng.integers(0, 256, size=(300, 16)).astype(np.uint8)
        q_raw = rng.integers(0, 256, size=(5, 16)).astype(np.uint8)
        ref = VectorSet.from_coords(ref_raw.astype(np.float32))
        queries = VectorSet.from_coords(q_raw.astype(np.float32))
        truth = brute_force_knn(ref, queries, 4)
        for qi in range(5):
            exact = sorted(
                (sum((int(a) - int(b)) ** 2 for a, b in zip(ref_raw[r], q_raw[qi])), r)
                for r in range(300)
            )[:4]
            assert truth.ids[qi].tolist() == [r for _, r in exact]
            assert truth.dists_sq[qi].tolist() == [float(d) for d, _ in exact]
