"""Multi-probe sequence generation."""

import numpy as np
import pytest

from lshpipe.family import hash_point, sample_family
from lshpipe.probing import max_probes, probe_sequence, query_probes
from lshpipe.sequential import SearchParams, build_index


def test_t1_is_plain_hash(small_family, small_dataset):
    q = small_dataset.coords[5]
    seq = probe_sequence(small_family, 1, q, 1)
    assert len(seq) == 1
    assert seq[0] == hash_point(small_family, 1, q)


def test_first_probe_always_exact(small_family, small_dataset):
    for i in range(10):
        q = small_dataset.coords[i]
        seq = probe_sequence(small_family, 0, q, 6)
        assert seq[0].same_bucket(hash_point(small_family, 0, q))


def test_probes_distinct_and_adjacent():
    fam = sample_family(seed=9, d=8, L=1, M=2, w=5.0)
    q = np.random.default_rng(1).normal(0, 5, 8).astype(np.float32)
    seq = probe_sequence(fam, 0, q, 3)
    assert len(seq) == 3
    assert len({k.store_key for k in seq}) == 3
    base = np.array(seq[0].slots)
    for key in seq[1:]:
        deltas = np.array(key.slots) - base
        # perturbations shift named slots by exactly +-1
        assert set(np.unique(deltas)).issubset({-1, 0, 1})
        assert np.abs(deltas).sum() >= 1


def test_truncates_at_3_to_the_m():
    fam = sample_family(seed=2, d=4, L=1, M=2, w=3.0)
    q = np.ones(4, dtype=np.float32)
    seq = probe_sequence(fam, 0, q, 50)
    assert max_probes(2) == 9
    assert len(seq) == 9
    assert len({k.store_key for k in seq}) == 9
    # all 3^2 slot combinations around the base bucket
    base = np.array(seq[0].slots)
    got = {tuple(np.array(k.slots) - base) for k in seq}
    assert got == {(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)}


def test_scores_ascending():
    fam = sample_family(seed=13, d=12, L=1, M=6, w=4.0)
    rng = np.random.default_rng(3)
    q = rng.normal(0, 4, 12).astype(np.float32)
    from lshpipe.family import projection_values

    values = projection_values(fam, 0, q)[0]
    base = np.floor(values)
    frac = values - base

    def score(key):
        total = 0.0
        for i, delta in enumerate(np.array(key.slots) - base.astype(np.int64)):
            if delta == -1:
                total += float(frac[i]) ** 2
            elif delta == 1:
                total += (1.0 - float(frac[i])) ** 2
            else:
                assert delta == 0
        return total

    seq = probe_sequence(fam, 0, q, 30)
    scores = [score(k) for k in seq]
    assert scores[0] == 0.0
    assert all(s1 <= s2 + 1e-12 for s1, s2 in zip(scores, scores[1:]))


def test_candidate_superset_in_t(small_family, small_dataset):
    # union of candidates at T=4 contains the union at T=2, per query
    index = build_index(small_family, small_dataset)
    rng = np.random.default_rng(5)
    queries = small_dataset.coords[rng.choice(len(small_dataset), 50, replace=False)]
    for q in queries:
        c2 = set(index.candidate_ids(q, SearchParams(k=5, T=2)).tolist())
        c4 = set(index.candidate_ids(q, SearchParams(k=5, T=4)).tolist())
        assert c2.issubset(c4)


def test_query_probes_rank_major_order(small_family, small_dataset):
    q = small_dataset.coords[0]
    t = 3
    combined = query_probes(small_family, q, t)
    per_table = [probe_sequence(small_family, j, q, t) for j in range(small_family.L)]
    expected = [per_table[j][r] for r in range(t) for j in range(small_family.L) if r < len(per_table[j])]
    assert combined == expected


def test_invalid_t(small_family, small_dataset):
    with pytest.raises(ValueError):
        probe_sequence(small_family, 0, small_dataset.coords[0], 0)
