import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qemcmc import cache_io, ising
from qemcmc.cache_io import CacheFormatError, TransitionCounts


def random_counts(n, n_circuits, size, rng):
    d = 2**n
    return TransitionCounts.from_arrays(n, n_circuits, rng.integers(d, size=size), rng.integers(d, size=size),
                                        rng.integers(n_circuits, size=size))


def test_from_arrays_is_canonical():
    c = TransitionCounts.from_arrays(2, 2, [3, 0, 3, 1], [1, 1, 1, 2], [1, 0, 1, 0], [2, 1, 5, 0])
    assert c.n_records == 2 and c.total == 8
    assert list(zip(c.l, c.k, c.j, c.count)) == [(0, 1, 0, 1), (1, 1, 3, 7)]
    with pytest.raises(CacheFormatError):
        TransitionCounts.from_arrays(2, 2, [4], [0], [0])
    with pytest.raises(CacheFormatError):
        TransitionCounts.from_arrays(2, 2, [0], [0], [2])
    with pytest.raises(CacheFormatError):
        TransitionCounts.from_arrays(2, 2, [0, 1], [0], [0])


def test_dense_round_trip():
    C = np.random.default_rng(0).integers(0, 3, size=(4, 4, 5))
    c = TransitionCounts.from_dense(C)
    assert np.array_equal(c.dense(), C)
    assert np.array_equal(c.count_matrix(), C.sum(axis=2))


def test_merge_with_empty_is_identity():
    c = random_counts(3, 4, 500, np.random.default_rng(1))
    assert cache_io.record_and_merge(c, TransitionCounts.empty(3, 4)) == c
    assert cache_io.record_and_merge(TransitionCounts.empty(3, 4), c) == c


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), shards=st.integers(1, 6))
def test_merge_is_order_independent(seed, shards):
    rng = np.random.default_rng(seed)
    n, L = 3, 5
    d = 2**n
    j, k, l = rng.integers(d, size=300), rng.integers(d, size=300), rng.integers(L, size=300)
    whole = TransitionCounts.from_arrays(n, L, j, k, l)
    cuts = np.sort(rng.integers(0, 301, size=shards - 1))
    parts = [TransitionCounts.from_arrays(n, L, a, b, c)
             for a, b, c in zip(np.split(j, cuts), np.split(k, cuts), np.split(l, cuts))]
    merged = TransitionCounts.empty(n, L)
    for p in parts:
        merged = cache_io.record_and_merge(merged, p)
    assert merged == whole
    reverse = TransitionCounts.empty(n, L)
    for p in reversed(parts):
        reverse = cache_io.record_and_merge(reverse, p)
    assert reverse == whole
    # Raw tuples merge the same way as TransitionCounts.
    assert cache_io.record_and_merge(TransitionCounts.empty(n, L), (j, k, l)) == whole


def test_merge_rejects_mismatched_shapes():
    with pytest.raises(CacheFormatError):
        cache_io.record_and_merge(TransitionCounts.empty(3, 4), TransitionCounts.empty(3, 5))


def test_estimate_q_examples():
    c = TransitionCounts.from_arrays(1, 2, [0, 1, 1, 1], [0, 0, 0, 0], [0, 0, 1, 1])
    est = cache_io.estimate_q(c)
    assert np.allclose(est.matrix, [[0.25, 0.0], [0.75, 0.0]])
    assert est.totals.tolist() == [4, 0] and est.unobserved.tolist() == [1]


def test_estimate_q_ignores_circuit_labels():
    rng = np.random.default_rng(2)
    c = random_counts(3, 6, 1000, rng)
    perm = rng.permutation(6)
    relabelled = TransitionCounts.from_arrays(3, 6, c.j, c.k, perm[c.l], c.count)
    assert np.array_equal(cache_io.estimate_q(c).matrix, cache_io.estimate_q(relabelled).matrix)
    cols = cache_io.estimate_q(c)
    observed = cols.totals > 0
    assert np.allclose(cols.matrix[:, observed].sum(axis=0), 1)


def test_counts_file_round_trip(tmp_path):
    c = random_counts(4, 7, 2000, np.random.default_rng(3))
    cache_io.save_counts(tmp_path / "c.bin", c)
    assert cache_io.load_counts(tmp_path / "c.bin") == c
    cache_io.save_counts(tmp_path / "e.bin", TransitionCounts.empty(2, 1))
    assert cache_io.load_counts(tmp_path / "e.bin") == TransitionCounts.empty(2, 1)


def test_counts_file_layout_is_little_endian(tmp_path):
    raw = struct.pack("<4sHBIQ", b"QEMC", 1, 2, 3, 2)
    raw += struct.pack("<IIIQ", 1, 0, 2, 5) + struct.pack("<IIIQ", 3, 2, 0, 1)
    (tmp_path / "f.bin").write_bytes(raw)
    c = cache_io.load_counts(tmp_path / "f.bin")
    assert (c.n, c.n_circuits, c.total) == (2, 3, 6)
    assert c.dense()[1, 0, 2] == 5 and c.dense()[3, 2, 0] == 1
    cache_io.save_counts(tmp_path / "g.bin", c)
    # Records are written sorted by (l, k, j).
    assert (tmp_path / "g.bin").read_bytes() == (struct.pack("<4sHBIQ", b"QEMC", 1, 2, 3, 2)
                                                 + struct.pack("<IIIQ", 3, 2, 0, 1)
                                                 + struct.pack("<IIIQ", 1, 0, 2, 5))


def test_counts_file_errors(tmp_path):
    good = struct.pack("<4sHBIQ", b"QEMC", 1, 2, 3, 1) + struct.pack("<IIIQ", 1, 0, 2, 5)
    cases = {
        "magic": b"XXXX" + good[4:],
        "version": good[:4] + struct.pack("<H", 9) + good[6:],
        "truncated": good[:-3],
        "header": good[:5],
    }
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(CacheFormatError):
            cache_io.load_counts(tmp_path / name)


def test_instance_and_matrix_files(tmp_path):
    inst = ising.gen_random_instance(4, "chain", rng=9)
    cache_io.save_instance(tmp_path / "i.json", inst)
    assert cache_io.load_instance(tmp_path / "i.json") == inst
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(CacheFormatError):
        cache_io.load_instance(tmp_path / "bad.json")
    Q = np.random.default_rng(0).dirichlet(np.ones(8), size=8).T
    cache_io.save_matrix(tmp_path / "q.csv", Q, {"T": 0.1})
    text = (tmp_path / "q.csv").read_text().splitlines()
    assert text[:2] == ["# n: 3", "# T: 0.1"]
    assert np.array_equal(cache_io.load_matrix(tmp_path / "q.csv"), Q)
    (tmp_path / "r.csv").write_text("1,2\n")
    with pytest.raises(CacheFormatError):
        cache_io.load_matrix(tmp_path / "r.csv")
