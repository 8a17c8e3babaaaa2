import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qemcmc import clusters, ising, spectral
from qemcmc.clusters import ClusterError
from qemcmc.ising import IsingInstance


def exact_sw_ghost_kernel(inst, T):
    """Swendsen-Wang with a ghost spin, by enumerating bonds and cluster coins."""
    ghost = ising.ghost_spin_transform(inst)
    n, m = inst.n, inst.n + 1
    bonds = [(j - 1, k - 1, J) for j, k, J in ghost.couplings]
    d = 2**n
    P = np.zeros((d, d))
    for code in range(d):
        s = np.append(ising.spins_from_code(code, n), 1)
        for active in itertools.product((0, 1), repeat=len(bonds)):
            w = 1.0
            parent = list(range(m))

            def find(a):
                while parent[a] != a:
                    a = parent[a]
                return a

            for (j, k, J), on in zip(bonds, active):
                p_on = (1 - np.exp(-2 * abs(J) / T)) if J * s[j] * s[k] > 0 else 0.0
                w *= p_on if on else 1 - p_on
                if on:
                    parent[find(j)] = find(k)
            if w == 0:
                continue
            roots = sorted({find(i) for i in range(m)} - {find(n)})
            for coins in itertools.product((0, 1), repeat=len(roots)):
                flipped = {r for r, c in zip(roots, coins) if c}
                new = np.array([-s[i] if find(i) in flipped else s[i] for i in range(n)])
                P[ising.code_from_spins(new), code] += w / 2 ** len(roots)
    return P


def test_high_temperature_swendsen_wang_is_uniform():
    inst = ising.gen_random_instance(3, "full", rng=0)
    for mode in clusters.FIELD_MODES:
        est = clusters.estimate_transition_matrix(clusters.cluster_move_fn("swendsen_wang", mode), inst, 1e9,
                                                  400_000, rng=1)
        assert 0.5 * np.abs(est.matrix - 1 / 8).sum(axis=0).max() < 0.02


def test_sampled_kernel_matches_enumeration():
    inst = ising.gen_random_instance(3, "full", rng=4)
    T = 0.8
    exact = exact_sw_ghost_kernel(inst, T)
    assert np.allclose(exact.sum(axis=0), 1)
    mu = ising.boltzmann(inst, T).probabilities
    assert spectral.detailed_balance_check(exact, mu) < 1e-12
    est = clusters.estimate_transition_matrix(clusters.cluster_move_fn("swendsen_wang", "ghost"), inst, T,
                                              800_000, rng=2)
    se = np.sqrt(exact * (1 - exact) / est.totals[None, :])
    assert np.all(np.abs(est.matrix - exact) <= 5 * se + 1e-12)


def test_wolff_flips_one_connected_set():
    inst = ising.gen_random_instance(6, "chain", rng=3)
    rng = np.random.default_rng(0)
    codes = rng.integers(64, size=2000)
    for mode in clusters.FIELD_MODES:
        new = clusters.cluster_moves("wolff", mode, inst, 0.5, codes, rng)
        for diff in codes ^ new:
            bits = [i for i in range(6) if diff >> (5 - i) & 1]
            # On a chain a connected set is a contiguous run of sites.
            assert not bits or bits == list(range(bits[0], bits[-1] + 1))


@pytest.mark.parametrize("kind,mode", clusters.VARIANTS)
def test_cluster_moves_preserve_boltzmann(kind, mode):
    inst = ising.gen_random_instance(4, "full", rng=5)
    T = 0.9
    mu = ising.boltzmann(inst, T).probabilities
    rng = np.random.default_rng(6)
    codes = rng.choice(16, size=1_000_000, p=mu)
    new = clusters.cluster_moves(kind, mode, inst, T, codes, rng)
    freq = np.bincount(new, minlength=16) / len(new)
    assert np.abs(freq - mu).max() < 0.05
    assert 0.5 * np.abs(freq - mu).sum() < 0.01


def test_cluster_move_validation():
    inst = ising.gen_random_instance(3, "full", rng=0)
    with pytest.raises(ClusterError):
        clusters.cluster_move("metropolis", "ghost", inst, 1.0, 0)
    with pytest.raises(ClusterError):
        clusters.cluster_move("wolff", "none", inst, 1.0, 0)
    with pytest.raises(ClusterError):
        clusters.cluster_move("wolff", "ghost", inst, 0.0, 0)
    with pytest.raises(ClusterError):
        clusters.estimate_transition_matrix(clusters.cluster_move_fn("wolff", "ghost"), inst, 1.0, 0)


def test_decoupled_spins_form_singleton_clusters():
    inst = IsingInstance(3, (), (0.0, 0.0, 0.0))
    spins = np.ones((4, 3), dtype=int)
    labels = clusters.cluster_labels(spins, inst, 1.0, np.random.default_rng(0))
    assert np.array_equal(labels, np.tile([0, 1, 2], (4, 1)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 7), T=st.floats(0.05, 5.0))
def test_cluster_labels_partition_sites(seed, n, T):
    inst = ising.gen_random_instance(n, "full", rng=seed)
    rng = np.random.default_rng(seed)
    spins = 1 - 2 * rng.integers(2, size=(8, n))
    labels = clusters.cluster_labels(spins, inst, T, rng)
    for row, s in zip(labels, spins):
        satisfied = {(j - 1, k - 1) for j, k, J in inst.couplings if J * s[j - 1] * s[k - 1] > 0}
        for lab in set(row.tolist()):
            members = set(np.flatnonzero(row == lab).tolist())
            assert min(members) == lab
            # Each cluster is connected through satisfied bonds alone.
            reached, frontier = {lab}, [lab]
            while frontier:
                u = frontier.pop()
                for a, b in satisfied:
                    for x, y in ((a, b), (b, a)):
                        if x == u and y in members and y not in reached:
                            reached.add(y)
                            frontier.append(y)
            assert reached == members


# ---------------------------------------------------------------------------
# Houdayer


def test_identical_replicas_are_fixed_points():
    inst = ising.gen_random_instance(5, "full", rng=1)
    for s in range(32):
        pair = clusters.join_pair(s, s, 5)
        assert clusters.houdayer_move(inst, pair, rng=s) == pair


def test_pair_encoding_round_trips():
    for s1, s2 in [(0, 0), (5, 3), (31, 17)]:
        assert clusters.split_pair(clusters.join_pair(s1, s2, 5), 5) == (s1, s2)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 6), site=st.integers(0, 5))
def test_houdayer_move_properties(seed, n, site):
    inst = ising.gen_random_instance(n, "chain", rng=seed)
    rng = np.random.default_rng(seed)
    site = site % n
    pair = int(rng.integers(4**n))
    new = clusters.houdayer_move(inst, pair, site=site)
    s1, s2 = clusters.split_pair(pair, n)
    t1, t2 = clusters.split_pair(new, n)
    # Overlap unchanged, total energy conserved, and the move is an involution.
    assert s1 ^ s2 == t1 ^ t2
    E = inst.energies
    assert E[t1] + E[t2] == pytest.approx(E[s1] + E[s2], abs=1e-12)
    assert clusters.houdayer_move(inst, new, site=site) == pair


def test_tables_match_single_moves():
    inst = ising.gen_random_instance(4, "full", rng=2)
    tables = clusters.HoudayerTables.build(inst)
    for j in range(4):
        for pair in range(256):
            assert tables.targets[j, pair] == clusters.houdayer_move(inst, pair, site=j)


def test_houdayer_kernel_small_instance():
    inst = ising.gen_random_instance(3, "full", rng=3)
    T = 0.7
    kernel = clusters.HoudayerKernel(inst, T)
    P = kernel.dense()
    assert np.allclose(P.sum(axis=0), 1, atol=1e-12)
    assert np.abs(P @ kernel.stationary() - kernel.stationary()).max() < 1e-12
    assert spectral.detailed_balance_check(P, kernel.stationary()) < 1e-12
    # Enumeration oracle built from the mixed kernel's definition.
    K = clusters.local_mh_matrix(inst, T).toarray()
    perm = np.zeros((64, 64))
    for j in range(3):
        for pair in range(64):
            perm[clusters.houdayer_move(inst, pair, site=j), pair] += 1 / 3
    oracle = 3 / 4 * np.kron(K, K) + 1 / 4 * perm
    assert np.abs(P - oracle).max() < 1e-14
    with pytest.raises(ClusterError):
        kernel(np.ones(8))


def test_houdayer_step_matches_kernel():
    inst = ising.gen_random_instance(2, "full", rng=4)
    T = 1.1
    P = clusters.HoudayerKernel(inst, T).dense()
    rng = np.random.default_rng(5)
    start = 6
    N = 200_000
    hits = np.bincount([clusters.houdayer_step(inst, T, start, rng) for _ in range(N)], minlength=16) / N
    se = np.sqrt(P[:, start] * (1 - P[:, start]) / N)
    assert np.all(np.abs(hits - P[:, start]) <= 5 * se + 1e-12)


# ---------------------------------------------------------------------------
# Empirical transition matrices


def test_identity_move_gives_identity_estimate():
    inst = ising.gen_random_instance(3, "full", rng=0)
    est = clusters.estimate_transition_matrix(lambda i, T, c, r: c, inst, 1.0, 10_000, rng=0)
    assert np.array_equal(est.matrix, np.eye(8))
    assert est.samples == 10_000 and est.totals.sum() == 10_000


def test_uniform_mh_estimate_converges():
    inst = ising.gen_random_instance(3, "full", rng=7)
    T = 1.0
    est = clusters.estimate_transition_matrix(clusters.mh_move_fn("uniform"), inst, T, 1_000_000, rng=8)
    E = inst.energies
    exact = np.minimum(1, np.exp(-(E[:, None] - E[None, :]) / T)) / 8
    exact[np.diag_indices(8)] = 0
    exact[np.diag_indices(8)] = 1 - exact.sum(axis=0)
    assert np.abs(est.matrix - exact).max() < 0.01


def test_resample_keeps_sample_count():
    inst = ising.gen_random_instance(3, "full", rng=0)
    est = clusters.estimate_transition_matrix(clusters.mh_move_fn("local"), inst, 1.0, 5000, rng=0)
    again = est.resample(1)
    assert again.samples == 5000 and again.counts.sum() == 5000
    assert set(zip(again.initial, again.final)) <= set(zip(est.initial, est.final))
