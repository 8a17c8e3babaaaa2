import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qemcmc import chains, ising, quantum, spectral
from qemcmc.chains import ChainError


@pytest.fixture(scope="module")
def inst3():
    return ising.gen_random_instance(3, "full", rng=21)


@pytest.fixture(scope="module")
def inst4():
    return ising.gen_random_instance(4, "full", rng=22)


# ---------------------------------------------------------------------------
# Acceptance rules


def test_mh_examples():
    assert chains.mh_acceptance(-1.0, 0.5) == 1.0
    assert chains.mh_acceptance(0.7 * math.log(2), 0.7) == pytest.approx(0.5)
    assert chains.mh_acceptance(0.0, 1.0, q_ratio=2.0) == 1.0
    with pytest.raises(ChainError):
        chains.mh_acceptance(1.0, 0.0)
    with pytest.raises(ChainError):
        chains.mh_acceptance(1.0, 1.0, q_ratio=0.0)


def test_gibbs_examples():
    assert chains.gibbs_acceptance(0.0, 1.0) == pytest.approx(0.5)
    assert chains.gibbs_acceptance(5.0, 1e12) == pytest.approx(0.5)
    assert chains.gibbs_acceptance(-5.0, 1e12) == pytest.approx(0.5)
    assert chains.gibbs_acceptance(1e6, 1.0) == 0.0
    with pytest.raises(ChainError):
        chains.gibbs_acceptance(1.0, -1.0)


def test_gibbs_strictly_below_mh():
    dE = np.linspace(-5, 5, 101)
    dE = dE[dE != 0]
    # Keep |dE|/T moderate: far in the tail both rules round to the same float.
    for T in (0.5, 1.0, 10.0):
        assert np.all(chains.gibbs_acceptance(dE, T) < chains.mh_acceptance(dE, T))


def test_unknown_rule():
    with pytest.raises(ChainError):
        chains.acceptance_function("glauber")


# ---------------------------------------------------------------------------
# Matrices


def test_classical_proposals():
    local = chains.classical_proposal_matrix("local", 2)
    assert all(sorted(col[col > 0].tolist()) == [0.5, 0.5] for col in local.T)
    uniform = chains.classical_proposal_matrix("uniform", 3)
    assert np.all(uniform == 0.125)
    for Q in (local, uniform):
        assert np.array_equal(Q, Q.T)
    with pytest.raises(ChainError):
        chains.classical_proposal_matrix("global", 3)


def test_uniform_proposal_at_infinite_temperature():
    inst = ising.gen_random_instance(3, "full", rng=0)
    tm = chains.build_transition_matrix(chains.classical_proposal_matrix("uniform", 3), inst, 1e12)
    assert np.allclose(tm.matrix, 1 / 8)
    assert spectral.absolute_spectral_gap(tm).delta == pytest.approx(1.0, abs=1e-9)


def test_transition_matrix_is_stationary(inst4):
    tm = chains.build_transition_matrix(chains.classical_proposal_matrix("local", 4), inst4, 0.5)
    assert np.abs(tm.matrix @ tm.stationary - tm.stationary).max() < 1e-10
    assert spectral.detailed_balance_check(tm.matrix, tm.stationary) <= 1e-12


def test_transition_matrix_matches_enumeration(inst3):
    T = 0.2
    tm = chains.build_transition_matrix(chains.classical_proposal_matrix("local", 3), inst3, T)
    E = inst3.energies
    oracle = np.zeros((8, 8))
    for s in range(8):
        for i in range(3):
            t = s ^ (1 << i)
            oracle[t, s] = min(1.0, math.exp(-(E[t] - E[s]) / T)) / 3
        oracle[s, s] = 1 - oracle[:, s].sum()
    assert np.abs(tm.matrix - oracle).max() < 1e-14


def test_asymmetric_q_is_symmetrized(inst3):
    rng = np.random.default_rng(1)
    Q = rng.random((8, 8))
    Q /= Q.sum(axis=0)
    tm = chains.build_transition_matrix(Q, inst3, 0.7)
    assert tm.asymmetry == pytest.approx(np.abs(Q - Q.T).max())
    assert spectral.detailed_balance_check(tm.matrix, tm.stationary) <= 1e-12


def test_invalid_q_and_temperature(inst3):
    with pytest.raises(ChainError):
        chains.build_transition_matrix(np.full((8, 8), 0.5), inst3, 1.0)
    with pytest.raises(ChainError):
        chains.build_transition_matrix(np.eye(8), inst3, 0.0)
    with pytest.raises(ChainError):
        chains.build_transition_matrix(np.eye(4), inst3, 1.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), T=st.floats(0.05, 20), rule=st.sampled_from(["mh", "gibbs"]),
       kind=st.sampled_from(["local", "uniform", "channel"]))
def test_transition_matrix_properties(seed, T, rule, kind):
    inst = ising.gen_random_instance(3, "full", rng=seed)
    Q = quantum.channel_q_matrix(inst) if kind == "channel" else chains.classical_proposal_matrix(kind, 3)
    tm = chains.build_transition_matrix(Q, inst, T, rule)
    P = tm.matrix
    assert np.abs(P.sum(axis=0) - 1).max() < 1e-12 and P.min() >= 0 and P.max() <= 1
    assert spectral.detailed_balance_check(P, tm.stationary) <= 1e-12
    lam = np.linalg.eigvalsh(spectral.symmetrized(P, tm.log_stationary))
    assert lam.min() >= -1 - 1e-12 and lam.max() <= 1 + 1e-12
    if kind == "uniform":
        assert P.min() > 0


def test_lazy_examples():
    assert np.array_equal(chains.lazy(np.eye(4)), np.eye(4))
    # Two-state chain with eigenvalues {1, -0.9}.
    P = np.array([[0.05, 0.95], [0.95, 0.05]])
    p = np.array([0.5, 0.5])
    assert spectral.absolute_spectral_gap(P, p).delta == pytest.approx(0.1)
    assert np.sort(np.linalg.eigvals(chains.lazy(P)).real) == pytest.approx([0.05, 1.0])
    assert spectral.absolute_spectral_gap(chains.lazy(P), p).delta == pytest.approx(0.95)


def test_mixing_time_bounds_examples():
    lo, hi = chains.mixing_time_bounds(1.0, 0.1, 0.25)
    assert lo == pytest.approx(0.0) and hi > 0
    assert chains.mixing_time_bounds(0.0, 0.1, 0.25) == (math.inf, math.inf)
    with pytest.raises(ChainError):
        chains.mixing_time_bounds(0.5, 0.1, 1.0)
    rng = np.random.default_rng(0)
    for _ in range(100):
        lo, hi = chains.mixing_time_bounds(rng.uniform(1e-3, 1), rng.uniform(1e-6, 0.5), rng.uniform(1e-3, 0.99))
        assert lo <= hi


@pytest.mark.parametrize("kind,T", [("local", 1.0), ("uniform", 0.5), ("local", 0.3)])
def test_mixing_time_within_bounds(inst3, kind, T):
    tm = chains.build_transition_matrix(chains.classical_proposal_matrix(kind, 3), inst3, T)
    P, mu, eps = tm.matrix, tm.stationary, 0.05
    delta = spectral.absolute_spectral_gap(tm).delta
    lo, hi = chains.mixing_time_bounds(delta, mu.min(), eps)
    dist = np.eye(8)
    tau = 0
    while 0.5 * np.abs(dist - mu[:, None]).sum(axis=0).max() > eps:
        dist = P @ dist
        tau += 1
    assert lo <= tau <= hi


# ---------------------------------------------------------------------------
# Chains


def test_zero_temperature_chain_stays_at_minimum():
    inst = ising.gen_random_instance(5, "full", rng=3)
    E = inst.energies
    ground = int(np.argmin(E))
    assert all(E[ground ^ (1 << b)] > E[ground] for b in range(5))
    traj = chains.run_chain(chains.LocalProposal(5), inst, 1e-9, 10_000, rng=0, initial=ground)
    assert np.all(traj.codes == ground) and not traj.accepted.any()


def test_uniform_chain_samples_boltzmann(inst3):
    traj = chains.run_chain(chains.UniformProposal(3), inst3, 1.0, 1_000_000, rng=4)
    emp = np.bincount(traj.codes, minlength=8) / len(traj)
    assert 0.5 * np.abs(emp - ising.boltzmann(inst3, 1.0).probabilities).sum() < 0.02


@pytest.mark.parametrize("kind", ["local", "quantum", "matrix", "epsilon"])
def test_chains_converge_for_every_proposal(inst3, kind):
    T = 0.8
    if kind == "quantum":
        sampler, eps = chains.QuantumProposal(inst3), 0.0
    elif kind == "matrix":
        sampler, eps = chains.MatrixProposal(quantum.channel_q_matrix(inst3)), 0.0
    elif kind == "epsilon":
        sampler, eps = chains.LocalProposal(3), 0.2
    else:
        sampler, eps = chains.LocalProposal(3), 0.0
    iters = 20_000 if kind == "quantum" else 200_000
    traj = chains.run_chain(sampler, inst3, T, iters, rng=5, epsilon=eps)
    emp = np.bincount(traj.codes, minlength=8) / len(traj)
    assert 0.5 * np.abs(emp - ising.boltzmann(inst3, T).probabilities).sum() < 0.03


def test_trajectory_flags_and_reproducibility(inst4):
    a = chains.run_chain(chains.LocalProposal(4), inst4, 0.6, 500, rng=9)
    b = chains.run_chain(chains.LocalProposal(4), inst4, 0.6, 500, rng=9)
    assert np.array_equal(a.codes, b.codes) and np.array_equal(a.accepted, b.accepted)
    moved = a.codes[1:] != a.codes[:-1]
    assert np.array_equal(moved, a.accepted)
    assert a.iterations == 500 and len(a) == 501


def test_quantum_proposal_modes(inst3):
    grid = chains.QuantumProposal(inst3)
    assert len(grid.gammas) == 10 and grid.gammas.min() > 0.25 and grid.gammas.max() < 0.6
    p = grid.distribution(3, 4, 0.8 * 7)
    c = quantum.TrotterCircuit.build(inst3, grid.gammas[4], steps=7)
    assert np.allclose(p, np.abs(c.unitary()[:, 3]) ** 2, atol=1e-12)
    cont = chains.QuantumProposal(inst3, mode="continuous")
    assert len(cont.gammas) == 20 and cont.t_range == (2.0, 20.0)
    h = quantum.build_hamiltonian(inst3, cont.gammas[2])
    assert np.allclose(cont.distribution(5, 2, 7.3), quantum.evolve_exact(h, 7.3, 5), atol=1e-12)
    with pytest.raises(ChainError):
        chains.QuantumProposal(inst3, mode="adiabatic")


def test_quantum_proposal_frequencies_match_grid_q(inst3):
    sampler = chains.QuantumProposal(inst3)
    rng = np.random.default_rng(2)
    draws = np.array([sampler.propose(6, rng) for _ in range(20_000)])
    emp = np.bincount(draws, minlength=8) / len(draws)
    assert 0.5 * np.abs(emp - quantum.trotter_q_matrix(inst3)[:, 6]).sum() < 0.02


def test_running_average_examples():
    assert np.array_equal(chains.running_average([2.0, 2.0, 2.0]), [2.0, 2.0, 2.0])
    vals = np.random.default_rng(0).random(50)
    ra = chains.running_average(vals)
    assert all(abs(ra[j] - vals[: j + 1].mean()) < 1e-14 for j in range(50))
    with pytest.raises(ChainError):
        chains.running_average([])


def test_first_entry_time():
    assert chains.first_entry_time(np.array([5.0, 0.1, 0.0, 0.02]), 0.0, 0.05) == 2
    assert chains.first_entry_time(np.array([5.0, 0.04, 0.0, 0.02]), 0.0, 0.05) == 1
    assert chains.first_entry_time(np.array([0.0, 0.2, 0.0]), 0.0, 0.05) == 2
    assert chains.first_entry_time(np.array([0.0, 0.0, 1.0]), 0.0, 0.05) == 3


def test_trajectory_csv(tmp_path, inst3):
    traj = chains.run_chain(chains.LocalProposal(3), inst3, 1.0, 20, rng=1)
    path = tmp_path / "traj.csv"
    traj.write_csv(path, {"seed": 1})
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed: 1"
    assert lines[1] == "iteration,config_code,energy,magnetization,accepted"
    assert len(lines) == 2 + 21
    row = lines[2 + 5].split(",")
    assert int(row[1]) == traj.codes[5] and float(row[2]) == inst3.energies[traj.codes[5]]


def test_mismatched_proposal_is_a_channel(inst4):
    Q = chains.mismatched_q_matrix(inst4, rng=3)
    assert np.abs(Q - Q.T).max() < 1e-9 and np.abs(Q.sum(axis=0) - 1).max() < 1e-9
    assert np.abs(Q - quantum.channel_q_matrix(inst4)).max() > 1e-3
