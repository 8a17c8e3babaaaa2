"""Proposals, acceptance rules, transition matrices and chain execution."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .ising import IsingError, IsingInstance, _rng, boltzmann, gen_random_instance, magnetizations
from . import quantum

ACCEPTANCE_RULES = ("mh", "gibbs")
SYMMETRY_TOLERANCE = 1e-6


class ChainError(ValueError):
    """Invalid temperature, proposal or transition matrix."""


def _check_T(T: float) -> None:
    if not T > 0:
        raise ChainError(f"temperature must be positive, got {T}")


def _log_ratio(delta_E, T, q_ratio):
    q_ratio = np.asarray(q_ratio, dtype=float)
    if np.any(q_ratio <= 0):
        raise ChainError("q_ratio must be positive")
    return -np.asarray(delta_E, dtype=float) / T + np.log(q_ratio)


def mh_acceptance(delta_E, T: float, q_ratio=1.0):
    """Metropolis-Hastings ``min(1, e^{-dE/T} q_ratio)``."""
    _check_T(T)
    out = np.exp(np.minimum(0.0, _log_ratio(delta_E, T, q_ratio)))
    return float(out) if out.ndim == 0 else out


def gibbs_acceptance(delta_E, T: float, q_ratio=1.0):
    """Glauber/Gibbs rule ``[1 + (e^{-dE/T} q_ratio)^{-1}]^{-1}``."""
    _check_T(T)
    x = _log_ratio(delta_E, T, q_ratio)
    out = 0.5 * (1.0 + np.tanh(0.5 * x))
    return float(out) if out.ndim == 0 else out


def acceptance_function(rule: str):
    if rule == "mh":
        return mh_acceptance
    if rule == "gibbs":
        return gibbs_acceptance
    raise ChainError(f"unknown acceptance rule {rule!r}; expected one of {ACCEPTANCE_RULES}")


# ---------------------------------------------------------------------------
# Matrices


def classical_proposal_matrix(kind: str, n: int) -> np.ndarray:
    """Single-spin-flip (``local``) or uniformly random (``uniform``) proposal."""
    d = 2**n
    if kind == "local":
        return quantum.mixer_matrix(n) / n
    if kind == "uniform":
        return np.full((d, d), 1.0 / d)
    raise ChainError(f"unknown classical proposal {kind!r}")


def mismatched_q_matrix(instance: IsingInstance, rng=None, **channel_kwargs) -> np.ndarray:
    """Channel proposal built from freshly drawn coefficients on the same graph."""
    conn = instance.connectivity if instance.connectivity in ("full", "chain") else "full"
    wrong = gen_random_instance(instance.n, conn, rng=rng)
    return quantum.channel_q_matrix(wrong, **channel_kwargs)


@dataclass(frozen=True)
class TransitionMatrix:
    """Column-stochastic ``P`` with the Boltzmann distribution it satisfies detailed balance for."""

    matrix: np.ndarray = field(repr=False)
    stationary: np.ndarray | None = field(default=None, repr=False)
    log_stationary: np.ndarray | None = field(default=None, repr=False)
    rule: str = "mh"
    T: float | None = None
    asymmetry: float = 0.0

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def build_transition_matrix(Q: np.ndarray, instance: IsingInstance, T: float,
                            acceptance_rule: str = "mh") -> TransitionMatrix:
    """``P = A * Q`` off the diagonal with the rejected mass on the diagonal.

    ``Q`` asymmetric beyond ``SYMMETRY_TOLERANCE`` is replaced by ``(Q + Q^T)/2``
    and the original max asymmetry is reported in ``asymmetry``.
    """
    _check_T(T)
    accept = acceptance_function(acceptance_rule)
    Q = np.asarray(Q, dtype=float)
    d = 2**instance.n
    if Q.shape != (d, d):
        raise ChainError(f"Q has shape {Q.shape}, expected {(d, d)}")
    asym = float(np.max(np.abs(Q - Q.T)))
    if asym > SYMMETRY_TOLERANCE:
        Q = 0.5 * (Q + Q.T)
    E = instance.energies
    P = accept(E[:, None] - E[None, :], T) * Q
    np.fill_diagonal(P, 0.0)
    diag = 1.0 - P.sum(axis=0)
    if np.any(diag < -1e-12):
        raise ChainError("negative diagonal: Q is not column-stochastic")
    P[np.diag_indices(d)] = np.clip(diag, 0.0, None)
    table = boltzmann(instance, T)
    return TransitionMatrix(P, table.probabilities, table.log_probabilities, acceptance_rule, float(T), asym)


def lazy(P):
    """``(P + I) / 2``; accepts an array or a :class:`TransitionMatrix`."""
    if isinstance(P, TransitionMatrix):
        return TransitionMatrix(lazy(P.matrix), P.stationary, P.log_stationary, P.rule, P.T, P.asymmetry)
    P = np.asarray(P, dtype=float)
    return 0.5 * (P + np.eye(P.shape[0]))


def mixing_time_bounds(delta: float, mu_min: float, epsilon: float) -> tuple[float, float]:
    """Lower ``(1/delta - 1) ln(1/2eps)`` and upper ``(1/delta) ln(1/(eps mu_min))``.

    ``delta = 0`` gives ``(inf, inf)``.
    """
    if not (0 <= delta <= 1 and 0 < mu_min <= 1 and 0 < epsilon < 1):
        raise ChainError("need 0 <= delta <= 1, 0 < mu_min <= 1, 0 < epsilon < 1")
    if delta == 0:
        return math.inf, math.inf
    lower = (1.0 / delta - 1.0) * math.log(1.0 / (2.0 * epsilon))
    upper = (1.0 / delta) * math.log(1.0 / (epsilon * mu_min))
    return lower, upper


# ---------------------------------------------------------------------------
# Proposal samplers


class ProposalSampler(Protocol):
    n: int

    def propose(self, code: int, rng: np.random.Generator) -> int: ...


@dataclass
class LocalProposal:
    n: int

    def propose(self, code: int, rng: np.random.Generator) -> int:
        return code ^ (1 << int(rng.integers(self.n)))


@dataclass
class UniformProposal:
    n: int

    def propose(self, code: int, rng: np.random.Generator) -> int:
        return int(rng.integers(2**self.n))


@dataclass
class MatrixProposal:
    """Draw from column ``code`` of a fixed proposal matrix."""

    Q: np.ndarray

    def __post_init__(self):
        self._cum = np.cumsum(self.Q, axis=0)
        self.n = int(round(math.log2(self.Q.shape[0])))

    def propose(self, code: int, rng: np.random.Generator) -> int:
        col = self._cum[:, code]
        return int(min(np.searchsorted(col, rng.random() * col[-1], side="right"), len(col) - 1))


class QuantumProposal:
    """Quantum proposal with ``(gamma, t)`` redrawn every iteration.

    ``mode="grid"`` uses the experiment grids: gamma from the 10 Trotter
    midpoints, ``t = r dt`` with ``r`` in 2..25, and the Trotter circuit.
    ``mode="continuous"`` draws ``t`` uniformly from ``t_range`` and gamma
    from 20 midpoints of ``gamma_range`` with exact evolution.
    """

    def __init__(self, instance: IsingInstance, mode: str = "grid",
                 gamma_range: tuple[float, float] = quantum.GAMMA_RANGE,
                 t_range: tuple[float, float] = quantum.TIME_RANGE,
                 delta_t: float = quantum.TROTTER_DT):
        if mode not in ("grid", "continuous"):
            raise ChainError(f"unknown quantum proposal mode {mode!r}")
        self.instance = instance
        self.n = instance.n
        self.mode = mode
        self.t_range = t_range
        self.delta_t = delta_t
        if mode == "grid":
            self.gammas = quantum.midpoints(*gamma_range, quantum.TROTTER_GAMMA_SUBINTERVALS)
            self.steps = np.array(quantum.TROTTER_STEPS)
            self._circuits = [quantum.TrotterCircuit.build(instance, g, delta_t=delta_t, steps=2)
                              for g in self.gammas]
            self._gates = [(c.single_qubit_gates(), quantum.zz_phases(c.n, c.pairs, c.theta))
                           for c in self._circuits]
        else:
            self.gammas = quantum.midpoints(*gamma_range, quantum.CHANNEL_GAMMA_SUBINTERVALS)
            self._bases = [quantum.build_hamiltonian(instance, g).basis for g in self.gammas]

    def distribution(self, code: int, gamma_index: int, t: float) -> np.ndarray:
        if self.mode == "continuous":
            return quantum.evolve_exact(self._bases[gamma_index], t, code)
        u, zz = self._gates[gamma_index]
        psi = np.zeros((2**self.n, 1), dtype=complex)
        psi[code, 0] = 1.0
        for r in range(quantum.steps_for_time(t, self.delta_t)):
            if r:
                psi = zz[:, None] * psi
            for j in range(self.n):
                psi = quantum.apply_gate(psi, u[j], (j,), self.n)
        return np.abs(psi[:, 0]) ** 2

    def propose(self, code: int, rng: np.random.Generator) -> int:
        gi = int(rng.integers(len(self.gammas)))
        if self.mode == "continuous":
            t = rng.uniform(*self.t_range)
        else:
            t = self.delta_t * self.steps[rng.integers(len(self.steps))]
        p = self.distribution(code, gi, t)
        cum = np.cumsum(p)
        return int(min(np.searchsorted(cum, rng.random() * cum[-1], side="right"), len(p) - 1))


def make_proposal(kind: str, instance: IsingInstance, **kwargs) -> ProposalSampler:
    if kind == "local":
        return LocalProposal(instance.n)
    if kind == "uniform":
        return UniformProposal(instance.n)
    if kind == "quantum":
        return QuantumProposal(instance, **kwargs)
    raise ChainError(f"unknown proposal kind {kind!r}")


# ---------------------------------------------------------------------------
# Chains


@dataclass
class Trajectory:
    """Visited codes ``s^(0..iterations)`` and per-step acceptance flags."""

    n: int
    codes: np.ndarray
    accepted: np.ndarray
    energies_table: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.codes)

    @property
    def iterations(self) -> int:
        return len(self.codes) - 1

    def magnetization(self) -> np.ndarray:
        return magnetizations(self.n)[self.codes]

    def energy(self) -> np.ndarray:
        if self.energies_table is None:
            raise ChainError("trajectory has no energy table")
        return self.energies_table[self.codes]

    def observable(self, observable) -> np.ndarray:
        if isinstance(observable, str):
            if observable == "magnetization":
                return self.magnetization()
            if observable == "energy":
                return self.energy()
            raise ChainError(f"unknown observable {observable!r}")
        return np.asarray(observable)[self.codes]

    def write_csv(self, path, header: dict | None = None) -> None:
        """Columns ``iteration, config_code, energy, magnetization, accepted``."""
        E = self.energy() if self.energies_table is not None else np.full(len(self), np.nan)
        m = self.magnetization()
        acc = np.concatenate([[False], self.accepted])
        with open(path, "w", newline="") as fh:
            if header:
                for key, value in header.items():
                    fh.write(f"# {key}: {value}\n")
            w = csv.writer(fh)
            w.writerow(["iteration", "config_code", "energy", "magnetization", "accepted"])
            for i, (c, e, mm, a) in enumerate(zip(self.codes, E, m, acc)):
                w.writerow([i, int(c), repr(float(e)), repr(float(mm)), int(a)])


def accept_move(energies: np.ndarray, T: float, current: int, proposed: int, rule: str, u: float) -> bool:
    """Accept/reject step shared by online chains and cache subsampling."""
    if proposed == current:
        return True
    p = acceptance_function(rule)(energies[proposed] - energies[current], T)
    return u < p


def run_chain(proposal_sampler: ProposalSampler, instance: IsingInstance, T: float, iterations: int,
              acceptance_rule: str = "mh", rng=None, initial: int | None = None,
              epsilon: float = 0.0) -> Trajectory:
    """Propose/accept loop with ``q_ratio = 1``.

    ``epsilon`` is the per-iteration probability of replacing the proposal by
    a uniformly random configuration. The initial state is uniform unless
    given.
    """
    _check_T(T)
    acceptance_function(acceptance_rule)
    if not 0.0 <= epsilon <= 1.0:
        raise ChainError("epsilon must lie in [0, 1]")
    gen = _rng(rng)
    n = instance.n
    E = instance.energies
    s = int(gen.integers(2**n)) if initial is None else int(initial)
    codes = np.empty(iterations + 1, dtype=np.int64)
    accepted = np.zeros(iterations, dtype=bool)
    codes[0] = s
    for i in range(iterations):
        if epsilon and gen.random() < epsilon:
            prop = int(gen.integers(2**n))
        else:
            prop = proposal_sampler.propose(s, gen)
        if accept_move(E, T, s, prop, acceptance_rule, gen.random()):
            accepted[i] = prop != s
            s = prop
        codes[i + 1] = s
    return Trajectory(n, codes, accepted, E)


def running_average(trajectory: Trajectory | Sequence[float], observable="magnetization") -> np.ndarray:
    """Prefix means ``(1/(j+1)) sum_{k<=j} f(s^(k))``, no burn-in or thinning."""
    if isinstance(trajectory, Trajectory):
        values = trajectory.observable(observable).astype(float)
    else:
        values = np.asarray(trajectory, dtype=float)
    if values.size == 0:
        raise ChainError("empty trajectory")
    return np.cumsum(values) / np.arange(1, len(values) + 1)


def first_entry_time(series: np.ndarray, target: float, band: float) -> int:
    """First index from which ``series`` stays within ``target +- band`` to the end.

    Returns ``len(series)`` when the final value lies outside the band.
    """
    inside = np.abs(np.asarray(series) - target) <= band
    if not inside[-1]:
        return len(series)
    outside = np.nonzero(~inside)[0]
    return 0 if outside.size == 0 else int(outside[-1]) + 1
