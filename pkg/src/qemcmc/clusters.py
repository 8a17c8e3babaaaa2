"""Cluster-update baselines: Swendsen-Wang, Wolff and Houdayer.

Bond rule (Fortuin-Kasteleyn): a coupling ``(j, k)`` is satisfied when
``J_jk s_j s_k > 0`` and is then activated with probability
``1 - exp(-2|J_jk|/T)``; clusters are connected components of active bonds.

Fields are handled either through a ghost spin (spin ``n+1``, pinned at +1,
coupled with ``J_{n+1,j} = h_j``; clusters containing it never flip) or by a
Metropolis test on the field-energy change of each proposed cluster flip.

All single-replica moves are vectorized over a batch of configurations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .chains import ChainError, acceptance_function
from .ising import IsingInstance, _rng, all_spins, boltzmann, ghost_spin_transform

CLUSTER_KINDS = ("swendsen_wang", "wolff")
FIELD_MODES = ("ghost", "accept_reject")
VARIANTS = tuple((k, m) for k in CLUSTER_KINDS for m in FIELD_MODES)

MoveFn = Callable[[IsingInstance, float, np.ndarray, np.random.Generator], np.ndarray]


class ClusterError(ValueError):
    """Invalid cluster algorithm, field mode or temperature."""


def _spins(codes: np.ndarray, n: int) -> np.ndarray:
    bits = (codes[:, None] >> np.arange(n - 1, -1, -1)[None, :]) & 1
    return 1 - 2 * bits


def _codes(spins: np.ndarray) -> np.ndarray:
    n = spins.shape[1]
    bits = (1 - spins) // 2
    return bits @ (1 << np.arange(n - 1, -1, -1, dtype=np.int64))


def _bonds(instance: IsingInstance):
    if not instance.couplings:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    j, k, J = (np.array(x) for x in zip(*instance.couplings))
    return j.astype(int) - 1, k.astype(int) - 1, J.astype(float)


def cluster_labels(spins: np.ndarray, instance: IsingInstance, T: float, rng: np.random.Generator) -> np.ndarray:
    """Draw FK bonds and return per-site cluster labels (smallest site index in the cluster)."""
    B, n = spins.shape
    j, k, J = _bonds(instance)
    labels = np.broadcast_to(np.arange(n), (B, n)).copy()
    if len(J) == 0:
        return labels
    satisfied = J[None, :] * spins[:, j] * spins[:, k] > 0
    p_active = -np.expm1(-2.0 * np.abs(J) / T)
    active = satisfied & (rng.random((B, len(J))) < p_active[None, :])
    # Labels only travel along active bonds, so at the fixed point every
    # cluster carries the smallest site index it contains.
    while True:
        before = labels.copy()
        for e in range(len(J)):
            a, b = labels[:, j[e]], labels[:, k[e]]
            low = np.where(active[:, e], np.minimum(a, b), 0)
            labels[:, j[e]] = np.where(active[:, e], low, a)
            labels[:, k[e]] = np.where(active[:, e], low, b)
        labels = np.take_along_axis(labels, labels, axis=1)
        if np.array_equal(labels, before):
            return labels


def _field_delta(spins: np.ndarray, h: np.ndarray, flip: np.ndarray) -> np.ndarray:
    """Field-energy change ``2 sum_{i flipped} h_i s_i`` per row."""
    return 2.0 * np.sum(np.where(flip, h[None, :] * spins, 0.0), axis=1)


def _per_cluster_field_delta(spins, h, labels):
    B, n = spins.shape
    flat = (labels + n * np.arange(B)[:, None]).ravel()
    return np.bincount(flat, weights=(2.0 * h[None, :] * spins).ravel(), minlength=B * n).reshape(B, n)


def cluster_moves(kind: str, field_mode: str, instance: IsingInstance, T: float,
                  codes: np.ndarray, rng=None) -> np.ndarray:
    """One cluster update applied independently to every code in ``codes``."""
    if kind not in CLUSTER_KINDS:
        raise ClusterError(f"unknown cluster algorithm {kind!r}")
    if field_mode not in FIELD_MODES:
        raise ClusterError(f"unknown field mode {field_mode!r}")
    if not T > 0:
        raise ClusterError(f"temperature must be positive, got {T}")
    gen = _rng(rng)
    codes = np.atleast_1d(np.asarray(codes, dtype=np.int64))
    n = instance.n
    B = len(codes)
    if field_mode == "ghost":
        model = ghost_spin_transform(instance)
        spins = _spins(codes << 1, n + 1)  # ghost bit clear: s_{n+1} = +1
        ghost = n
    else:
        model = instance
        spins = _spins(codes, n)
        ghost = None
    labels = cluster_labels(spins, model, T, gen)
    size = spins.shape[1]
    if kind == "swendsen_wang":
        coin = gen.random((B, size)) < 0.5
        if ghost is not None:
            coin[np.arange(B), labels[:, ghost]] = False
        if field_mode == "accept_reject":
            dE = _per_cluster_field_delta(spins, instance.field_vector, labels)
            accept = gen.random((B, size)) < np.exp(np.minimum(0.0, -dE / T))
            coin &= accept
        flip = np.take_along_axis(coin, labels, axis=1)
    else:
        seed = gen.integers(n, size=B)
        flip = labels == labels[np.arange(B), seed][:, None]
        if ghost is not None:
            flip &= ~flip[:, [ghost]]
        else:
            dE = _field_delta(spins, instance.field_vector, flip)
            accept = gen.random(B) < np.exp(np.minimum(0.0, -dE / T))
            flip &= accept[:, None]
    new = np.where(flip, -spins, spins)
    out = _codes(new)
    return out >> 1 if ghost is not None else out


def cluster_move(kind: str, field_mode: str, instance: IsingInstance, T: float, config: int, rng=None) -> int:
    """Single-configuration form of :func:`cluster_moves`."""
    return int(cluster_moves(kind, field_mode, instance, T, np.array([config]), rng)[0])


def cluster_move_fn(kind: str, field_mode: str) -> MoveFn:
    def move(instance, T, codes, rng):
        return cluster_moves(kind, field_mode, instance, T, codes, rng)
    move.__name__ = f"{kind}_{field_mode}"
    return move


def mh_move_fn(proposal: str = "uniform", rule: str = "mh") -> MoveFn:
    """Batched single-step M-H kernel with a local or uniform proposal."""
    accept = acceptance_function(rule)

    def move(instance, T, codes, rng):
        n = instance.n
        if proposal == "uniform":
            prop = rng.integers(2**n, size=len(codes))
        elif proposal == "local":
            prop = codes ^ (1 << rng.integers(n, size=len(codes)))
        else:
            raise ChainError(f"unknown proposal {proposal!r}")
        E = instance.energies
        ok = rng.random(len(codes)) < accept(E[prop] - E[codes], T)
        return np.where(ok | (prop == codes), prop, codes)

    move.__name__ = f"{rule}_{proposal}"
    return move


# ---------------------------------------------------------------------------
# Empirical transition matrices


@dataclass(frozen=True)
class EstimatedTransitionMatrix:
    """Observed ``s -> s'`` counts (``counts[s', s]``) and their column normalization."""

    counts: np.ndarray = field(repr=False)
    initial: np.ndarray = field(repr=False)
    final: np.ndarray = field(repr=False)

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def matrix(self) -> np.ndarray:
        tot = self.totals
        return np.divide(self.counts, tot[None, :], out=np.zeros(self.counts.shape), where=tot[None, :] > 0)

    @property
    def samples(self) -> int:
        return len(self.initial)

    def resample(self, rng) -> "EstimatedTransitionMatrix":
        """Bootstrap copy: draw data points ``(s, s')`` with replacement."""
        gen = _rng(rng)
        idx = gen.integers(self.samples, size=self.samples)
        return from_transitions(self.initial[idx], self.final[idx], self.counts.shape[0])


def from_transitions(initial: np.ndarray, final: np.ndarray, d: int) -> EstimatedTransitionMatrix:
    counts = np.bincount(final * d + initial, minlength=d * d).reshape(d, d)
    return EstimatedTransitionMatrix(counts, np.asarray(initial), np.asarray(final))


def estimate_transition_matrix(move_fn: MoveFn, instance: IsingInstance, T: float, samples: int,
                               rng=None, batch: int = 65536) -> EstimatedTransitionMatrix:
    """``samples`` i.i.d. moves from uniformly random initial states."""
    if samples < 1:
        raise ClusterError("need at least one sample")
    gen = _rng(rng)
    d = 2**instance.n
    initial = gen.integers(d, size=samples)
    final = np.empty_like(initial)
    for start in range(0, samples, batch):
        stop = min(start + batch, samples)
        final[start:stop] = move_fn(instance, T, initial[start:stop], gen)
    return from_transitions(initial, final, d)


# ---------------------------------------------------------------------------
# Houdayer two-replica algorithm
#
# A replica pair is the code ``(s1 << n) | s2``. The overlap mask
# ``s1 ^ s2`` has a set bit wherever q_j = -1.


def _component_table(instance: IsingInstance) -> np.ndarray:
    """``comp[j, m]``: bitmask of the connected component of set bits of ``m`` containing site ``j``.

    Zero when site ``j`` is not set in ``m``. Sites are 0-indexed spins.
    """
    n = instance.n
    bit = [1 << (n - 1 - i) for i in range(n)]
    nbr_mask = [sum(bit[k] for k in instance.neighbors[i]) for i in range(n)]
    comp = np.zeros((n, 2**n), dtype=np.int64)
    for m in range(2**n):
        seen = 0
        for i in range(n):
            if not m & bit[i] or seen & bit[i]:
                continue
            c, frontier = bit[i], [i]
            while frontier:
                u = frontier.pop()
                new = nbr_mask[u] & m & ~c
                while new:
                    low = new & -new
                    c |= low
                    frontier.append(n - low.bit_length())
                    new ^= low
            seen |= c
            for v in range(n):
                if c & bit[v]:
                    comp[v, m] = c
    return comp


@dataclass
class HoudayerTables:
    """Per-site deterministic cluster-flip targets over all ``4**n`` replica pairs."""

    n: int
    targets: np.ndarray  # shape (n, 4**n)

    @classmethod
    def build(cls, instance: IsingInstance) -> "HoudayerTables":
        n = instance.n
        comp = _component_table(instance)
        pairs = np.arange(4**n, dtype=np.int64)
        mask = (pairs >> n) ^ (pairs & (2**n - 1))
        targets = np.empty((n, 4**n), dtype=np.int64 if n > 15 else np.int32)
        for j in range(n):
            c = comp[j, mask]
            targets[j] = pairs ^ ((c << n) | c)
        return cls(n, targets)


def split_pair(pair: int, n: int) -> tuple[int, int]:
    return pair >> n, pair & (2**n - 1)


def join_pair(s1: int, s2: int, n: int) -> int:
    return (s1 << n) | s2


def houdayer_move(instance: IsingInstance, pair: int, rng=None, site: int | None = None) -> int:
    """Flip, in both replicas, the ``q = -1`` component containing a uniformly random site."""
    gen = _rng(rng)
    n = instance.n
    j = int(gen.integers(n)) if site is None else site
    s1, s2 = split_pair(pair, n)
    mask = s1 ^ s2
    b = 1 << (n - 1 - j)
    if not mask & b:
        return pair
    c, frontier = b, [j]
    while frontier:
        u = frontier.pop()
        for v in instance.neighbors[u]:
            bv = 1 << (n - 1 - v)
            if mask & bv and not c & bv:
                c |= bv
                frontier.append(v)
    return join_pair(s1 ^ c, s2 ^ c, n)


def local_mh_matrix(instance: IsingInstance, T: float, rule: str = "mh") -> sp.csr_matrix:
    """Sparse single-replica kernel: flip a uniformly random spin, accept by ``rule``."""
    n, d = instance.n, 2**instance.n
    accept = acceptance_function(rule)
    E = instance.energies
    codes = np.arange(d)
    rows, cols, vals = [], [], []
    stay = np.ones(d)
    for b in range(n):
        to = codes ^ (1 << b)
        a = accept(E[to] - E, T) / n
        rows.append(to)
        cols.append(codes)
        vals.append(a)
        stay -= a
    rows.append(codes)
    cols.append(codes)
    vals.append(stay)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(d, d))


def houdayer_step(instance: IsingInstance, T: float, pair: int, rng=None) -> int:
    """One iteration of the mixed kernel used for chains."""
    gen = _rng(rng)
    n = instance.n
    if gen.random() < n / (n + 1):
        E = instance.energies
        s = list(split_pair(pair, n))
        for r in range(2):
            prop = s[r] ^ (1 << int(gen.integers(n)))
            if gen.random() < np.exp(min(0.0, -(E[prop] - E[s[r]]) / T)):
                s[r] = prop
        return join_pair(s[0], s[1], n)
    return houdayer_move(instance, pair, gen)


class HoudayerKernel:
    """Matrix-free mixed Houdayer transition matrix on ``4**n`` replica pairs.

    With weight ``n/(n+1)``: independent single-flip M-H on each replica
    (``K (x) K``). With weight ``1/(n+1)``: the site-averaged cluster flip,
    a mean of involutive permutations.
    """

    def __init__(self, instance: IsingInstance, T: float, tables: HoudayerTables | None = None):
        if not T > 0:
            raise ClusterError(f"temperature must be positive, got {T}")
        self.instance = instance
        self.T = T
        self.n = instance.n
        self.dim = 4**self.n
        self.K = local_mh_matrix(instance, T)
        self.tables = HoudayerTables.build(instance) if tables is None else tables

    def __call__(self, vector: np.ndarray) -> np.ndarray:
        v = np.asarray(vector, dtype=float)
        if v.shape != (self.dim,):
            raise ClusterError(f"vector has shape {v.shape}, expected ({self.dim},)")
        n, d = self.n, 2**self.n
        V = v.reshape(d, d)
        local = (self.K @ (self.K @ V).T).T  # K V K^T
        cluster = np.zeros(self.dim)
        for t in self.tables.targets:
            cluster += v[t]
        return n / (n + 1) * local.ravel() + cluster / (n * (n + 1))

    def stationary(self) -> np.ndarray:
        mu = boltzmann(self.instance, self.T).probabilities
        return np.kron(mu, mu)

    def dense(self) -> np.ndarray:
        return np.column_stack([self(e) for e in np.eye(self.dim)])


def houdayer_kernel_action(instance: IsingInstance, T: float, vector: np.ndarray) -> np.ndarray:
    """``P v`` for the mixed Houdayer kernel (rebuilds tables on each call)."""
    return HoudayerKernel(instance, T)(vector)
