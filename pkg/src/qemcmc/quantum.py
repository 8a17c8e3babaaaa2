"""Classical simulation of the quantum proposal.

The proposal Hamiltonian is ``H = (1 - gamma) alpha H_prob + gamma sum_j X_j``
in the computational basis of :mod:`qemcmc.ising` codes. Qubit ``j`` (1-indexed)
carries spin ``s_j``; its ``|0>`` state is ``s_j = +1``. In a statevector of
length ``2**n`` reshaped to ``(2,) * n`` the qubit of spin ``j`` is axis ``j-1``.

Transition matrices are column-indexed by the initial state:
``Q[s', s] = |<s'|U|s>|^2``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .ising import IsingError, IsingInstance, _rng, alpha

GAMMA_RANGE = (0.25, 0.6)
TIME_RANGE = (2.0, 20.0)
CHANNEL_GAMMA_SUBINTERVALS = 20
TROTTER_DT = 0.8
TROTTER_GAMMA_SUBINTERVALS = 10
TROTTER_STEPS = tuple(range(2, 26))

PAULIS = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}
HADAMARD = np.array([[1, 1], [1, -1]], dtype=complex) / math.sqrt(2.0)
ZX = np.kron(PAULIS["Z"], PAULIS["X"])


class QuantumError(ValueError):
    """Invalid grid, angle or circuit parameters."""


class SymmetryWarning(UserWarning):
    """A propagator was built from a schedule that does not guarantee ``U^T = U``."""


# ---------------------------------------------------------------------------
# Hamiltonian and exact evolution


def mixer_matrix(n: int) -> np.ndarray:
    """Dense ``sum_j X_j``: the adjacency matrix of the n-cube."""
    d = 2**n
    codes = np.arange(d)
    M = np.zeros((d, d))
    for b in range(n):
        M[codes ^ (1 << b), codes] = 1.0
    return M


@dataclass(frozen=True)
class EigenBasis:
    """Ascending eigenvalues and orthonormal real eigenvectors (columns)."""

    eigenvalues: np.ndarray
    vectors: np.ndarray

    def residuals(self, matrix: np.ndarray) -> tuple[float, float]:
        """Max-abs reconstruction and orthonormality residuals."""
        V, lam = self.vectors, self.eigenvalues
        recon = np.max(np.abs(matrix - (V * lam) @ V.T))
        ortho = np.max(np.abs(V.T @ V - np.eye(len(lam))))
        return float(recon), float(ortho)


@dataclass(frozen=True)
class QuantumHamiltonian:
    instance: IsingInstance
    gamma: float
    alpha: float
    matrix: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.instance.n

    @cached_property
    def basis(self) -> EigenBasis:
        return eigenbasis(self)


def build_hamiltonian(instance: IsingInstance, gamma: float) -> QuantumHamiltonian:
    if not 0.0 <= gamma <= 1.0:
        raise QuantumError(f"gamma must lie in [0, 1], got {gamma}")
    a = alpha(instance)
    H = gamma * mixer_matrix(instance.n)
    H[np.diag_indices_from(H)] = (1.0 - gamma) * a * instance.energies
    return QuantumHamiltonian(instance, float(gamma), a, H)


def eigenbasis(hamiltonian: QuantumHamiltonian | np.ndarray, tolerance: float = 1e-9) -> EigenBasis:
    """Symmetric eigendecomposition with a residual check at ``tolerance``."""
    H = hamiltonian.matrix if isinstance(hamiltonian, QuantumHamiltonian) else np.asarray(hamiltonian)
    try:
        lam, V = np.linalg.eigh(H)
    except np.linalg.LinAlgError as exc:
        raise QuantumError(f"eigendecomposition failed: {exc}") from None
    basis = EigenBasis(lam, V)
    recon, ortho = basis.residuals(H)
    if recon > tolerance * max(1.0, np.abs(lam).max()) or ortho > tolerance:
        raise QuantumError(f"eigendecomposition residuals too large ({recon:.2e}, {ortho:.2e})")
    return basis


def _basis_of(h) -> EigenBasis:
    return h.basis if isinstance(h, QuantumHamiltonian) else h


def exact_unitary(hamiltonian: QuantumHamiltonian | EigenBasis, t: float) -> np.ndarray:
    """``e^{-iHt}`` as a dense complex matrix."""
    b = _basis_of(hamiltonian)
    return (b.vectors * np.exp(-1j * b.eigenvalues * t)) @ b.vectors.T


def evolve_exact(hamiltonian: QuantumHamiltonian | EigenBasis, t: float, config: int) -> np.ndarray:
    """``|<s'|e^{-iHt}|s>|^2`` for every ``s'`` given the initial code ``s``."""
    b = _basis_of(hamiltonian)
    amp = b.vectors @ (b.vectors[config] * np.exp(-1j * b.eigenvalues * t))
    return np.abs(amp) ** 2


def exact_q(hamiltonian: QuantumHamiltonian | EigenBasis, t: float) -> np.ndarray:
    """Transition matrix of a single evolution time."""
    return np.abs(exact_unitary(hamiltonian, t)) ** 2


def midpoints(lo: float, hi: float, count: int) -> np.ndarray:
    """Midpoints of ``count`` equal subintervals of ``[lo, hi]``."""
    if count < 1:
        raise QuantumError("need at least one subinterval")
    width = (hi - lo) / count
    return lo + width * (np.arange(count) + 0.5)


def time_average_kernel(eigenvalues: np.ndarray, t_min: float, t_max: float) -> np.ndarray:
    """``K[l, m]``: the mean of ``cos((lam_l - lam_m) t)`` over ``t`` in ``[t_min, t_max]``.

    Written as ``cos(D t_mid) sinc(D L / 2)``, which equals
    ``[sin(D t_max) - sin(D t_min)] / (D L)`` and is stable as ``D -> 0``.
    """
    D = eigenvalues[:, None] - eigenvalues[None, :]
    L = t_max - t_min
    return np.cos(D * 0.5 * (t_min + t_max)) * np.sinc(D * L / (2.0 * np.pi))


def time_averaged_q(basis: EigenBasis, t_min: float, t_max: float, tolerance: float = 1e-13) -> np.ndarray:
    """Closed-form time average of ``|<s'|e^{-iHt}|s>|^2`` over ``[t_min, t_max]``.

    ``Q[s', s] = sum_{lm} V[s',l] V[s,l] K[l,m] V[s',m] V[s,m]``. The kernel is a
    Gram matrix, hence PSD; factoring it as ``sum_r sigma_r u_r u_r^T`` turns
    the quartic sum into ``sum_r sigma_r (V diag(u_r) V^T)**2``. Terms are
    dropped once the discarded ``sigma`` mass is below ``tolerance``, which
    bounds the entrywise error since ``|V diag(u) V^T| <= 1``.
    """
    V = basis.vectors
    K = time_average_kernel(basis.eigenvalues, t_min, t_max)
    sig, U = np.linalg.eigh(K)
    sig = np.clip(sig, 0.0, None)
    tail = np.cumsum(sig)  # ascending order: tail[i] = mass of the i+1 smallest
    keep = np.nonzero(tail > tolerance)[0]
    Q = np.zeros_like(K)
    for r in keep:
        G = (V * U[:, r]) @ V.T
        Q += sig[r] * G * G
    return Q


def channel_q_matrix(instance: IsingInstance, gamma_subintervals: int = CHANNEL_GAMMA_SUBINTERVALS,
                     t_min: float = TIME_RANGE[0], t_max: float = TIME_RANGE[1],
                     gamma_range: tuple[float, float] = GAMMA_RANGE) -> np.ndarray:
    """Proposal matrix of the idealized channel.

    Averages over ``gamma_subintervals`` midpoints of ``gamma_range`` and, for
    each, takes the exact time average over ``[t_min, t_max]``.
    """
    if not t_max > t_min:
        raise QuantumError("t_max must exceed t_min")
    gammas = midpoints(*gamma_range, gamma_subintervals)
    Q = np.zeros((2**instance.n,) * 2)
    for g in gammas:
        Q += time_averaged_q(build_hamiltonian(instance, g).basis, t_min, t_max)
    return Q / len(gammas)


def channel_at_grid(instance: IsingInstance, gamma_grid: Sequence[float], t_grid: Sequence[float]) -> np.ndarray:
    """Exact-evolution Q averaged uniformly over a discrete ``(gamma, t)`` grid."""
    Q = np.zeros((2**instance.n,) * 2)
    for g in gamma_grid:
        b = build_hamiltonian(instance, g).basis
        for t in t_grid:
            Q += exact_q(b, t)
    return Q / (len(gamma_grid) * len(t_grid))


def default_trotter_grids(delta_t: float = TROTTER_DT) -> tuple[np.ndarray, np.ndarray]:
    """The experiment grids: 10 gamma midpoints and ``t = r dt`` for ``r = 2..25``."""
    return midpoints(*GAMMA_RANGE, TROTTER_GAMMA_SUBINTERVALS), delta_t * np.array(TROTTER_STEPS)


# ---------------------------------------------------------------------------
# Statevector primitives


def apply_gate(states: np.ndarray, matrix: np.ndarray, qubits: Sequence[int], n: int) -> np.ndarray:
    """Apply a ``2^k x 2^k`` gate on 0-indexed qubit axes to a batch of states.

    ``states`` has shape ``(2**n, m)`` (one state per column). The first listed
    qubit is the most significant index of ``matrix``.
    """
    k = len(qubits)
    m = states.shape[1]
    psi = states.reshape((2,) * n + (m,))
    psi = np.moveaxis(psi, list(qubits), list(range(k)))
    shape = psi.shape
    psi = (matrix @ psi.reshape(2**k, -1)).reshape(shape)
    psi = np.moveaxis(psi, list(range(k)), list(qubits))
    return psi.reshape(2**n, m)


def single_qubit_rotation(a: float, b: float) -> np.ndarray:
    """``exp(-i (a X + b Z))``."""
    w = math.hypot(a, b)
    if w == 0.0:
        return np.eye(2, dtype=complex)
    return math.cos(w) * np.eye(2) - 1j * math.sin(w) / w * (a * PAULIS["X"] + b * PAULIS["Z"])


def rzz_matrix(theta: float) -> np.ndarray:
    """``R_ZZ(theta) = exp(-i theta/2 Z Z)``."""
    z = np.array([1, -1, -1, 1])
    return np.diag(np.exp(-0.5j * theta * z))


def rzx_matrix(theta: float) -> np.ndarray:
    """``R_ZX(theta) = exp(-i theta/2 Z X)``, Z on the first qubit."""
    return math.cos(theta / 2) * np.eye(4) - 1j * math.sin(theta / 2) * ZX


def zz_phases(n: int, pairs: Sequence[tuple[int, int]], thetas: Sequence[float]) -> np.ndarray:
    """Diagonal of ``prod R_ZZ(theta_jk)`` over 1-indexed pairs, indexed by code."""
    codes = np.arange(2**n)
    phase = np.zeros(2**n)
    for (j, k), th in zip(pairs, thetas):
        zj = 1 - 2 * ((codes >> (n - j)) & 1)
        zk = 1 - 2 * ((codes >> (n - k)) & 1)
        phase += -0.5 * th * zj * zk
    return np.exp(1j * phase)


# ---------------------------------------------------------------------------
# Trotter circuits


def _layers(pairs: Sequence[tuple[int, int]]) -> list[list[int]]:
    """Greedy partition of edges into layers of disjoint pairs (indices into ``pairs``)."""
    layers: list[list[int]] = []
    busy: list[set[int]] = []
    for idx, (j, k) in enumerate(pairs):
        for layer, used in zip(layers, busy):
            if j not in used and k not in used:
                layer.append(idx)
                used.update((j, k))
                break
        else:
            layers.append([idx])
            busy.append({j, k})
    return layers


@dataclass(frozen=True)
class TrotterCircuit:
    """Second-order product-formula circuit for one ``(gamma, t)`` point.

    Gate parameters: single-qubit ``exp(-i(a_j X + b_j Z))`` with
    ``a_j = gamma dt`` and ``b_j = -(1-gamma) alpha h_j dt``; entanglers
    ``R_ZZ(theta_jk)`` with ``theta_jk = -2 J_jk (1-gamma) alpha dt``.
    """

    n: int
    a: np.ndarray
    b: np.ndarray
    pairs: tuple[tuple[int, int], ...]
    theta: np.ndarray
    steps: int
    delta_t: float

    @classmethod
    def build(cls, instance: IsingInstance, gamma: float, t: float | None = None,
              delta_t: float = TROTTER_DT, steps: int | None = None) -> "TrotterCircuit":
        if steps is None:
            if t is None:
                raise QuantumError("give either t or steps")
            steps = steps_for_time(t, delta_t)
        if steps < 2:
            raise QuantumError(f"need at least 2 Trotter steps, got {steps}")
        a_ = alpha(instance)
        scale = (1.0 - gamma) * a_ * delta_t
        pairs = tuple((j, k) for j, k, _ in instance.couplings)
        theta = np.array([-2.0 * J * scale for _, _, J in instance.couplings])
        a = np.full(instance.n, gamma * delta_t)
        b = -scale * instance.field_vector
        return cls(instance.n, a, b, pairs, theta, int(steps), float(delta_t))

    @property
    def time(self) -> float:
        return self.steps * self.delta_t

    def single_qubit_gates(self) -> list[np.ndarray]:
        return [single_qubit_rotation(a, b) for a, b in zip(self.a, self.b)]

    def rzz_layers(self) -> list[list[tuple[tuple[int, int], float]]]:
        """Entanglers grouped into layers of disjoint pairs."""
        return [[(self.pairs[i], float(self.theta[i])) for i in layer] for layer in _layers(self.pairs)]

    def gates(self) -> list[tuple[str, tuple[int, ...], float | np.ndarray]]:
        """Flat gate list ``(name, 1-indexed qubits, matrix or angle)`` in time order."""
        u = self.single_qubit_gates()
        single = [("u", (j + 1,), u[j]) for j in range(self.n)]
        entangle = [("rzz", pair, th) for layer in self.rzz_layers() for pair, th in layer]
        return single + (entangle + single) * (self.steps - 1)

    def run(self, states: np.ndarray) -> np.ndarray:
        """Apply the circuit to a batch of states (columns)."""
        u = self.single_qubit_gates()
        zz = zz_phases(self.n, self.pairs, self.theta)
        out = states.astype(complex)
        for r in range(self.steps):
            if r:
                out = zz[:, None] * out
            for j in range(self.n):
                out = apply_gate(out, u[j], (j,), self.n)
        return out

    def unitary(self) -> np.ndarray:
        return self.run(np.eye(2**self.n, dtype=complex))


def steps_for_time(t: float, delta_t: float) -> int:
    r = int(round(t / delta_t))
    if abs(r * delta_t - t) > 1e-9 * max(1.0, abs(t)):
        raise QuantumError(f"t={t} is not an integer multiple of dt={delta_t}")
    return r


def symmetric_trotter_unitary(instance: IsingInstance, gamma: float, steps: int, delta_t: float) -> np.ndarray:
    """``(e^{-i H2 dt/2} e^{-i H1 dt} e^{-i H2 dt/2})^r`` with ``H2`` the ``ZZ`` part."""
    c = TrotterCircuit.build(instance, gamma, delta_t=delta_t, steps=max(steps, 2))
    half = zz_phases(c.n, c.pairs, 0.5 * c.theta)
    u = c.single_qubit_gates()
    out = np.eye(2**c.n, dtype=complex)
    for _ in range(steps):
        out = half[:, None] * out
        for j in range(c.n):
            out = apply_gate(out, u[j], (j,), c.n)
        out = half[:, None] * out
    return out


def trotter_q_matrix(instance: IsingInstance, gamma_grid: Sequence[float] | None = None,
                     t_grid: Sequence[float] | None = None, delta_t: float = TROTTER_DT) -> np.ndarray:
    """Proposal matrix of the Trotter circuits averaged uniformly over the grid.

    All times on the grid share one pass: the circuit for ``r + 1`` steps is the
    ``r``-step circuit followed by one more (entangler, single-qubit) layer.
    """
    dg, dt_grid = default_trotter_grids(delta_t)
    gamma_grid = dg if gamma_grid is None else np.asarray(gamma_grid, dtype=float)
    t_grid = dt_grid if t_grid is None else np.asarray(t_grid, dtype=float)
    steps = [steps_for_time(t, delta_t) for t in t_grid]
    if min(steps) < 2:
        raise QuantumError("every grid time needs at least 2 Trotter steps")
    wanted: dict[int, int] = {}
    for r in steps:
        wanted[r] = wanted.get(r, 0) + 1
    n, d = instance.n, 2**instance.n
    Q = np.zeros((d, d))
    for g in gamma_grid:
        c = TrotterCircuit.build(instance, g, delta_t=delta_t, steps=2)
        u = c.single_qubit_gates()
        zz = zz_phases(n, c.pairs, c.theta)
        psi = np.eye(d, dtype=complex)
        for r in range(1, max(wanted) + 1):
            if r > 1:
                psi = zz[:, None] * psi
            for j in range(n):
                psi = apply_gate(psi, u[j], (j,), n)
            if r in wanted:
                Q += wanted[r] * np.abs(psi) ** 2
    return Q / (len(gamma_grid) * len(t_grid))


# ---------------------------------------------------------------------------
# Compilation to R_ZX and twirling


def fold_rzx_angle(theta: float) -> tuple[float, tuple[str, str], complex]:
    """Fold ``theta`` into ``[-pi/2, pi/2]``.

    Returns ``(residual, paulis, phase)`` with
    ``R_ZX(theta) = phase * P * R_ZX(residual)`` where ``P`` is ``Z (x) X`` when
    ``paulis == ("Z", "X")`` and the identity otherwise. Uses
    ``R_ZX(pi) = -i Z X``; ``+-pi`` fold to 0 with the ``Z X`` correction.
    """
    k = int(round(theta / math.pi))
    residual = theta - k * math.pi
    paulis = ("Z", "X") if k % 2 else ("I", "I")
    phase = (-1j) ** (k % 4)
    return residual, paulis, complex(phase)


def folded_rzx_matrix(theta: float) -> np.ndarray:
    residual, paulis, phase = fold_rzx_angle(theta)
    P = np.kron(PAULIS[paulis[0]], PAULIS[paulis[1]])
    return phase * P @ rzx_matrix(residual)


def anticommutes_with_zx(p1: str, p2: str) -> bool:
    """Whether ``p1 (x) p2`` anticommutes with ``Z (x) X``."""
    return ((p1 in "XY") + (p2 in "YZ")) % 2 == 1


@dataclass(frozen=True)
class TwirledRZX:
    """``(P1 P2) R_ZX(angle) (P1 P2)``; ``angle`` is ``-theta`` for anticommuting Paulis."""

    theta: float
    p1: str
    p2: str
    angle: float

    def matrix(self) -> np.ndarray:
        P = np.kron(PAULIS[self.p1], PAULIS[self.p2])
        return P @ rzx_matrix(self.angle) @ P


def gate_twirl(theta: float, p1: str, p2: str) -> TwirledRZX:
    """Pauli-frame the gate ``R_ZX(theta)`` with ``p1 (x) p2`` on both sides."""
    if p1 not in PAULIS or p2 not in PAULIS:
        raise QuantumError(f"unknown Pauli label {p1!r}/{p2!r}")
    angle = -theta if anticommutes_with_zx(p1, p2) else theta
    return TwirledRZX(float(theta), p1, p2, float(angle))


@dataclass(frozen=True)
class Gate:
    """Explicit gate on 1-indexed qubits; the first qubit is the most significant."""

    name: str
    qubits: tuple[int, ...]
    matrix: np.ndarray = field(repr=False)


def compile_rzz(j: int, k: int, theta: float, fold: bool = True,
                twirl: tuple[str, str] | None = None) -> list[Gate]:
    """``R_ZZ(theta)`` on ``(j, k)`` as ``H_k R_ZX(theta) H_k``, control ``j``, target ``k``.

    ``fold`` reduces the angle to ``[-pi/2, pi/2]`` and emits the Pauli
    correction. ``twirl`` wraps the residual ``R_ZX`` in a Pauli frame.
    """
    gates = [Gate("h", (k,), HADAMARD)]
    angle = theta
    if fold:
        angle, paulis, phase = fold_rzx_angle(theta)
        if paulis != ("I", "I"):
            gates.append(Gate("zx", (j, k), phase * ZX))
        elif phase != 1:
            gates.append(Gate("phase", (j,), phase * np.eye(2)))
    if twirl is not None:
        tw = gate_twirl(angle, *twirl)
        P = np.kron(PAULIS[tw.p1], PAULIS[tw.p2])
        gates += [Gate("pauli", (j, k), P), Gate("rzx", (j, k), rzx_matrix(tw.angle)), Gate("pauli", (j, k), P)]
    else:
        gates.append(Gate("rzx", (j, k), rzx_matrix(angle)))
    gates.append(Gate("h", (k,), HADAMARD))
    return gates


def compile_circuit(circuit: TrotterCircuit, fold: bool = True, twirl_rng=None) -> list[Gate]:
    """Lower a Trotter circuit to single-qubit gates and ``R_ZX`` entanglers.

    With ``twirl_rng`` every ``R_ZX`` gets an independent uniformly random
    Pauli frame.
    """
    rng = None if twirl_rng is None else _rng(twirl_rng)
    labels = "IXYZ"
    out: list[Gate] = []
    for name, qubits, param in circuit.gates():
        if name == "u":
            out.append(Gate("u", qubits, param))
            continue
        twirl = None
        if rng is not None:
            twirl = (labels[rng.integers(4)], labels[rng.integers(4)])
        out.extend(compile_rzz(qubits[0], qubits[1], float(param), fold, twirl))
    return out


def run_gates(gates: Sequence[Gate], n: int, states: np.ndarray | None = None) -> np.ndarray:
    """Apply a gate list to a batch of states (identity batch by default)."""
    psi = np.eye(2**n, dtype=complex) if states is None else states.astype(complex)
    for g in gates:
        psi = apply_gate(psi, g.matrix, [q - 1 for q in g.qubits], n)
    return psi


def key_mask(key: Sequence[int]) -> int:
    """Code-space XOR mask of a sign key: bit set where ``c_j = -1``."""
    n = len(key)
    mask = 0
    for j, c in enumerate(key):
        if c not in (1, -1):
            raise QuantumError("key entries must be +1 or -1")
        if c == -1:
            mask |= 1 << (n - 1 - j)
    return mask


@dataclass(frozen=True)
class SpamTwirl:
    """A sign-flipped circuit and the matching input/output relabeling."""

    circuit: TrotterCircuit
    key: tuple[int, ...]
    mask: int

    def prepare(self, code):
        """Physical initial state for logical initial state ``code``."""
        return np.bitwise_xor(code, self.mask)

    def postprocess(self, measured):
        """Logical outcome for physical measurement ``measured``."""
        return np.bitwise_xor(measured, self.mask)

    def transition_matrix(self, unitary: np.ndarray | None = None) -> np.ndarray:
        """Logical ``Q`` implied by the twirled circuit (or a given physical unitary)."""
        U = self.circuit.unitary() if unitary is None else unitary
        idx = np.arange(2**self.circuit.n) ^ self.mask
        return np.abs(U[np.ix_(idx, idx)]) ** 2


def spam_twirl(circuit: TrotterCircuit, key: Sequence[int]) -> SpamTwirl:
    """Gauge the circuit by ``c``: ``b_j -> c_j b_j`` and ``theta_jk -> c_j c_k theta_jk``.

    Preparing ``|s xor c>`` and XOR-ing the readout with ``c`` reproduces the
    bare circuit's statistics, because the twirled unitary is the bare one
    conjugated by ``X`` on the flipped qubits.
    """
    c = np.asarray(key, dtype=int)
    if c.shape != (circuit.n,):
        raise QuantumError(f"key length {len(c)} does not match n={circuit.n}")
    mask = key_mask(c)
    theta = np.array([th * c[j - 1] * c[k - 1] for (j, k), th in zip(circuit.pairs, circuit.theta)])
    twirled = replace(circuit, b=circuit.b * c, theta=theta)
    return SpamTwirl(twirled, tuple(int(v) for v in c), mask)


# ---------------------------------------------------------------------------
# Readout noise


def _check_noise(p01: float, p10: float) -> None:
    if not (0.0 <= p01 < 0.5 and 0.0 <= p10 < 0.5):
        raise QuantumError("readout flip probabilities must lie in [0, 0.5)")


def apply_readout_noise(sampled_bits: np.ndarray, p01: float, p10: float, rng=None) -> np.ndarray:
    """Flip each 0 to 1 with probability ``p01`` and each 1 to 0 with ``p10``."""
    _check_noise(p01, p10)
    bits = np.asarray(sampled_bits).astype(np.uint8)
    u = _rng(rng).random(bits.shape)
    flip = np.where(bits == 0, u < p01, u < p10)
    return bits ^ flip.astype(np.uint8)


def noisy_codes(codes: np.ndarray, n: int, p01: float, p10: float, rng=None) -> np.ndarray:
    """:func:`apply_readout_noise` on integer codes, bit by bit."""
    codes = np.asarray(codes, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(n - 1, -1, -1)) & 1
    noisy = apply_readout_noise(bits, p01, p10, rng).astype(np.int64)
    return noisy @ (1 << np.arange(n - 1, -1, -1))


def readout_matrix(n: int, p01: float, p10: float) -> np.ndarray:
    """Column-stochastic ``N[j', j]``: probability of reading ``j'`` when the state is ``j``."""
    _check_noise(p01, p10)
    one = np.array([[1 - p01, p10], [p01, 1 - p10]])
    N = np.ones((1, 1))
    for _ in range(n):
        N = np.kron(N, one)
    return N


# ---------------------------------------------------------------------------
# Validation oracles


def perturbative_transition(instance: IsingInstance, gamma: float, t: float, j: int, k: int) -> float:
    """Leading-order ``j -> k`` probability ``gamma^2 t^2 sinc^2(t alpha dE / 2) |<k|H_mix|j>|^2``."""
    if j == k:
        raise QuantumError("the perturbative formula covers off-diagonal transitions only")
    if (j ^ k).bit_count() != 1:
        return 0.0
    dE = instance.energies[k] - instance.energies[j]
    x = t * alpha(instance) * dE / 2.0
    return float(gamma**2 * t**2 * np.sinc(x / np.pi) ** 2)


def longtime_transition(hamiltonian: QuantumHamiltonian | EigenBasis, j: int, k: int) -> float:
    """Infinite-time average ``sum_l |<k|l><l|j>|^2`` (non-degenerate spectrum)."""
    V = _basis_of(hamiltonian).vectors
    return float(np.sum(V[k] ** 2 * V[j] ** 2))


def longtime_q(hamiltonian: QuantumHamiltonian | EigenBasis) -> np.ndarray:
    V2 = _basis_of(hamiltonian).vectors ** 2
    return V2 @ V2.T


def reverse_anneal_propagator(instance: IsingInstance, schedule: Callable[[float], float],
                              tau: float, steps: int) -> np.ndarray:
    """Piecewise-constant propagator of ``H(f(t))`` sampled at step midpoints.

    Emits :class:`SymmetryWarning` unless the sampled schedule is palindromic,
    the condition under which the product is exactly transpose-symmetric.
    """
    if steps < 1:
        raise QuantumError("need at least one step")
    dt = tau / steps
    f = np.array([float(schedule((i + 0.5) * dt)) for i in range(steps)])
    if np.any((f < 0) | (f > 1)):
        raise QuantumError("schedule values must lie in [0, 1]")
    if not np.allclose(f, f[::-1], rtol=0.0, atol=1e-12):
        warnings.warn("schedule is not palindromic; U^T = U is not guaranteed", SymmetryWarning, stacklevel=2)
    cache: dict[float, np.ndarray] = {}
    U = np.eye(2**instance.n, dtype=complex)
    for v in f:
        step = cache.get(v)
        if step is None:
            step = cache[v] = exact_unitary(build_hamiltonian(instance, v), dt)
        U = step @ U
    return U


# ---------------------------------------------------------------------------
# Synthetic grid experiment


def sample_columns(Q: np.ndarray, initial: np.ndarray, rng) -> np.ndarray:
    """Draw one final state from column ``initial[i]`` of ``Q`` for every ``i``."""
    d = Q.shape[0]
    cum = np.cumsum(Q, axis=0)
    # Column k occupies [k, k + 1) after the shift, so one sorted search serves all columns.
    flat = (cum + np.arange(d)[None, :]).T.ravel()
    u = rng.random(len(initial)) * cum[-1, initial]
    idx = np.searchsorted(flat, initial + u, side="right")
    return np.clip(idx - initial * d, 0, d - 1)


def sample_grid_counts(instance: IsingInstance, shots_per_circuit: int, n_twirl: int = 1,
                       spam: bool = False, p01: float = 0.0, p10: float = 0.0, rng=None,
                       gamma_grid: Sequence[float] | None = None, t_grid: Sequence[float] | None = None,
                       delta_t: float = TROTTER_DT, prep_noise: bool = True):
    """Simulate the grid experiment and return its :class:`~qemcmc.cache_io.TransitionCounts`.

    Circuits are indexed ``l = (gamma_index * len(t_grid) + t_index) * n_twirl + twirl``.
    Every shot starts from a uniformly random logical state. With ``spam`` each
    circuit gets a random sign key: the physical circuit is the gauged one, the
    state ``k xor c`` is prepared and the readout is XOR-ed with ``c``.

    The bit-flip channel ``(p01, p10)`` acts on the physical readout and, when
    ``prep_noise`` is set, also on the physical prepared string (the record
    keeps the intended ``k``). The noiseless physical statistics are the bare
    ones relabeled by ``c`` (an exact identity), so the bare Trotter matrices
    are reused.
    """
    from .cache_io import TransitionCounts

    gen = _rng(rng)
    dg, dt_grid = default_trotter_grids(delta_t)
    gamma_grid = dg if gamma_grid is None else np.asarray(gamma_grid, dtype=float)
    t_grid = dt_grid if t_grid is None else np.asarray(t_grid, dtype=float)
    steps = [steps_for_time(t, delta_t) for t in t_grid]
    if min(steps) < 2:
        raise QuantumError("every grid time needs at least 2 Trotter steps")
    noisy = p01 > 0 or p10 > 0
    if noisy:
        _check_noise(p01, p10)
    n, d = instance.n, 2**instance.n
    n_circ = len(gamma_grid) * len(t_grid) * n_twirl
    js, ks, ls = [], [], []
    for gi, g in enumerate(gamma_grid):
        c = TrotterCircuit.build(instance, g, delta_t=delta_t, steps=2)
        u = c.single_qubit_gates()
        zz = zz_phases(n, c.pairs, c.theta)
        psi = np.eye(d, dtype=complex)
        by_step = {}
        for r in range(1, max(steps) + 1):
            if r > 1:
                psi = zz[:, None] * psi
            for j in range(n):
                psi = apply_gate(psi, u[j], (j,), n)
            if r in steps:
                by_step[r] = np.abs(psi) ** 2
        for ti, r in enumerate(steps):
            Q = by_step[r]
            for w in range(n_twirl):
                l = (gi * len(t_grid) + ti) * n_twirl + w
                k = gen.integers(d, size=shots_per_circuit)
                mask = key_mask(gen.choice([-1, 1], size=n)) if spam else 0
                source = k
                if noisy and prep_noise:
                    source = noisy_codes(k ^ mask, n, p01, p10, gen) ^ mask
                physical = sample_columns(Q, source, gen) ^ mask
                if noisy:
                    physical = noisy_codes(physical, n, p01, p10, gen)
                js.append(physical ^ mask)
                ks.append(k)
                ls.append(np.full(shots_per_circuit, l))
    return TransitionCounts.from_arrays(n, n_circ, np.concatenate(js), np.concatenate(ks), np.concatenate(ls))
