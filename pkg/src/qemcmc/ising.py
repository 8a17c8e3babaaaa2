"""Classical Ising instances, energies and exact Boltzmann statistics.

Configurations are integer codes. Bit ``b`` (counted from the least
significant bit) holds spin ``s_{n-b}``; a clear bit means ``+1`` and a set
bit means ``-1``. Code 0 is therefore the all-up configuration and the last
spin ``s_n`` lives in the least significant bit. Spins are 1-indexed in the
public API (``J[j, k]`` with ``j > k``) to match the usual instance listings.

Random instances use ``numpy.random.default_rng`` (PCG64 bit generator,
ziggurat normals). Coefficients are drawn in a fixed order: couplings for
``j = 2..n``, ``k = 1..j-1`` (skipping pairs absent from the connectivity),
then the fields ``h_1..h_n``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from typing import Callable, Iterable, Sequence

import numpy as np

CONNECTIVITIES = ("full", "chain", "custom")
MAX_ENUMERATION_SPINS = 24


class IsingError(ValueError):
    """Invalid instance, configuration or temperature."""


def spins_from_code(code: int, n: int) -> np.ndarray:
    """Return the spin vector ``(s_1, ..., s_n)`` encoded by ``code``."""
    if not 0 <= code < 2**n:
        raise IsingError(f"code {code} out of range for n={n}")
    bits = (code >> np.arange(n - 1, -1, -1)) & 1
    return (1 - 2 * bits).astype(np.int8)


def code_from_spins(spins: Sequence[int]) -> int:
    code = 0
    for s in spins:
        if s not in (1, -1):
            raise IsingError(f"spin values must be +1 or -1, got {s}")
        code = (code << 1) | (1 if s == -1 else 0)
    return code


def all_spins(n: int) -> np.ndarray:
    """All ``2**n`` configurations as a ``(2**n, n)`` int8 array, row = code."""
    codes = np.arange(2**n, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(n - 1, -1, -1)[None, :]) & 1
    return (1 - 2 * bits).astype(np.int8)


def flip_mask(n: int, spin_index: int) -> int:
    """Bit mask flipping the 1-indexed spin ``spin_index``."""
    return 1 << (n - spin_index)


def hamming(a: int, b: int) -> int:
    return (a ^ b).bit_count()


@dataclass(frozen=True)
class IsingInstance:
    """Couplings ``J_jk`` (1-indexed, ``j > k``) and fields ``h_j``."""

    n: int
    couplings: tuple[tuple[int, int, float], ...]
    fields: tuple[float, ...]
    connectivity: str = "custom"
    seed: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.n < 1:
            raise IsingError("need at least one spin")
        if len(self.fields) != self.n:
            raise IsingError(f"expected {self.n} fields, got {len(self.fields)}")
        if self.connectivity not in CONNECTIVITIES:
            raise IsingError(f"unknown connectivity {self.connectivity!r}")
        seen = set()
        cleaned = []
        for j, k, value in self.couplings:
            j, k = int(j), int(k)
            if not 1 <= k < j <= self.n:
                raise IsingError(f"coupling index ({j}, {k}) must satisfy 1 <= k < j <= n")
            if (j, k) in seen:
                raise IsingError(f"duplicate coupling ({j}, {k})")
            seen.add((j, k))
            if self.connectivity == "chain" and j - k != 1:
                raise IsingError(f"chain instance cannot couple ({j}, {k})")
            if value != 0.0:
                cleaned.append((j, k, float(value)))
        object.__setattr__(self, "couplings", tuple(sorted(cleaned)))
        object.__setattr__(self, "fields", tuple(float(h) for h in self.fields))

    @classmethod
    def from_arrays(cls, J: np.ndarray, h: Sequence[float], connectivity: str = "custom",
                    seed: int | None = None) -> "IsingInstance":
        """Build from a dense coupling matrix (0-indexed; lower triangle is read)."""
        J = np.asarray(J, dtype=float)
        n = len(h)
        couplings = [(j + 1, k + 1, J[j, k]) for j in range(n) for k in range(j) if J[j, k] != 0.0]
        return cls(n, tuple(couplings), tuple(h), connectivity, seed)

    @classmethod
    def chain(cls, J_chain: Sequence[float], h: Sequence[float]) -> "IsingInstance":
        """1D open chain with ``J_{j+1,j} = J_chain[j-1]``."""
        if len(J_chain) != len(h) - 1:
            raise IsingError("a chain of n spins has n-1 couplings")
        couplings = [(j + 2, j + 1, J) for j, J in enumerate(J_chain)]
        return cls(len(h), tuple(couplings), tuple(h), "chain")

    @cached_property
    def coupling_matrix(self) -> np.ndarray:
        """Symmetric 0-indexed ``n x n`` coupling matrix with zero diagonal."""
        J = np.zeros((self.n, self.n))
        for j, k, value in self.couplings:
            J[j - 1, k - 1] = J[k - 1, j - 1] = value
        return J

    @cached_property
    def field_vector(self) -> np.ndarray:
        return np.array(self.fields)

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        """0-indexed adjacency lists of the coupling graph."""
        adj = [[] for _ in range(self.n)]
        for j, k, _ in self.couplings:
            adj[j - 1].append(k - 1)
            adj[k - 1].append(j - 1)
        return tuple(tuple(sorted(a)) for a in adj)

    @cached_property
    def energies(self) -> np.ndarray:
        """Energy of every configuration, indexed by code."""
        if self.n > MAX_ENUMERATION_SPINS:
            raise IsingError(f"n={self.n} is too large to enumerate")
        S = all_spins(self.n).astype(float)
        return -0.5 * np.einsum("ci,ij,cj->c", S, self.coupling_matrix, S) - S @ self.field_vector

    def coefficient_vector(self) -> np.ndarray:
        return np.concatenate([[J for _, _, J in self.couplings], self.fields])

    def to_dict(self) -> dict:
        out = {
            "n": self.n,
            "connectivity": self.connectivity,
            "couplings": [[j, k, J] for j, k, J in self.couplings],
            "fields": list(self.fields),
        }
        if self.seed is not None:
            out["seed"] = self.seed
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "IsingInstance":
        try:
            return cls(
                n=int(data["n"]),
                couplings=tuple((int(j), int(k), float(J)) for j, k, J in data["couplings"]),
                fields=tuple(float(h) for h in data["fields"]),
                connectivity=data.get("connectivity", "custom"),
                seed=data.get("seed"),
            )
        except KeyError as exc:
            raise IsingError(f"instance is missing key {exc}") from None


@dataclass(frozen=True)
class BoltzmannTable:
    T: float
    probabilities: np.ndarray
    energies: np.ndarray

    @property
    def log_probabilities(self) -> np.ndarray:
        shifted = -(self.energies - self.energies.min()) / self.T
        return shifted - np.logaddexp.reduce(shifted)

    def top(self, k: int) -> list[tuple[int, float, float]]:
        """The ``k`` most probable configurations as ``(code, probability, energy)``."""
        order = np.argsort(-self.probabilities, kind="stable")[:k]
        return [(int(c), float(self.probabilities[c]), float(self.energies[c])) for c in order]


def _as_code(instance: IsingInstance, config) -> int:
    if isinstance(config, (int, np.integer)):
        code = int(config)
        if not 0 <= code < 2**instance.n:
            raise IsingError(f"config {code} out of range for n={instance.n}")
        return code
    spins = list(config)
    if len(spins) != instance.n:
        raise IsingError(f"config has {len(spins)} spins, instance has {instance.n}")
    return code_from_spins(spins)


def energy(instance: IsingInstance, config) -> float:
    """Ising energy ``-sum_{j>k} J_jk s_j s_k - sum_j h_j s_j``.

    ``config`` is an integer code or a sequence of +-1 spins.
    """
    s = spins_from_code(_as_code(instance, config), instance.n).astype(float)
    return float(-0.5 * s @ instance.coupling_matrix @ s - instance.field_vector @ s)


def delta_energy(instance: IsingInstance, config, flip_index: int) -> float:
    """Energy change from flipping the 1-indexed spin ``flip_index``."""
    if not 1 <= flip_index <= instance.n:
        raise IsingError(f"flip index {flip_index} out of range 1..{instance.n}")
    code = _as_code(instance, config)
    n = instance.n
    i = flip_index - 1
    s_i = -1.0 if (code >> (n - 1 - i)) & 1 else 1.0
    local = instance.fields[i]
    for k in instance.neighbors[i]:
        s_k = -1.0 if (code >> (n - 1 - k)) & 1 else 1.0
        local += instance.coupling_matrix[i, k] * s_k
    return 2.0 * s_i * local


def magnetization(config, n: int | None = None) -> float:
    """Mean spin. ``config`` is a spin sequence, or an integer code with ``n``."""
    if isinstance(config, (int, np.integer)):
        if n is None:
            raise IsingError("n is required for integer codes")
        return float(n - 2 * int(config).bit_count()) / n
    s = np.asarray(config)
    return float(s.mean())


def magnetizations(n: int) -> np.ndarray:
    """Magnetization of every configuration, indexed by code."""
    return all_spins(n).mean(axis=1)


def alpha(instance: IsingInstance) -> float:
    """Normalization ``sqrt(n) / sqrt(sum J^2 + sum h^2)`` between mixer and problem terms."""
    norm2 = float(np.sum(instance.coefficient_vector() ** 2))
    if norm2 == 0.0:
        raise IsingError("all couplings and fields are zero; alpha is undefined")
    return math.sqrt(instance.n) / math.sqrt(norm2)


def n_coefficients(n: int, connectivity: str) -> int:
    if connectivity == "full":
        return n + n * (n - 1) // 2
    if connectivity == "chain":
        return 2 * n - 1
    raise IsingError(f"no coefficient count for connectivity {connectivity!r}")


def expected_alpha(n: int, connectivity: str, sigma: float = 1.0) -> float:
    """Ensemble mean of :func:`alpha` for i.i.d. ``Normal(0, sigma^2)`` coefficients.

    ``sqrt(n) / (sigma sqrt 2) * Gamma((N-1)/2) / Gamma(N/2)`` with ``N`` the
    number of random coefficients, evaluated through log-Gamma.
    """
    if n < 1 or sigma <= 0:
        raise IsingError("need n >= 1 and sigma > 0")
    N = n_coefficients(n, connectivity)
    if N < 2:
        # N = 1: E|x|^{-1} diverges for a single normal coefficient.
        return math.inf
    log_ratio = math.lgamma((N - 1) / 2) - math.lgamma(N / 2)
    return math.sqrt(n) / (sigma * math.sqrt(2.0)) * math.exp(log_ratio)


def boltzmann(instance: IsingInstance, T: float) -> BoltzmannTable:
    if not T > 0:
        raise IsingError(f"temperature must be positive, got {T}")
    E = instance.energies
    w = np.exp(-(E - E.min()) / T)
    return BoltzmannTable(float(T), w / w.sum(), E)


def thermal_average(instance: IsingInstance, T: float,
                    observable: Callable[[np.ndarray], float] | np.ndarray | str = "magnetization") -> float:
    """Exact ``sum_s mu(s) f(s)`` by enumeration.

    ``observable`` may be ``"magnetization"``, ``"energy"``, a vector indexed by
    code, or a callable applied to each spin vector.
    """
    mu = boltzmann(instance, T).probabilities
    if isinstance(observable, str):
        if observable == "magnetization":
            values = magnetizations(instance.n)
        elif observable == "energy":
            values = instance.energies
        else:
            raise IsingError(f"unknown observable {observable!r}")
    elif callable(observable):
        values = np.array([observable(s) for s in all_spins(instance.n)], dtype=float)
    else:
        values = np.asarray(observable, dtype=float)
    return float(mu @ values)


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def coupling_pairs(n: int, connectivity: str) -> list[tuple[int, int]]:
    if connectivity == "full":
        return [(j, k) for j in range(2, n + 1) for k in range(1, j)]
    if connectivity == "chain":
        return [(j, j - 1) for j in range(2, n + 1)]
    raise IsingError(f"cannot generate random {connectivity!r} instances")


def gen_random_instance(n: int, connectivity: str = "full", sigma: float = 1.0,
                        rng=None) -> IsingInstance:
    """Draw all couplings on the connectivity graph and all fields i.i.d. Normal(0, sigma^2).

    ``rng`` is a ``numpy.random.Generator`` or an integer seed.
    """
    if n < 1:
        raise IsingError("need at least one spin")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    gen = _rng(rng)
    pairs = coupling_pairs(n, connectivity)
    J = sigma * gen.standard_normal(len(pairs))
    h = sigma * gen.standard_normal(n)
    couplings = tuple((j, k, float(v)) for (j, k), v in zip(pairs, J))
    return IsingInstance(n, couplings, tuple(h), connectivity, None if seed is None else int(seed))


def ghost_spin_transform(instance: IsingInstance) -> IsingInstance:
    """Field-free ``(n+1)``-spin instance with spin ``n+1`` coupled via ``J_{n+1,j} = h_j``.

    With the extra spin held at +1 (the least significant bit clear, i.e.
    code ``c << 1``) energies coincide with the original instance.
    """
    n = instance.n
    couplings = list(instance.couplings)
    couplings += [(n + 1, j + 1, h) for j, h in enumerate(instance.fields) if h != 0.0]
    return IsingInstance(n + 1, tuple(couplings), (0.0,) * (n + 1), "custom", instance.seed)


def negate(instance: IsingInstance) -> IsingInstance:
    """Instance with every coupling and field sign-flipped."""
    return IsingInstance(instance.n, tuple((j, k, -J) for j, k, J in instance.couplings),
                         tuple(-h for h in instance.fields), instance.connectivity)


def sign_flip(instance: IsingInstance, key: Iterable[int]) -> IsingInstance:
    """Gauge transform ``J_jk -> J_jk c_j c_k``, ``h_j -> h_j c_j`` for ``c in {+-1}^n``."""
    c = list(key)
    if len(c) != instance.n:
        raise IsingError(f"key length {len(c)} does not match n={instance.n}")
    if any(v not in (1, -1) for v in c):
        raise IsingError("key entries must be +1 or -1")
    couplings = tuple((j, k, J * c[j - 1] * c[k - 1]) for j, k, J in instance.couplings)
    fields = tuple(h * c[j] for j, h in enumerate(instance.fields))
    return IsingInstance(instance.n, couplings, fields, instance.connectivity)


def paper_instance(n: int) -> IsingInstance:
    """One of the bundled 1D chain instances (n = 8, 9 or 10)."""
    name = f"chain_n{n}.json"
    try:
        text = resources.files("qemcmc.data").joinpath(name).read_text()
    except FileNotFoundError:
        raise IsingError(f"no bundled instance with n={n}") from None
    return IsingInstance.from_dict(json.loads(text))
