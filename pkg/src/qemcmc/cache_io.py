"""Transition-count storage and file formats.

Counts file (little-endian): magic ``b"QEMC"``, ``u16`` version (1), ``u8`` n,
``u32`` n_circuits, ``u64`` n_records, then ``n_records`` records of
``(u32 j, u32 k, u32 l, u64 count)``. ``j`` is the final state, ``k`` the
initial state and ``l`` the circuit index.

Matrices are CSV, row-major, preceded by ``#`` comment lines carrying ``n``
and any provenance fields.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ising import IsingInstance

MAGIC = b"QEMC"
VERSION = 1
_HEADER = struct.Struct("<4sHBIQ")
_RECORD = np.dtype([("j", "<u4"), ("k", "<u4"), ("l", "<u4"), ("count", "<u8")])


class CacheFormatError(ValueError):
    """Malformed, truncated or incompatible file, or out-of-range indices."""


@dataclass(frozen=True)
class TransitionCounts:
    """Sparse ``C[j, k, l]``: observed ``|k> -> |j>`` transitions of circuit ``l``.

    Records are unique, sorted by ``(l, k, j)`` and every count is positive.
    """

    n: int
    n_circuits: int
    j: np.ndarray = field(repr=False)
    k: np.ndarray = field(repr=False)
    l: np.ndarray = field(repr=False)
    count: np.ndarray = field(repr=False)

    @classmethod
    def empty(cls, n: int, n_circuits: int) -> "TransitionCounts":
        z = np.zeros(0, dtype=np.int64)
        return cls(n, n_circuits, z, z, z, z)

    @classmethod
    def from_arrays(cls, n: int, n_circuits: int, j, k, l, count=None) -> "TransitionCounts":
        """Aggregate (possibly repeated) transitions into canonical sparse form."""
        j, k, l = (np.asarray(a, dtype=np.int64).ravel() for a in (j, k, l))
        count = np.ones_like(j) if count is None else np.asarray(count, dtype=np.int64).ravel()
        if not len(j) == len(k) == len(l) == len(count):
            raise CacheFormatError("index arrays must have equal length")
        d = 2**n
        if len(j) and (j.min() < 0 or k.min() < 0 or l.min() < 0
                       or j.max() >= d or k.max() >= d or l.max() >= n_circuits):
            raise CacheFormatError("transition index out of range")
        if np.any(count < 0):
            raise CacheFormatError("counts must be nonnegative")
        key = (l * d + k) * d + j
        uniq, inv = np.unique(key, return_inverse=True)
        tot = np.bincount(inv, weights=count, minlength=len(uniq)).astype(np.int64) if len(key) else count
        keep = tot > 0
        uniq, tot = uniq[keep], tot[keep]
        return cls(n, n_circuits, uniq % d, (uniq // d) % d, uniq // (d * d), tot)

    @classmethod
    def from_dense(cls, C: np.ndarray) -> "TransitionCounts":
        C = np.asarray(C)
        n = int(round(np.log2(C.shape[0])))
        j, k, l = np.nonzero(C)
        return cls.from_arrays(n, C.shape[2], j, k, l, C[j, k, l])

    @property
    def total(self) -> int:
        return int(self.count.sum())

    @property
    def n_records(self) -> int:
        return len(self.count)

    def dense(self) -> np.ndarray:
        d = 2**self.n
        C = np.zeros((d, d, self.n_circuits), dtype=np.int64)
        C[self.j, self.k, self.l] = self.count
        return C

    def count_matrix(self) -> np.ndarray:
        """``m[j, k] = sum_l C[j, k, l]``."""
        d = 2**self.n
        return np.bincount(self.j * d + self.k, weights=self.count, minlength=d * d).reshape(d, d).astype(np.int64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TransitionCounts):
            return NotImplemented
        return (self.n == other.n and self.n_circuits == other.n_circuits
                and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in "jkl")
                and np.array_equal(self.count, other.count))

    __hash__ = None


def record_and_merge(counts: TransitionCounts, transitions) -> TransitionCounts:
    """Add transitions to ``counts``.

    ``transitions`` is another :class:`TransitionCounts` or a tuple
    ``(j, k, l)`` / ``(j, k, l, count)`` of arrays. Merging is associative and
    commutative.
    """
    if isinstance(transitions, TransitionCounts):
        if (transitions.n, transitions.n_circuits) != (counts.n, counts.n_circuits):
            raise CacheFormatError("cannot merge counts with different n or circuit count")
        extra = (transitions.j, transitions.k, transitions.l, transitions.count)
    else:
        extra = tuple(transitions)
        if len(extra) == 3:
            extra = extra + (np.ones(len(np.atleast_1d(extra[0])), dtype=np.int64),)
    j = np.concatenate([counts.j, np.asarray(extra[0], dtype=np.int64).ravel()])
    k = np.concatenate([counts.k, np.asarray(extra[1], dtype=np.int64).ravel()])
    l = np.concatenate([counts.l, np.asarray(extra[2], dtype=np.int64).ravel()])
    c = np.concatenate([counts.count, np.asarray(extra[3], dtype=np.int64).ravel()])
    return TransitionCounts.from_arrays(counts.n, counts.n_circuits, j, k, l, c)


@dataclass(frozen=True)
class QEstimate:
    """``Q-hat(j|k) = sum_l C[j,k,l] / sum_{j,l} C[j,k,l]``; unobserved columns are zero."""

    matrix: np.ndarray = field(repr=False)
    totals: np.ndarray = field(repr=False)

    @property
    def unobserved(self) -> np.ndarray:
        return np.nonzero(self.totals == 0)[0]


def estimate_q(counts: TransitionCounts) -> QEstimate:
    m = counts.count_matrix().astype(float)
    tot = m.sum(axis=0)
    Q = np.divide(m, tot[None, :], out=np.zeros_like(m), where=tot[None, :] > 0)
    return QEstimate(Q, tot.astype(np.int64))


# ---------------------------------------------------------------------------
# Files


def save_counts(path, counts: TransitionCounts) -> None:
    rec = np.empty(counts.n_records, dtype=_RECORD)
    rec["j"], rec["k"], rec["l"], rec["count"] = counts.j, counts.k, counts.l, counts.count
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, counts.n, counts.n_circuits, counts.n_records))
        fh.write(rec.tobytes())


def load_counts(path) -> TransitionCounts:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CacheFormatError("file is truncated (no header)")
    magic, version, n, n_circuits, n_records = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CacheFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CacheFormatError(f"unsupported counts version {version} (expected {VERSION})")
    body = data[_HEADER.size:]
    if len(body) != n_records * _RECORD.itemsize:
        raise CacheFormatError(f"expected {n_records} records, file holds {len(body) / _RECORD.itemsize:g}")
    rec = np.frombuffer(body, dtype=_RECORD)
    return TransitionCounts.from_arrays(n, n_circuits, rec["j"], rec["k"], rec["l"], rec["count"])


def save_instance(path, instance: IsingInstance) -> None:
    Path(path).write_text(json.dumps(instance.to_dict(), indent=2) + "\n")


def load_instance(path) -> IsingInstance:
    try:
        return IsingInstance.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise CacheFormatError(f"{path}: invalid JSON ({exc})") from None


def save_matrix(path, matrix: np.ndarray, header: dict | None = None) -> None:
    matrix = np.asarray(matrix, dtype=float)
    n = int(round(np.log2(matrix.shape[0])))
    lines = [f"# n: {n}"] + [f"# {k}: {v}" for k, v in (header or {}).items()]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        np.savetxt(fh, matrix, delimiter=",", fmt="%.17g")


def load_matrix(path) -> np.ndarray:
    M = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    if M.shape[0] != M.shape[1]:
        raise CacheFormatError(f"{path}: matrix is not square")
    return M
