"""Symmetry tests, bootstrap intervals, scaling fits and cache subsampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cache_io import TransitionCounts
from .chains import Trajectory, acceptance_function, accept_move
from .ising import IsingInstance, _rng

BOOTSTRAP_RESAMPLES = 200
BOOTSTRAP_LEVEL = 0.99
SIGNIFICANCE = 0.01


class StatsError(ValueError):
    """Invalid input to a statistical routine."""


# ---------------------------------------------------------------------------
# Chi-squared tail


def _gamma_series(a: float, x: float) -> float:
    """Regularized lower incomplete gamma ``P(a, x)`` by its power series."""
    term = total = 1.0 / a
    ap = a
    for _ in range(100_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf(a: float, x: float) -> float:
    """Regularized upper incomplete gamma ``Q(a, x)`` by modified Lentz continued fraction."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 100_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def _chi2_sf_scalar(x: float, dof: float) -> float:
    if x < 0 or dof <= 0 or math.isnan(x):
        raise StatsError(f"chi2_sf needs x >= 0 and dof > 0, got x={x}, dof={dof}")
    a, y = 0.5 * dof, 0.5 * x
    if y == 0:  # also catches subnormal x, where x/2 underflows
        return 1.0
    if y < a + 1.0:
        return min(1.0, max(0.0, 1.0 - _gamma_series(a, y)))
    return min(1.0, max(0.0, _gamma_cf(a, y)))


def chi2_sf(x, dof):
    """Survival function of the chi-squared distribution, ``Q(dof/2, x/2)``.

    Power series below ``x/2 < dof/2 + 1``, continued fraction above.
    """
    if np.ndim(x) == 0 and np.ndim(dof) == 0:
        return _chi2_sf_scalar(float(x), float(dof))
    xb, db = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(dof, dtype=float))
    return np.array([_chi2_sf_scalar(a, b) for a, b in zip(xb.ravel(), db.ravel())]).reshape(xb.shape)


# ---------------------------------------------------------------------------
# Bowker symmetry test


@dataclass(frozen=True)
class BowkerReport:
    chi2: float
    dof: int
    p_value: float
    n_empty_pairs: int
    variant: str

    def to_dict(self) -> dict:
        return {"chi2": self.chi2, "dof": self.dof, "p": self.p_value,
                "variant": self.variant, "n_empty": self.n_empty_pairs}


def bowker(count_matrix: np.ndarray, variant: str = "traditional") -> BowkerReport:
    """Test ``m_jk`` for symmetry: ``chi2 = sum_{j>k} (m_jk - m_kj)^2 / (m_jk + m_kj)``.

    Pairs with ``m_jk + m_kj = 0`` contribute nothing; the ``modified`` variant
    also removes them from the degrees of freedom.
    """
    m = np.asarray(count_matrix)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise StatsError(f"count matrix must be square, got shape {m.shape}")
    if variant not in ("traditional", "modified"):
        raise StatsError(f"unknown Bowker variant {variant!r}")
    if np.any(m < 0):
        raise StatsError("counts must be nonnegative")
    d = m.shape[0]
    lo = np.tril_indices(d, -1)
    a = m[lo].astype(float)
    b = m.T[lo].astype(float)
    s = a + b
    empty = s == 0
    chi2 = float(np.sum((a - b)[~empty] ** 2 / s[~empty]))
    n_empty = int(empty.sum())
    dof = d * (d - 1) // 2 - (n_empty if variant == "modified" else 0)
    p = 1.0 if dof == 0 else chi2_sf(chi2, dof)
    return BowkerReport(chi2, dof, float(p), n_empty, variant)


# ---------------------------------------------------------------------------
# Bootstrap, TV distance, fits


def bootstrap_basic(data, statistic: Callable, n_resamples: int = BOOTSTRAP_RESAMPLES,
                    level: float = BOOTSTRAP_LEVEL, rng=None) -> tuple[float, float, float]:
    """Basic (reverse-percentile) bootstrap: ``[2t - q_hi, 2t - q_lo]``.

    ``data`` is resampled with replacement along its first axis; quantiles use
    linear interpolation between order statistics.
    """
    data = np.asarray(data)
    if data.shape[0] == 0:
        raise StatsError("bootstrap needs nonempty data")
    if not 0 < level < 1:
        raise StatsError("level must lie in (0, 1)")
    gen = _rng(rng)
    point = float(statistic(data))
    N = data.shape[0]
    reps = np.array([statistic(data[gen.integers(N, size=N)]) for _ in range(n_resamples)], dtype=float)
    q_lo, q_hi = np.quantile(reps, [(1 - level) / 2, (1 + level) / 2])
    return point, 2 * point - q_hi, 2 * point - q_lo


def tv_error(Q_a: np.ndarray, Q_b: np.ndarray) -> float:
    """Mean total-variation distance between matching columns."""
    Q_a, Q_b = np.asarray(Q_a, dtype=float), np.asarray(Q_b, dtype=float)
    if Q_a.shape != Q_b.shape:
        raise StatsError(f"shape mismatch {Q_a.shape} vs {Q_b.shape}")
    return float(0.5 * np.abs(Q_a - Q_b).sum() / Q_a.shape[1])


@dataclass(frozen=True)
class FitResult:
    """``delta = prefactor * 2^{-k n}`` fitted on the means."""

    k: float
    k_sigma: float
    prefactor: float
    prefactor_sigma: float
    residuals: np.ndarray = field(repr=False)
    reduced_chi2: float


def fit_exponential(ns, means, sems, max_iter: int = 200) -> FitResult:
    """Weighted least squares for ``a 2^{-k n}`` with weights ``1/sem^2``.

    Gauss-Newton from a log-space linear seed. The covariance is
    ``(J^T W J)^{-1}`` scaled by the reduced chi-squared (relative weights).
    """
    ns, y, s = (np.asarray(v, dtype=float) for v in (ns, means, sems))
    if len(ns) < 3 or not len(ns) == len(y) == len(s):
        raise StatsError("need at least three matching points")
    if np.any(s <= 0):
        raise StatsError("standard errors must be positive")
    if np.ptp(ns) == 0:
        raise StatsError("degenerate design: all n are equal")
    if np.any(y <= 0):
        raise StatsError("means must be positive")
    w = 1.0 / s**2
    ln2 = math.log(2.0)
    # Seed: log2 y = log2 a - k n, weighted by (y/s)^2 from the delta method.
    wl = (y / s) ** 2
    A = np.column_stack([np.ones_like(ns), -ns])
    coef = np.linalg.lstsq(A * np.sqrt(wl)[:, None], np.log2(y) * np.sqrt(wl), rcond=None)[0]
    a, k = 2.0 ** coef[0], coef[1]
    for _ in range(max_iter):
        f = a * 2.0 ** (-k * ns)
        Jm = np.column_stack([f / a, -ln2 * ns * f])
        r = y - f
        H = Jm.T @ (w[:, None] * Jm)
        step = np.linalg.solve(H, Jm.T @ (w * r))
        a, k = a + step[0], k + step[1]
        if abs(step[0]) <= 1e-14 * abs(a) and abs(step[1]) <= 1e-14 * max(abs(k), 1.0):
            break
    f = a * 2.0 ** (-k * ns)
    Jm = np.column_stack([f / a, -ln2 * ns * f])
    r = y - f
    dof = len(ns) - 2
    red = float(np.sum(w * r**2) / dof) if dof > 0 else 0.0
    cov = np.linalg.inv(Jm.T @ (w[:, None] * Jm)) * (red if dof > 0 else 1.0)
    return FitResult(float(k), float(np.sqrt(max(cov[1, 1], 0.0))), float(a),
                     float(np.sqrt(max(cov[0, 0], 0.0))), r, red)


# ---------------------------------------------------------------------------
# Subsampling the transition cache


class TransitionCache:
    """Per-``(circuit, initial state)`` lists of recorded final states, drawn without replacement.

    Each list is shuffled once up front, so popping from the end is a uniform
    draw without replacement. State is shared across every draw made on the
    same cache.
    """

    def __init__(self, counts: TransitionCounts, rng=None):
        gen = _rng(rng)
        self.n = counts.n
        self.n_circuits = counts.n_circuits
        d = 2**counts.n
        group = counts.l * d + counts.k
        finals = np.repeat(counts.j, counts.count)
        groups = np.repeat(group, counts.count)
        order = np.lexsort((gen.random(len(finals)), groups))
        self.finals = finals[order]
        starts = np.searchsorted(groups[order], np.arange(self.n_circuits * d))
        ends = np.searchsorted(groups[order], np.arange(self.n_circuits * d), side="right")
        self.start = starts
        self.remaining = ends - starts

    def pop(self, circuit: int, initial: int) -> int | None:
        g = circuit * 2**self.n + initial
        left = self.remaining[g]
        if left == 0:
            return None
        self.remaining[g] = left - 1
        return int(self.finals[self.start[g] + left - 1])

    @property
    def size(self) -> int:
        return int(self.remaining.sum())


def iid_subsample(counts: TransitionCounts | TransitionCache, rng=None) -> np.ndarray:
    """Count matrix ``M[j, k]`` of i.i.d. draws from the cache.

    Draw ``(l, k)`` uniformly, pop a recorded final state ``j`` from that list
    without replacement, and stop at the first empty list.
    """
    gen = _rng(rng)
    cache = counts if isinstance(counts, TransitionCache) else TransitionCache(counts, gen)
    d = 2**cache.n
    M = np.zeros((d, d), dtype=np.int64)
    while True:
        ls = gen.integers(cache.n_circuits, size=4096)
        ks = gen.integers(d, size=4096)
        for l, k in zip(ls, ks):
            j = cache.pop(int(l), int(k))
            if j is None:
                return M
            M[j, k] += 1


def markov_chain_subsample(counts: TransitionCounts | TransitionCache, instance: IsingInstance, T: float,
                           acceptance_rule: str = "mh", rng=None, initial: int | None = None,
                           max_iterations: int | None = None) -> Trajectory:
    """Run the chain offline on cached quantum transitions.

    Each iteration draws a circuit uniformly (with replacement) and pops a
    proposal from that circuit's list for the current state; the chain ends
    at the first empty list. Pass a :class:`TransitionCache` to make several
    trajectories share (and deplete) one cache.
    """
    acceptance_function(acceptance_rule)
    if not T > 0:
        raise StatsError(f"temperature must be positive, got {T}")
    gen = _rng(rng)
    cache = counts if isinstance(counts, TransitionCache) else TransitionCache(counts, gen)
    if cache.size == 0:
        raise StatsError("transition cache is empty")
    E = instance.energies
    s = int(gen.integers(2**cache.n)) if initial is None else int(initial)
    codes, accepted = [s], []
    limit = cache.size if max_iterations is None else max_iterations
    while len(accepted) < limit:
        prop = cache.pop(int(gen.integers(cache.n_circuits)), s)
        if prop is None:
            break
        ok = accept_move(E, T, s, prop, acceptance_rule, gen.random())
        accepted.append(ok and prop != s)
        if ok:
            s = prop
        codes.append(s)
    return Trajectory(cache.n, np.array(codes, dtype=np.int64), np.array(accepted, dtype=bool), E)
