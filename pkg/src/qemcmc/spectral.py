"""Absolute spectral gaps of reversible chains.

Dense path: the similarity transform ``L = D^{-1/2} P D^{1/2}`` with
``D = diag(p)`` is symmetric under detailed balance, so ``eigvalsh`` applies.
It is formed in the log domain because at low temperature ``p`` spans
hundreds of orders of magnitude.

Matrix-free path: deflate the stationary direction and find the dominant
``|lambda|`` of the symmetrized operator by power iteration or Lanczos.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from .chains import TransitionMatrix
from .ising import _rng

STATIONARY_TOLERANCE = 1e-8
BALANCE_TOLERANCE = 1e-6


class SpectralError(ValueError):
    """Chain cannot be certified reversible or has an invalid stationary vector."""


@dataclass(frozen=True)
class GapResult:
    delta: float
    lambda2_abs: float
    method: str
    asymmetry: float = 0.0
    iterations: int = 0
    converged: bool = True


@dataclass(frozen=True)
class DominantEigenvalue:
    value: float
    iterations: int
    converged: bool


def detailed_balance_check(P: np.ndarray, p: np.ndarray) -> float:
    """``max_{jk} |P_jk p_k - P_kj p_j|``."""
    P = np.asarray(P, dtype=float)
    p = np.asarray(p, dtype=float)
    if P.shape != (len(p), len(p)):
        raise SpectralError(f"shape mismatch: P {P.shape}, p {p.shape}")
    F = P * p[None, :]
    return float(np.max(np.abs(F - F.T)))


def symmetrized(P: np.ndarray, log_p: np.ndarray) -> np.ndarray:
    """``L_jk = P_jk sqrt(p_k / p_j)`` computed as ``exp(log P_jk + (log p_k - log p_j)/2)``."""
    with np.errstate(divide="ignore"):
        logP = np.log(P)
    return np.exp(logP + 0.5 * (log_p[None, :] - log_p[:, None]))


def _unpack(P, stationary_p, log_p):
    if isinstance(P, TransitionMatrix):
        stationary_p = P.stationary if stationary_p is None else stationary_p
        log_p = P.log_stationary if log_p is None else log_p
        P = P.matrix
    P = np.asarray(P, dtype=float)
    if log_p is None:
        if stationary_p is None:
            raise SpectralError("a stationary distribution is required")
        p = np.asarray(stationary_p, dtype=float)
        if np.any(p <= 0):
            raise SpectralError("stationary distribution must be strictly positive")
        log_p = np.log(p)
    log_p = np.asarray(log_p, dtype=float)
    if not np.all(np.isfinite(log_p)):
        raise SpectralError("stationary distribution must be strictly positive")
    p = np.exp(log_p) if stationary_p is None else np.asarray(stationary_p, dtype=float)
    return P, p, log_p


def absolute_spectral_gap(P, stationary_p: np.ndarray | None = None, log_p: np.ndarray | None = None) -> GapResult:
    """``delta = 1 - max_{lambda != 1} |lambda|`` through the symmetric similarity.

    ``P`` may be a :class:`~qemcmc.chains.TransitionMatrix`, which carries its
    own stationary distribution. Pass ``log_p`` to avoid underflow at low T.
    """
    P, p, log_p = _unpack(P, stationary_p, log_p)
    d = P.shape[0]
    if P.shape != (d, d) or len(log_p) != d:
        raise SpectralError("P must be square and match the stationary vector")
    if np.max(np.abs(P @ p - p)) > STATIONARY_TOLERANCE:
        raise SpectralError("stationary vector is not fixed by P")
    violation = detailed_balance_check(P, p)
    if violation > BALANCE_TOLERANCE:
        raise SpectralError(f"detailed balance violated by {violation:.2e}")
    L = symmetrized(P, log_p)
    asym = float(np.max(np.abs(L - L.T)))
    if asym > 1e-8:
        raise SpectralError(f"symmetrized matrix is not symmetric ({asym:.2e})")
    lam = np.linalg.eigvalsh(0.5 * (L + L.T))
    return _gap_from_spectrum(lam, "dense-symmetric", violation)


def _gap_from_spectrum(lam: np.ndarray, method: str, asymmetry: float) -> GapResult:
    if len(lam) == 1:
        return GapResult(1.0, 0.0, method, asymmetry)
    lam = np.asarray(lam)
    top = int(np.argmin(np.abs(lam - 1.0)))
    rest = np.abs(np.delete(lam, top))
    lam2 = float(min(rest.max(), 1.0))
    return GapResult(1.0 - lam2, lam2, method, asymmetry)


def estimated_gap(P_hat: np.ndarray) -> GapResult:
    """Gap of a sampled, not exactly reversible ``P-hat`` from its general spectrum.

    Removes the eigenvalue closest to 1 and takes the largest remaining modulus.
    """
    lam = np.linalg.eigvals(np.asarray(P_hat, dtype=float))
    return _gap_from_spectrum(lam, "dense-general", 0.0)


def deflated_action(P_action: Callable[[np.ndarray], np.ndarray], stationary_p: np.ndarray):
    """``x -> P x - p sum(x)``: the stationary eigenvalue 1 is sent to 0."""
    p = np.asarray(stationary_p, dtype=float)

    def action(x: np.ndarray) -> np.ndarray:
        return P_action(x) - p * np.sum(x)

    return action


def symmetric_deflated_action(P_action: Callable[[np.ndarray], np.ndarray], stationary_p: np.ndarray):
    """Deflated operator in the symmetric frame: ``D^{-1/2} (P - p 1^T) D^{1/2}``."""
    p = np.asarray(stationary_p, dtype=float)
    r = np.sqrt(p)
    inner = deflated_action(P_action, p)

    def action(x: np.ndarray) -> np.ndarray:
        return inner(r * x) / r

    return action


def dominant_abs_eigenvalue(symmetric_operator: Callable[[np.ndarray], np.ndarray], dim: int,
                            tolerance: float = 1e-8, max_iters: int = 100_000, rng=None,
                            method: str = "power", check_every: int = 10) -> DominantEigenvalue:
    """Largest ``|lambda|`` of a symmetric operator.

    ``power`` iterates on the operator squared so that ``+-lambda`` pairs do
    not stall it. Every ``check_every`` iterations the Rayleigh quotient ``mu``
    of the squared operator is compared with the previous check; a relative
    change below ``tolerance`` counts as converged. ``mu`` never exceeds the
    true ``lambda^2``, so the estimate is a lower bound. ``lanczos`` uses ARPACK.
    """
    if dim < 1:
        raise SpectralError("dimension must be positive")
    gen = _rng(rng)
    x = gen.standard_normal(dim)
    x /= np.linalg.norm(x)
    if method == "lanczos":
        op = LinearOperator((dim, dim), matvec=symmetric_operator, dtype=float)
        if dim <= 2:
            M = np.column_stack([symmetric_operator(e) for e in np.eye(dim)])
            return DominantEigenvalue(float(np.abs(np.linalg.eigvalsh(0.5 * (M + M.T))).max()), dim, True)
        try:
            vals = eigsh(op, k=1, which="LM", v0=x, tol=tolerance, maxiter=max_iters, return_eigenvectors=False)
            return DominantEigenvalue(float(abs(vals[0])), 0, True)
        except ArpackNoConvergence as exc:
            vals = exc.eigenvalues
            value = float(abs(vals[0])) if len(vals) else float("nan")
            return DominantEigenvalue(value, max_iters, False)
    if method != "power":
        raise SpectralError(f"unknown method {method!r}")
    mu, last = 0.0, -1.0
    for it in range(1, max_iters + 1):
        y = symmetric_operator(x)
        z = symmetric_operator(y)
        mu = float(x @ z)
        nz = np.linalg.norm(z)
        if nz == 0.0 or mu == 0.0:
            return DominantEigenvalue(0.0, it, True)
        x = z / nz
        if it % check_every == 0:
            if abs(mu - last) <= tolerance * mu:
                return DominantEigenvalue(float(np.sqrt(mu)), it, True)
            last = mu
    return DominantEigenvalue(float(np.sqrt(max(mu, 0.0))), max_iters, False)


def matrix_free_gap(P_action: Callable[[np.ndarray], np.ndarray], stationary_p: np.ndarray,
                    method: str = "lanczos", tolerance: float = 1e-10, max_iters: int = 100_000,
                    rng=None) -> GapResult:
    op = symmetric_deflated_action(P_action, stationary_p)
    dom = dominant_abs_eigenvalue(op, len(stationary_p), tolerance, max_iters, rng, method)
    lam2 = min(dom.value, 1.0)
    tag = "power-deflated" if method == "power" else "lanczos-deflated"
    return GapResult(1.0 - lam2, lam2, tag, 0.0, dom.iterations, dom.converged)



def ritz_gap_bound(P_action: Callable[[np.ndarray], np.ndarray], stationary_p: np.ndarray,
                   krylov_dim: int = 60, rng=None) -> GapResult:
    """Rigorous upper bound on ``delta`` from a fixed-size Krylov subspace.

    Builds an orthonormal Krylov basis ``B`` of the deflated symmetric
    operator ``A`` and diagonalizes ``B A B^T``. Its eigenvalues are Rayleigh
    quotients of ``A``, so the largest magnitude ``theta`` satisfies
    ``theta <= |lambda_2|`` and ``1 - theta >= delta``. Useful when the
    spectrum near 1 is too clustered for ARPACK to converge.
    """
    p = np.asarray(stationary_p, dtype=float)
    dim = len(p)
    if krylov_dim < 1:
        raise SpectralError("krylov_dim must be positive")
    op = symmetric_deflated_action(P_action, p)
    r = np.sqrt(p)
    q = _rng(rng).standard_normal(dim)
    basis, images = [], []
    for _ in range(min(krylov_dim, dim - 1)):
        for _ in range(2):
            q = q - r * (r @ q)
            if basis:
                B = np.array(basis)
                q = q - B.T @ (B @ q)
        norm = np.linalg.norm(q)
        if norm < 1e-12:
            break
        basis.append(q / norm)
        images.append(op(basis[-1]))
        q = images[-1].copy()
    B, AB = np.array(basis), np.array(images)
    H = B @ AB.T
    theta = float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (H + H.T)))))
    lam2 = min(theta, 1.0)
    return GapResult(1.0 - lam2, lam2, "ritz-bound", 0.0, len(basis), False)
