"""Pointwise extremal operators on symmetric matrices.

Everything here acts on a single (small, dense) symmetric matrix or on a
stack of eigenvalues. The grid solvers reuse :func:`pucci_from_eigenvalues`
so that the discrete operators agree with the pointwise definitions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonSymmetricError, SingularPointError

SYM_RTOL = 1e-12
EIG_RTOL = 1e-12


@dataclass(frozen=True)
class EllipticityPair:
    """Ellipticity constants ``0 < lam <= Lam``."""

    lam: float
    Lam: float

    def __post_init__(self):
        if not (np.isfinite(self.lam) and np.isfinite(self.Lam)):
            raise ConfigError("ellipticity constants must be finite")
        if not 0 < self.lam <= self.Lam:
            raise ConfigError(f"need 0 < lambda <= Lambda, got ({self.lam}, {self.Lam})")

    def dim_plus(self, N):
        """``(lam/Lam)(N-1) + 1``, never larger than N."""
        return self.lam / self.Lam * (N - 1) + 1.0

    def dim_minus(self, N):
        """``(Lam/lam)(N-1) + 1``, never smaller than N."""
        return self.Lam / self.lam * (N - 1) + 1.0


def sobolev_exponent(dim):
    """Critical exponent ``(d+2)/(d-2)``; infinite when ``d <= 2``."""
    if dim <= 2:
        return np.inf
    return (dim + 2.0) / (dim - 2.0)


def _as_symmetric(M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ConfigError(f"expected a square matrix, got shape {M.shape}")
    scale = max(1.0, np.max(np.abs(M)))
    if np.max(np.abs(M - M.T)) > SYM_RTOL * scale:
        raise NonSymmetricError("matrix is not symmetric")
    return 0.5 * (M + M.T)


def eigenvalues(M):
    """Eigenvalues of a symmetric matrix, with near-zero ones snapped to 0."""
    M = _as_symmetric(M)
    e = np.linalg.eigvalsh(M)
    norm = np.linalg.norm(M, 2) if M.size else 0.0
    e[np.abs(e) < EIG_RTOL * norm] = 0.0
    return e


def pucci_from_eigenvalues(eigs, e: EllipticityPair, plus=True, axis=-1):
    """Apply M+ (or M-) to a stack of eigenvalue vectors along ``axis``."""
    eigs = np.asarray(eigs, dtype=float)
    pos = np.where(eigs > 0, eigs, 0.0).sum(axis=axis)
    neg = np.where(eigs < 0, eigs, 0.0).sum(axis=axis)
    if plus:
        return e.Lam * pos + e.lam * neg
    return e.lam * pos + e.Lam * neg


def pucci_plus(M, e: EllipticityPair) -> float:
    """Lam * (sum of positive eigenvalues) + lam * (sum of negative ones)."""
    return float(pucci_from_eigenvalues(eigenvalues(M), e, plus=True))


def pucci_minus(M, e: EllipticityPair) -> float:
    return float(pucci_from_eigenvalues(eigenvalues(M), e, plus=False))


def cutoff(r):
    """C^1 cut-off: 0 below 1/2, 1 from 1 on, cubic Hermite blend between."""
    r = np.asarray(r, dtype=float)
    t = np.clip(2.0 * r - 1.0, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def q0_matrix(x, n_cutoff=None):
    """Coefficients ``x_i x_j / |x|^2`` of the pure radial second derivative.

    With ``n_cutoff = n`` the matrix is multiplied by ``cutoff(n |x|)``, which
    gives the smooth approximating coefficients; the result is then defined
    (and zero) at the origin.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    r2 = float(x @ x)
    if r2 == 0.0:
        if n_cutoff is None:
            raise SingularPointError("x x^T/|x|^2 is undefined at the origin")
        return np.zeros((x.size, x.size))
    A = np.outer(x, x) / r2
    if n_cutoff is not None:
        A = A * float(cutoff(n_cutoff * np.sqrt(r2)))
    return A


def q_plus_apply(H, x, e: EllipticityPair) -> float:
    """``lam tr(H) + (Lam - lam) x^T H x / |x|^2``."""
    H = _as_symmetric(H)
    return float(e.lam * np.trace(H) + (e.Lam - e.lam) * np.sum(q0_matrix(x) * H))


def q_minus_apply(H, x, e: EllipticityPair) -> float:
    H = _as_symmetric(H)
    return float(e.Lam * np.trace(H) + (e.lam - e.Lam) * np.sum(q0_matrix(x) * H))


def qn_apply(H, x, e: EllipticityPair, n):
    """Approximating operator with smooth coefficients (cut-off index ``n``).

    The double sum runs over the space dimension ``N = len(x)``.
    """
    H = _as_symmetric(H)
    return float(e.lam * np.trace(H) + (e.Lam - e.lam) * np.sum(q0_matrix(x, n) * H))
