"""Kernel checks for the equation linearized around the radial solution.

The base solution ``v`` solves ``v'' + (d-1)/r v' + v^p = 0``, ``v(1) = 0``
with ``d = N+`` (the Q+ problem after the amplitude scaling
``v = Lam^(1/(1-p)) u``, which turns ``(p/Lam) u^(p-1)`` into ``p v^(p-1)``).

* radial mode: ``h'' + (d-1)/r h' + p v^(p-1) h = 0``, ``h'(0) = 0``;
* spherical-harmonic modes ``k >= 1``:
  ``a'' + (d-1)/r a' + (lam lam_k / Lam) a / r^2 + p v^(p-1) a = 0``
  with ``lam_k = -k(k+N-2)`` and ``a(0) = 0``.

Both are solved as regular initial value problems from the origin, so the
kernel is trivial exactly when the solution does not vanish at ``r = 1``.
For the modes we factor out the Frobenius power, ``a = r^sigma b``, which
turns the singular ``1/r^2`` term into a shifted dimension for ``b``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ConfigError, InvalidBaseError, PucciLabError
from .operators import EllipticityPair
from .radial import R_START, RadialProblem, RadialProfile, profile_residual

log = logging.getLogger(__name__)

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


def sphere_eigenvalue(k, N):
    """Eigenvalue ``-k(k+N-2)`` of the Laplacian on the unit sphere in R^N."""
    if k < 0 or N < 2:
        raise ConfigError("need k >= 0 and N >= 2")
    return -float(k * (k + N - 2))


def indicial_exponent(dim, coef):
    """Positive root of ``sigma(sigma-1) + (dim-1) sigma + coef = 0``."""
    disc = (dim - 2.0) ** 2 - 4.0 * coef
    if disc < 0:
        raise PucciLabError("indicial equation has complex roots")
    sigma = 0.5 * (-(dim - 2.0) + math.sqrt(disc))
    if not sigma > 0:
        raise PucciLabError(f"indicial equation has no positive root (coef={coef})")
    return sigma


def _weight(profile, p, mu=1.0):
    def W(r):
        return mu * p * np.maximum(profile(r), 0.0) ** (p - 1.0)
    return W


def _regular_solution(W, dim, r_end=1.0, tol=1e-11):
    """Solve ``y'' + (dim-1)/r y' + W(r) y = 0``, ``y(0) = 1``, ``y'(0) = 0``."""
    w0 = float(W(0.0))

    def f(r, y):
        return [y[1], -(dim - 1.0) * y[1] / r - float(W(r)) * y[0]]

    y0 = [1.0 - 0.5 * w0 * R_START**2 / dim, -w0 * R_START / dim]
    sol = solve_ivp(f, (R_START, r_end), y0, method="RK45", rtol=tol, atol=tol * 1e-2,
                    dense_output=True)
    if sol.status != 0:
        raise PucciLabError(f"linearized integration failed: {sol.message}")
    return sol


def _check_base(profile, dim, p, limit=1e-8):
    if abs(profile.radii[-1] - 1.0) > 1e-14 or abs(profile.values[-1]) > 1e-12:
        raise InvalidBaseError("base profile must vanish at r = 1")
    res = profile_residual(profile, RadialProblem.dimlike(dim, p))
    if res > limit:
        raise InvalidBaseError(f"base residual {res:.3e} exceeds {limit:.1e}")
    return res


@dataclass
class RadialReport:
    h_at_1: float
    max_abs: float
    nondegenerate: bool
    sol: object = field(default=None, repr=False)


def radial_nondegeneracy(v: RadialProfile, dim, p, tol=1e-6, mu=1.0, check_base=True):
    """Integrate the radial linearization from ``h(0) = 1`` and test ``h(1) != 0``.

    ``mu`` scales the potential ``p v^(p-1)``; values other than 1 are only
    used to show that the test does detect degenerate cases.
    """
    if check_base:
        _check_base(v, dim, p)
    sol = _regular_solution(_weight(v, p, mu), dim)
    r = np.linspace(R_START, 1.0, 2001)
    h = sol.sol(r)[0]
    h1 = float(sol.y[0, -1])
    max_abs = float(np.max(np.abs(h)))
    return RadialReport(h1, max_abs, abs(h1) > tol * max_abs, sol)


def scaling_mode(v: RadialProfile, dim, p, r):
    """``h1 = v + (p-1)/2 r v'`` and its derivative at radii ``r``.

    ``h1`` is the derivative of the scaling family ``g v(g^((p-1)/2) r)``
    at ``g = 1``; ``v''`` is taken from the base equation.
    """
    c = 0.5 * (p - 1.0)
    r = np.asarray(r, dtype=float)
    vv, dv = v.dense(r)
    d2 = RadialProblem.dimlike(dim, p).rhs(np.maximum(r, R_START), vv, dv)
    return vv + c * r * dv, (1 + c) * dv + c * r * d2


def scaling_mode_residual(v: RadialProfile, dim, p, ncell=50, nsub=8):
    """Relative integrated residual of ``h1`` in the radial linearization.

    Uses the first-order form ``(h1, h1')`` with ``h1' = (1+c) v' + c r v''``
    and ``v''`` from the base equation.
    """
    def rhs(r):
        h, dh = scaling_mode(v, dim, p, r)
        vv, _ = v.dense(r)
        return -(dim - 1.0) * dh / r - p * np.maximum(vv, 0.0) ** (p - 1) * h

    return _integrated_defect(lambda r: scaling_mode(v, dim, p, r)[1], rhs, ncell, nsub)


def _integrated_defect(y, dy, ncell, nsub, r_lo=0.0, r_hi=1.0):
    """``max |y(b) - y(a) - int_a^b dy| / (b - a)`` over cells, relative to sup|dy|."""
    r = np.linspace(r_lo, r_hi, ncell + 1)
    r[0] = max(r[0], R_START)
    edges = np.linspace(r[0], r_hi, ncell * nsub + 1)
    A, B = edges[:-1], edges[1:]
    half = 0.5 * (B - A)
    nodes = (0.5 * (A + B))[:, None] + half[:, None] * _GL_X[None, :]
    f = dy(nodes.ravel()).reshape(nodes.shape)
    integral = (half * (f @ _GL_W)).reshape(ncell, nsub).sum(axis=1)
    scale = max(1.0, float(np.max(np.abs(f))))
    return float(np.max(np.abs(np.diff(y(r)) - integral) / np.diff(r)) / scale)


@dataclass(frozen=True)
class ModeProblem:
    """k-th spherical-harmonic component of the linearized Q+ problem."""

    k: int
    N: int
    e: EllipticityPair
    p: float
    base: RadialProfile

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 0:
            raise ConfigError("mode index must be a non-negative integer")

    @property
    def dim(self):
        return self.e.dim_plus(self.N)

    @property
    def sphere_eigenvalue(self):
        return sphere_eigenvalue(self.k, self.N)

    @property
    def angular_coefficient(self):
        return self.e.lam * self.sphere_eigenvalue / self.e.Lam

    @property
    def sigma(self):
        return indicial_exponent(self.dim, self.angular_coefficient)


@dataclass
class ModeReport:
    k: int
    sigma: float
    a_at_1: float
    max_abs: float
    nondegenerate: bool
    sol: object = field(default=None, repr=False)

    @property
    def ratio(self):
        return abs(self.a_at_1) / self.max_abs

    def a(self, r):
        """Mode amplitude ``a_k(r)`` and its derivative."""
        r = np.asarray(r, dtype=float)
        b, db = self.sol.sol(np.maximum(r, R_START))
        rs = r**self.sigma
        return rs * b, self.sigma * r ** (self.sigma - 1) * b + rs * db


def mode_nondegeneracy(mp: ModeProblem, tol=1e-6):
    """Certify ``a_k(1) != 0`` for the solution regular at the origin."""
    if mp.k == 0:
        raise ConfigError("k = 0 is the radial mode; use radial_nondegeneracy")
    if not mp.dim > 2:
        # the ODE is still regular-singular and solvable; the kernel statement
        # it supports is only established for N+ > 2
        log.warning("N+ = %.4g <= 2: outside the range where mode triviality is known", mp.dim)
    sigma = mp.sigma
    sol = _regular_solution(_weight(mp.base, mp.p), mp.dim + 2.0 * sigma)
    report = ModeReport(mp.k, sigma, 0.0, 0.0, False, sol)
    r = np.linspace(0.0, 1.0, 2001)
    a, _ = report.a(r)
    report.a_at_1 = float(sol.y[0, -1])
    report.max_abs = float(np.max(np.abs(a)))
    report.nondegenerate = abs(report.a_at_1) > tol * report.max_abs
    return report


def mode_sweep(base, N, e, p, kmax=6, tol=1e-6):
    """Reports for ``k = 1..kmax``; logs a warning if ``|a_k(1)|/max|a_k|``
    decreases in ``k`` (a regularity observation, not a failure)."""
    reports = [mode_nondegeneracy(ModeProblem(k, N, e, p, base), tol) for k in range(1, kmax + 1)]
    ratios = [rep.ratio for rep in reports]
    if any(r1 < r0 - 1e-12 for r0, r1 in zip(ratios, ratios[1:])):
        log.warning("mode ratios |a_k(1)|/max|a_k| decrease in k: %s", ratios)
    return reports


@dataclass
class SturmReport:
    ok: bool
    w_residual: float
    wronskian_defect: float
    first_zero: float | None
    messages: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


def sturm_cross_check(mp: ModeProblem, tol=1e-6):
    """Numerical check of the comparison argument between ``a_k`` and ``w = v'``.

    * ``w = v'`` solves ``w'' + (d-1)/r w' - (d-1) w / r^2 + p v^(p-1) w = 0``;
    * ``G(r) = r^(d-1) (w a' - a w') + (c_k + d - 1) int_0^r s^(d-3) a w ds``
      stays zero, where ``c_k = lam lam_k / Lam``;
    * the first zero of ``a_k`` in ``(0, 1]``, if any, is reported.
    """
    if mp.k < 1:
        raise ConfigError("the comparison check is for k >= 1")
    d, p, v = mp.dim, mp.p, mp.base
    base = RadialProblem.dimlike(d, p)

    def w_and_dw(r):
        vv, dv = v.dense(r)
        return dv, base.rhs(r, vv, dv)

    def w_rhs(r):
        vv, dv = v.dense(r)
        d2 = base.rhs(r, vv, dv)
        return -(d - 1) * d2 / r + (d - 1) * dv / r**2 - p * np.maximum(vv, 0.0) ** (p - 1) * dv

    # the innermost cell is skipped: there v'/r^2 - v''/r cancels to rounding
    # and w ~ v''(0) r is fixed by the series start anyway
    w_res = _integrated_defect(lambda r: w_and_dw(r)[1], w_rhs, 49, 8, r_lo=0.02)

    rep = mode_nondegeneracy(mp, tol)
    r = np.linspace(0.0, 1.0, 401)
    r[0] = R_START
    a, da = rep.a(r)
    w, dw = w_and_dw(r)
    boundary = r ** (d - 1) * (w * da - a * dw)

    # cumulative integral of s^(d-3) a w on the same grid
    A, B = r[:-1], r[1:]
    half = 0.5 * (B - A)
    nodes = (0.5 * (A + B))[:, None] + half[:, None] * _GL_X[None, :]
    an, _ = rep.a(nodes.ravel())
    wn, _ = w_and_dw(nodes.ravel())
    f = (nodes.ravel() ** (d - 3) * an * wn).reshape(nodes.shape)
    cum = np.concatenate([[0.0], np.cumsum(half * (f @ _GL_W))])
    G = boundary + (mp.angular_coefficient + d - 1) * cum
    scale = max(np.max(np.abs(r ** (d - 1) * w * da)), np.max(np.abs(r ** (d - 1) * a * dw)))
    defect = float(np.max(np.abs(G)) / scale)

    zeros = np.nonzero(np.sign(a[1:-1]) * np.sign(a[2:]) < 0)[0]
    first_zero = float(r[zeros[0] + 1]) if zeros.size else None

    messages = []
    if w_res > tol:
        messages.append(f"w = v' residual {w_res:.2e} exceeds {tol:.0e}")
    if defect > tol:
        messages.append(f"Wronskian identity defect {defect:.2e} exceeds {tol:.0e}")
    if first_zero is not None:
        messages.append(f"a_k vanishes at r = {first_zero:.6f}")
    return SturmReport(not messages, w_res, defect, first_zero, messages)
