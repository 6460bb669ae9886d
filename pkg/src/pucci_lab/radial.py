"""Radial shooting for the Lane-Emden type equations.

Three radial equations are handled, all of the form ``v'' = F(r, v, v')``:

* ``dimlike``: ``v'' + (d-1)/r v' + (v+)^p = 0`` with a real "dimension" d.
  This is the reduced equation of Q+ (d = N+) and Q- (d = N-).
* ``pucci_plus`` / ``pucci_minus``: ``phi(v'') + (N-1) phi(v'/r) + (v+)^p = 0``
  where ``phi`` is the piecewise linear weight of M+ or M-.

Each right-hand side is positively homogeneous under the Lane-Emden scaling
``v -> g v(g^((p-1)/2) r)``. We exploit this: a shot is integrated in ``r`` up
to the natural length scale and then continued in the Emden-Fowler variables
``w = r^a v``, ``z = r^(a+1) v'`` against ``s = log r`` (``a = 2/(p-1)``),
where the system is autonomous and O(1). That makes horizons such as
``R = 1e50`` cheap, which the exponent bisection needs because near the
threshold the first zero runs off to very large radii.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import brentq

from .errors import (
    ConfigError,
    IntegrationError,
    InvalidBaseError,
    InvalidBracketError,
    SupercriticalError,
)
from .operators import EllipticityPair, sobolev_exponent

log = logging.getLogger(__name__)

R_START = 1e-8
CLASSIFY_RMAX = 1e50
DIRICHLET_RMAX = 1e8
KINDS = ("dimlike", "pucci_plus", "pucci_minus")


# ---------------------------------------------------------------------------
# right-hand sides


def rhs_dimlike(r, v, dv, dim, p):
    """``v'' = -(dim-1)/r v' - (v+)^p``. ``r`` must be positive."""
    if np.any(np.asarray(r) <= 0):
        raise ConfigError("rhs evaluated at r <= 0; start from the series instead")
    return -(dim - 1.0) * dv / r - np.maximum(v, 0.0) ** p


def _phi_inverse_solve(B, slope_pos, slope_neg):
    # phi(x) = -B with phi of slope slope_pos on x >= 0 and slope_neg on x < 0
    return np.where(-B >= 0, -B / slope_pos, -B / slope_neg)


def rhs_pucci_plus(r, u, du, N, e: EllipticityPair, p):
    """Solve ``phi(u'') + (N-1) phi(u'/r) + (u+)^p = 0`` for u'' with M+ weights."""
    if np.any(np.asarray(r) <= 0):
        raise ConfigError("rhs evaluated at r <= 0; start from the series instead")
    q = du / r
    B = (N - 1) * np.where(q >= 0, e.Lam * q, e.lam * q) + np.maximum(u, 0.0) ** p
    return _phi_inverse_solve(B, e.Lam, e.lam)


def rhs_pucci_minus(r, u, du, N, e: EllipticityPair, p):
    if np.any(np.asarray(r) <= 0):
        raise ConfigError("rhs evaluated at r <= 0; start from the series instead")
    q = du / r
    B = (N - 1) * np.where(q >= 0, e.lam * q, e.Lam * q) + np.maximum(u, 0.0) ** p
    return _phi_inverse_solve(B, e.lam, e.Lam)


@dataclass(frozen=True)
class RadialProblem:
    """One radial equation together with its exponent ``p``.

    Build instances with :meth:`dimlike`, :meth:`pucci_plus` or
    :meth:`pucci_minus`.
    """

    kind: str
    p: float
    dim: float | None = None
    N: int | None = None
    e: EllipticityPair | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown radial kind {self.kind!r}")
        if not self.p > 1:
            raise ConfigError(f"exponent must exceed 1, got {self.p}")
        if self.kind == "dimlike":
            if self.dim is None or not self.dim > 1:
                raise ConfigError("dimension-like number must exceed 1")
        else:
            if self.N is None or int(self.N) != self.N or self.N < 2:
                raise ConfigError("Pucci kinds need an integer dimension N >= 2")
            if self.e is None:
                raise ConfigError("Pucci kinds need an EllipticityPair")

    @classmethod
    def dimlike(cls, dim, p):
        return cls("dimlike", float(p), dim=float(dim))

    @classmethod
    def pucci_plus(cls, N, e, p):
        return cls("pucci_plus", float(p), N=int(N), e=e)

    @classmethod
    def pucci_minus(cls, N, e, p):
        return cls("pucci_minus", float(p), N=int(N), e=e)

    def with_p(self, p):
        return RadialProblem(self.kind, float(p), self.dim, self.N, self.e)

    def scalar_rhs(self):
        """Float-only version of :meth:`rhs` for the integrator inner loop."""
        p = self.p
        if self.kind == "dimlike":
            c = self.dim - 1.0

            def F(r, v, dv):
                return -c * dv / r - (v ** p if v > 0 else 0.0)

            return F
        lam, Lam, m = self.e.lam, self.e.Lam, self.N - 1
        pos, neg = (Lam, lam) if self.kind == "pucci_plus" else (lam, Lam)

        def F(r, v, dv):
            q = dv / r
            B = m * (pos * q if q >= 0 else neg * q) + (v ** p if v > 0 else 0.0)
            return -B / pos if B <= 0 else -B / neg

        return F

    def rhs(self, r, v, dv):
        if self.kind == "dimlike":
            return rhs_dimlike(r, v, dv, self.dim, self.p)
        if self.kind == "pucci_plus":
            return rhs_pucci_plus(r, v, dv, self.N, self.e, self.p)
        return rhs_pucci_minus(r, v, dv, self.N, self.e, self.p)

    @property
    def origin_divisor(self):
        """``d`` with ``v''(0) = -v(0)^p / d`` (concave regime at the origin)."""
        if self.kind == "dimlike":
            return self.dim
        if self.kind == "pucci_plus":
            return self.e.lam * self.N
        return self.e.Lam * self.N

    @property
    def scaling_exponent(self):
        return 2.0 / (self.p - 1.0)

    def analytic_threshold(self):
        """Exponent at or above which no positive Dirichlet solution can exist.

        Exact for ``dimlike``; an upper bound for ``pucci_plus``
        (``(N+ + 2)/(N+ - 2)``) and for ``pucci_minus`` (``p*_N``).
        """
        if self.kind == "dimlike":
            return sobolev_exponent(self.dim)
        if self.kind == "pucci_plus":
            return sobolev_exponent(self.e.dim_plus(self.N))
        return sobolev_exponent(self.N)

    def describe(self):
        if self.kind == "dimlike":
            return {"kind": self.kind, "p": self.p, "dim": self.dim}
        return {"kind": self.kind, "p": self.p, "N": self.N,
                "lambda": self.e.lam, "Lambda": self.e.Lam}


# ---------------------------------------------------------------------------
# profiles and outcomes


@dataclass
class RadialProfile:
    """Samples of a radial function and its derivative on an increasing grid."""

    radii: np.ndarray
    values: np.ndarray
    derivs: np.ndarray
    source: object = field(default=None, repr=False, compare=False)
    _spline: CubicHermiteSpline | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.radii = np.asarray(self.radii, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.derivs = np.asarray(self.derivs, dtype=float)
        if self.radii[0] != 0.0 or self.derivs[0] != 0.0 or not self.values[0] > 0:
            raise ConfigError("profile must start at r=0 with v(0) > 0 and v'(0) = 0")
        if np.any(np.diff(self.radii) <= 0):
            raise ConfigError("profile radii must be strictly increasing")

    @property
    def spline(self):
        if self._spline is None:
            self._spline = CubicHermiteSpline(self.radii, self.values, self.derivs)
        return self._spline

    def __call__(self, r):
        return self.spline(r)

    def deriv(self, r):
        return self.spline(r, 1)

    def dense(self, r):
        """(v, v') from the integrator's dense output when available.

        Falls back to the cubic Hermite interpolant of the samples.
        """
        if self.source is not None:
            return self.source(r)
        return self.spline(r), self.spline(r, 1)


@dataclass
class ShootOutcome:
    """Result of one shot: either a first zero ``R0`` or positivity up to ``rmax``."""

    crossed: bool
    radius: float
    profile: RadialProfile
    problem: RadialProblem
    v0: float
    _segments: list = field(default_factory=list, repr=False)

    @property
    def classification(self):
        return "crossing" if self.crossed else "positive"

    @property
    def R0(self):
        return self.radius if self.crossed else None

    def evaluate(self, r):
        """Dense evaluation of (v, v') at radii ``r`` inside the shot range."""
        if not self._segments:
            raise ConfigError("outcome was computed without dense output")
        r = np.atleast_1d(np.asarray(r, dtype=float))
        if np.any(r < 0) or np.any(r > self.radius * (1 + 1e-12)):
            raise ConfigError("evaluation radius outside the integrated range")
        v = np.empty_like(r)
        dv = np.empty_like(r)
        d = self.problem.origin_divisor
        p = self.problem.p
        a = self.problem.scaling_exponent
        done = np.zeros(r.shape, dtype=bool)
        near = r <= R_START
        v[near] = self.v0 - self.v0**p * r[near] ** 2 / (2 * d)
        dv[near] = -self.v0**p * r[near] / d
        done |= near
        for kind, lo, hi, sol in self._segments:
            sel = (~done) & (r <= hi * (1 + 1e-14))
            if not np.any(sel):
                continue
            rr = np.minimum(r[sel], hi)
            if kind == "r":
                y = sol(rr)
                v[sel], dv[sel] = y[0], y[1]
            else:
                y = sol(np.log(rr))
                v[sel] = y[0] * rr ** (-a)
                dv[sel] = y[1] * rr ** (-a - 1)
            done |= sel
        return v, dv


def _series_start(problem, v0, r0):
    d = problem.origin_divisor
    c = v0**problem.p / d
    return np.array([v0 - 0.5 * c * r0 * r0, -c * r0])


def shoot(problem: RadialProblem, v0=1.0, rmax=50.0, tol=1e-10, dense=True,
          method="RK45") -> ShootOutcome:
    """Integrate the radial equation from the origin with ``v(0) = v0``.

    Stops at the first zero of ``v`` (classification ``crossing``) or at
    ``rmax`` (``positive``). Local error control uses ``rtol = tol`` and an
    absolute tolerance of ``tol`` in units of the natural amplitude.
    """
    if not v0 > 0:
        raise ConfigError("initial height must be positive")
    if not rmax > R_START:
        raise ConfigError("horizon must exceed the series start radius")
    p = problem.p
    a = problem.scaling_exponent
    F = problem.scalar_rhs()
    length = v0 ** (-1.0 / a)
    r1 = min(rmax, length)

    def f_r(r, y):
        return [y[1], F(r, y[0], y[1])]

    def f_s(s, y):
        w, z = y
        return [a * w + z, (a + 1.0) * z + F(1.0, w, z)]

    def zero(t, y):
        return y[0]

    zero.terminal = True
    zero.direction = -1

    y0 = _series_start(problem, v0, R_START)
    sol = solve_ivp(f_r, (R_START, r1), y0, method=method, rtol=tol,
                    atol=[tol * v0, tol * v0 / length], events=zero, dense_output=dense)
    if sol.status == -1:
        raise IntegrationError(f"radial integration failed: {sol.message}",
                               state=(sol.t[-1], sol.y[:, -1]))
    radii = [0.0, *sol.t]
    values = [v0, *sol.y[0]]
    derivs = [0.0, *sol.y[1]]
    segments = [("r", R_START, sol.t[-1], sol.sol)] if dense else []

    crossed = bool(sol.t_events[0].size)
    if crossed:
        radius = float(sol.t_events[0][0])
        dv_end = float(sol.y_events[0][0][1])
    elif rmax > r1:
        s1 = math.log(r1)
        yb = [r1**a * sol.y[0, -1], r1 ** (a + 1) * sol.y[1, -1]]
        solb = solve_ivp(f_s, (s1, math.log(rmax)), yb, method=method, rtol=tol, atol=tol,
                         events=zero, dense_output=dense)
        if solb.status == -1:
            raise IntegrationError(f"radial integration failed: {solb.message}",
                                   state=(math.exp(solb.t[-1]), solb.y[:, -1]))
        rb = np.exp(solb.t[1:])
        radii.extend(rb)
        values.extend(solb.y[0, 1:] * rb ** (-a))
        derivs.extend(solb.y[1, 1:] * rb ** (-a - 1))
        if dense:
            segments.append(("s", r1, float(rb[-1]), solb.sol))
        crossed = bool(solb.t_events[0].size)
        if crossed:
            radius = math.exp(float(solb.t_events[0][0]))
            dv_end = float(solb.y_events[0][0][1]) * radius ** (-a - 1)
        else:
            radius = float(rb[-1])
    else:
        radius = float(sol.t[-1])

    radii = np.asarray(radii)
    values = np.asarray(values)
    derivs = np.asarray(derivs)
    if crossed:
        # the event point replaces the overshooting last step
        keep = radii < radius
        radii = np.append(radii[keep], radius)
        values = np.append(values[keep], 0.0)
        derivs = np.append(derivs[keep], dv_end)
        segments = [(k, lo, min(hi, radius), s) for k, lo, hi, s in segments]
    profile = RadialProfile(radii, values, derivs)
    return ShootOutcome(crossed, radius, profile, problem, float(v0), segments)


def classify(problem: RadialProblem, rmax=CLASSIFY_RMAX, tol=1e-10):
    """``True`` when the shot from ``v0 = 1`` crosses zero before ``rmax``."""
    return shoot(problem, 1.0, rmax=rmax, tol=tol, dense=False).crossed


# ---------------------------------------------------------------------------
# Dirichlet solution on the unit ball


def dirichlet_radial_solution(problem: RadialProblem, v0=1.0, npts=2001, rmax=DIRICHLET_RMAX,
                              tol=1e-12) -> RadialProfile:
    """Positive solution with ``v'(0) = 0`` and ``v(1) = 0``.

    Shoots from ``v0``, finds the first zero ``R0`` and returns the member
    ``g v(g^((p-1)/2) r)`` of the scaling family with ``g = R0^(2/(p-1))``,
    whose zero sits at ``r = 1``. Raises :class:`SupercriticalError` when no
    such solution exists.
    """
    if problem.p >= problem.analytic_threshold():
        raise SupercriticalError(
            f"p = {problem.p} is at or above the radial threshold "
            f"{problem.analytic_threshold():.6g}; no positive solution exists")
    out = shoot(problem, v0, rmax=rmax, tol=tol, dense=True)
    if not out.crossed:
        raise SupercriticalError(
            f"shot stayed positive up to r = {rmax:g}; treated as supercritical")
    R0 = out.radius
    gamma = R0 ** problem.scaling_exponent
    # uniform samples plus the integrator's own (adaptive) radii, which resolve
    # the core of concentrated profiles
    r = np.union1d(np.linspace(0.0, 1.0, npts), out.profile.radii / R0)
    r = r[r <= 1.0]
    r[-1] = 1.0
    v, dv = out.evaluate(R0 * r)
    values = gamma * v
    derivs = gamma * R0 * dv
    values[-1] = 0.0
    derivs[0] = 0.0

    def source(x):
        v, dv = out.evaluate(R0 * np.asarray(x, dtype=float))
        return gamma * v, gamma * R0 * dv

    return RadialProfile(r, values, derivs, source=source)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


def _curvature_breakpoints(profile, problem, r, nprobe=20):
    """Radii in ``(r[0], r[-1])`` where ``v''`` changes sign.

    The Pucci right-hand sides have a kink there, so quadrature must not
    straddle these points.
    """
    def curvature(x):
        v, dv = profile.dense(np.atleast_1d(x))
        return problem.rhs(np.atleast_1d(x), v, dv)

    probe = np.linspace(r[0], r[-1], (len(r) - 1) * nprobe + 1)[1:-1]
    c = curvature(probe)
    flips = np.nonzero(np.sign(c[:-1]) * np.sign(c[1:]) < 0)[0]
    return [brentq(lambda x: float(curvature(x)[0]), probe[i], probe[i + 1], xtol=1e-15)
            for i in flips]


def profile_residual(profile: RadialProfile, problem: RadialProblem, ncell=50, nsub=16):
    """Relative sup-norm residual of ``v'' = F(r, v, v')`` on a validation grid.

    For each validation cell ``[a, b]`` the defect
    ``|v'(b) - v'(a) - int_a^b F(r, v, v') dr| / (b - a)`` is computed with
    composite Gauss-Legendre quadrature (split where ``v''`` changes sign)
    and divided by ``max(1, sup |F|)``.
    """
    R = profile.radii[-1]
    r = np.linspace(0.0, R, ncell + 1)
    pieces = np.linspace(0.0, R, ncell * nsub + 1)
    kinks = _curvature_breakpoints(profile, problem, pieces)
    edges = np.unique(np.concatenate([pieces, kinks]))
    A, B = edges[:-1], edges[1:]
    half = 0.5 * (B - A)
    nodes = (0.5 * (A + B))[:, None] + half[:, None] * _GL_X[None, :]
    v, dv = profile.dense(nodes.ravel())
    f = problem.rhs(nodes, v.reshape(nodes.shape), dv.reshape(nodes.shape))
    piece_int = half * (f @ _GL_W)
    cell = np.clip(np.searchsorted(r, 0.5 * (A + B)) - 1, 0, ncell - 1)
    integral = np.bincount(cell, weights=piece_int, minlength=ncell)
    _, d = profile.dense(r)
    scale = max(1.0, float(np.max(np.abs(f))))
    return float(np.max(np.abs(np.diff(d) - integral) / np.diff(r)) / scale)


def validate_profile(profile, problem, limit=1e-8):
    res = profile_residual(profile, problem)
    if not res <= limit:
        raise InvalidBaseError(f"profile residual {res:.3e} exceeds {limit:.1e}")
    return res


# ---------------------------------------------------------------------------
# critical exponents


def classification_scan(problem: RadialProblem, p_grid, rmax=CLASSIFY_RMAX, tol=1e-10):
    """Classify shots over an exponent grid and flag non-monotone behaviour.

    Returns ``(classes, monotone)`` with ``classes[i]`` True for a crossing.
    """
    classes = [classify(problem.with_p(p), rmax, tol) for p in p_grid]
    flips = sum(1 for c0, c1 in zip(classes, classes[1:]) if c0 != c1)
    monotone = flips <= 1 and (not classes or classes[0] or not any(classes))
    if not monotone:
        log.warning("non-monotone crossing/positive pattern for %s over p in [%g, %g]: %s",
                    problem.kind, p_grid[0], p_grid[-1], classes)
    else:
        log.info("classification scan for %s is monotone: %s", problem.kind, classes)
    return classes, monotone


def critical_exponent(problem: RadialProblem, bracket, tol=1e-3, rmax=CLASSIFY_RMAX,
                      shoot_tol=1e-10, scan_points=0):
    """Bisect on ``p`` for the crossing/positive threshold.

    ``problem.p`` is ignored. The lower end of ``bracket`` must cross and the
    upper end must stay positive. With ``scan_points > 0`` a classification
    scan over the bracket is logged first.
    """
    lo, hi = map(float, bracket)
    if not 1 < lo < hi:
        raise InvalidBracketError(f"need 1 < p_lo < p_hi, got ({lo}, {hi})")
    c_lo = classify(problem.with_p(lo), rmax, shoot_tol)
    c_hi = classify(problem.with_p(hi), rmax, shoot_tol)
    if c_lo == c_hi:
        raise InvalidBracketError(
            f"both ends classify as {'crossing' if c_lo else 'positive'}; widen the bracket")
    if not c_lo:
        raise InvalidBracketError("lower end stays positive while the upper end crosses")
    if scan_points:
        classification_scan(problem, np.linspace(lo, hi, scan_points + 2)[1:-1], rmax, shoot_tol)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if classify(problem.with_p(mid), rmax, shoot_tol):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def default_bracket(problem: RadialProblem, pad=0.5):
    """Bracket from the analytic bounds of each kind, padded by ``pad``."""
    if problem.kind == "dimlike":
        pc = sobolev_exponent(problem.dim)
        if not np.isfinite(pc):
            raise InvalidBracketError("no finite critical exponent when dim <= 2")
        return max(1.0 + 0.5 * (pc - 1.0), pc - pad), pc + pad
    if problem.kind == "pucci_plus":
        lo = sobolev_exponent(problem.N)
        hi = sobolev_exponent(problem.e.dim_plus(problem.N))
    else:
        lo = sobolev_exponent(problem.e.dim_minus(problem.N))
        hi = sobolev_exponent(problem.N)
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise InvalidBracketError("analytic bounds are infinite; supply a bracket")
    return max(1.0 + 0.5 * (lo - 1.0), lo - pad), hi + pad


def expand_bracket(problem: RadialProblem, lo, factor=2.0, limit=1e3, rmax=CLASSIFY_RMAX,
                   tol=1e-10):
    """Grow the upper end geometrically from ``lo`` until the shot stays positive.

    For use when no analytic upper bound is finite. Raises InvalidBracketError if
    ``lo`` does not cross or nothing below ``limit`` stays positive.
    """
    if not classify(problem.with_p(lo), rmax, tol):
        raise InvalidBracketError(f"lower end p={lo} stays positive; lower it")
    hi = lo
    while hi < limit:
        hi = 1.0 + factor * (hi - 1.0)
        if not classify(problem.with_p(hi), rmax, tol):
            return lo, hi
        lo = hi
    raise InvalidBracketError(f"every exponent up to {limit:g} crosses; no threshold found")
