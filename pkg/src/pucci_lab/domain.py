"""Axisymmetric perturbed balls, meridian-plane finite differences and Newton solves.

A domain is ``{ r < rho(theta) }`` with ``rho = 1 + eps g(theta)`` and ``theta`` the
polar angle from the symmetry axis. Functions are sampled on a boundary-fitted
grid in computational coordinates ``(s, theta)``. The physical radius is

    r = R(s, theta) = s (1 + eps g(theta) chi(s)),

where ``chi`` is a smooth step that vanishes for ``s < 0.2`` and equals one for
``s > 0.8``. The grid is therefore exactly polar near the origin, which keeps the
reflection through the origin consistent for shapes without equatorial symmetry,
and ``s = 1`` is exactly the boundary.

Nodes are cell-centred: ``s_i = (i + 1/2) h`` with ``h = 1/(nr + 1/2)`` for
``i < nr`` plus a boundary row at ``s = 1``, and ``theta_j = (j + 1/2) pi / ntheta``.
The ghost row below ``s = 0`` is the first row reflected to ``pi - theta``. The
ghost columns past the axis are even reflections.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (ConfigError, DivergenceError, GridError, HomotopyError, PositivityError,
                     SupercriticalError)
from .operators import EllipticityPair, pucci_from_eigenvalues, sobolev_exponent
from .radial import RadialProblem, critical_exponent, default_bracket, dirichlet_radial_solution

log = logging.getLogger(__name__)

MIN_RESOLUTION = 16
DIRECT_LIMIT = 100_000
BLEND = (0.2, 0.8)

SHAPES: dict[str, Callable] = {
    "cos2": lambda t: np.cos(2 * t),
    "cos3": lambda t: np.cos(3 * t),
    "bump": lambda t: np.exp(-8.0 * (1.0 - np.cos(t))),
}


def _smoothstep(s):
    """C^3 step: 0 below BLEND[0], 1 above BLEND[1]; returns value and two derivatives."""
    a, b = BLEND
    w = b - a
    t = np.clip((np.asarray(s, dtype=float) - a) / w, 0.0, 1.0)
    chi = t**4 * (35 - 84 * t + 70 * t**2 - 20 * t**3)
    d1 = 140 * t**3 * (1 - t) ** 3 / w
    d2 = 420 * t**2 * (1 - t) ** 2 * (1 - 2 * t) / w**2
    return chi, d1, d2


def _shape_derivatives(g, theta, dt=1e-4):
    # fourth-order central differences; shapes are arbitrary callables
    gp = (g(theta - 2 * dt) - 8 * g(theta - dt) + 8 * g(theta + dt) - g(theta + 2 * dt)) / (12 * dt)
    gpp = (-g(theta - 2 * dt) + 16 * g(theta - dt) - 30 * g(theta) + 16 * g(theta + dt)
           - g(theta + 2 * dt)) / (12 * dt**2)
    return gp, gpp


@dataclass(frozen=True)
class PerturbedBall:
    """Axisymmetric domain ``r < 1 + epsilon g(theta)`` in R^N."""

    N: int
    epsilon: float = 0.0
    g: Callable = field(default=SHAPES["cos2"], compare=False)
    description: str = "cos2"

    def __post_init__(self):
        if self.N < 2:
            raise ConfigError("need N >= 2")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        t = np.linspace(0.0, np.pi, 2001)
        gmax = float(np.max(np.abs(self.g(t))))
        if gmax > 1.0 + 1e-12:
            raise ConfigError(f"shape must satisfy |g| <= 1, got sup {gmax:.3g}")
        if self.epsilon * gmax >= 1.0:
            raise GridError("rho(theta) = 1 + eps g(theta) is not positive", self.epsilon)

    @classmethod
    def from_shape(cls, N, epsilon, shape="cos2"):
        if shape not in SHAPES:
            raise ConfigError(f"unknown shape {shape!r}; choose from {sorted(SHAPES)}")
        return cls(N, float(epsilon), SHAPES[shape], shape)

    def with_epsilon(self, epsilon):
        return PerturbedBall(self.N, float(epsilon), self.g, self.description)

    def rho(self, theta):
        return 1.0 + self.epsilon * self.g(np.asarray(theta, dtype=float))

    def nesting_radii(self):
        """Radii ``(r_in, r_out)`` of the largest inscribed and smallest enclosing ball."""
        t = np.linspace(0.0, np.pi, 2001)
        rho = self.rho(t)
        return float(rho.min()), float(rho.max())


@dataclass
class MeridianGrid:
    """Boundary-fitted grid on the meridian half-plane with precomputed metric terms."""

    domain: PerturbedBall
    nr: int
    ntheta: int
    s: np.ndarray
    theta: np.ndarray
    r: np.ndarray
    metric: dict
    ops: dict = field(repr=False)
    neighbours: dict = field(repr=False, default_factory=dict)

    @property
    def h(self):
        return float(self.s[1, 0] - self.s[0, 0])

    @property
    def dtheta(self):
        return np.pi / self.ntheta

    @property
    def shape(self):
        return (self.nr + 1, self.ntheta)

    @property
    def size(self):
        return (self.nr + 1) * self.ntheta

    @property
    def interior(self):
        """Boolean mask of interior nodes, shape ``grid.shape``."""
        m = np.ones(self.shape, dtype=bool)
        m[-1] = False
        return m

    def cartesian(self):
        """Meridian-plane coordinates ``(x_perp, x_axis)`` of every node."""
        return self.r * np.sin(self.theta), self.r * np.cos(self.theta)

    def sample(self, f):
        """Evaluate ``f(r, theta)`` on all nodes."""
        return np.asarray(f(self.r, self.theta), dtype=float) * np.ones(self.shape)


_NEIGHBOURS = {"c": (0, 0), "n": (1, 0), "S": (-1, 0), "e": (0, 1), "w": (0, -1),
               "ne": (1, 1), "nw": (1, -1), "se": (-1, 1), "sw": (-1, -1)}


def _stencil_matrices(nr, nt, h, dt):
    """Central difference matrices for the interior rows, acting on all nodes."""
    n_int, n_all = nr * nt, (nr + 1) * nt

    def index(i, j):
        # resolve ghosts: first reflect across the axis, then through the origin
        j = np.where(j < 0, -1 - j, j)
        j = np.where(j >= nt, 2 * nt - 1 - j, j)
        below = i < 0
        i = np.where(below, -1 - i, i)
        j = np.where(below, nt - 1 - j, j)
        return i * nt + j

    I, J = np.meshgrid(np.arange(nr), np.arange(nt), indexing="ij")
    rows = (I * nt + J).ravel()

    def build(offsets):
        data, cols, rr = [], [], []
        for (di, dj), c in offsets:
            cols.append(index(I + di, J + dj).ravel())
            rr.append(rows)
            data.append(np.full(rows.size, c))
        m = sp.coo_matrix((np.concatenate(data), (np.concatenate(rr), np.concatenate(cols))),
                          shape=(n_int, n_all))
        return m.tocsr()

    nbr = {key: index(I + di, J + dj).ravel() for key, (di, dj) in _NEIGHBOURS.items()}
    return nbr, {
        "s": build([((1, 0), 0.5 / h), ((-1, 0), -0.5 / h)]),
        "ss": build([((1, 0), 1 / h**2), ((0, 0), -2 / h**2), ((-1, 0), 1 / h**2)]),
        "t": build([((0, 1), 0.5 / dt), ((0, -1), -0.5 / dt)]),
        "tt": build([((0, 1), 1 / dt**2), ((0, 0), -2 / dt**2), ((0, -1), 1 / dt**2)]),
        "st": build([((1, 1), 0.25 / (h * dt)), ((1, -1), -0.25 / (h * dt)),
                     ((-1, 1), -0.25 / (h * dt)), ((-1, -1), 0.25 / (h * dt))]),
    }


def build_grid(dom: PerturbedBall, nr: int, ntheta: int) -> MeridianGrid:
    """Boundary-fitted meridian grid with ``nr`` interior rows and ``ntheta`` columns.

    Raises
    ------
    GridError
        If the map ``(s, theta) -> r`` is not monotone in ``s`` somewhere.
    """
    if nr < MIN_RESOLUTION or ntheta < MIN_RESOLUTION:
        raise ConfigError(f"resolution must be at least {MIN_RESOLUTION}x{MIN_RESOLUTION}")
    h = 1.0 / (nr + 0.5)
    dt = np.pi / ntheta
    s1 = (np.arange(nr + 1) + 0.5) * h
    s1[-1] = 1.0
    t1 = (np.arange(ntheta) + 0.5) * dt

    # Jacobian check on a fine sample, not just at the nodes
    sf, tf = np.meshgrid(np.linspace(0, 1, 4 * nr + 1), np.linspace(0, np.pi, 4 * ntheta + 1),
                         indexing="ij")
    chi, dchi, _ = _smoothstep(sf)
    Rs_fine = 1 + dom.epsilon * dom.g(tf) * (chi + sf * dchi)
    if np.min(Rs_fine) <= 0.0:
        raise GridError(f"map Jacobian vanishes (min dR/ds = {np.min(Rs_fine):.3g}) "
                        f"at epsilon={dom.epsilon}", dom.epsilon)

    S, T = np.meshgrid(s1, t1, indexing="ij")
    g = dom.g(T)
    gp, gpp = _shape_derivatives(dom.g, T)
    chi, dchi, d2chi = _smoothstep(S)
    eps = dom.epsilon
    R = S * (1 + eps * g * chi)
    Rs = 1 + eps * g * (chi + S * dchi)
    Rss = eps * g * (2 * dchi + S * d2chi)
    Rt = eps * S * chi * gp
    Rtt = eps * S * chi * gpp
    Rst = eps * gp * (chi + S * dchi)

    Sr = 1 / Rs
    St = -Rt / Rs
    Srr = -Rss * Sr**3
    Srt = -(Rss * St + Rst) / Rs**2
    Stt = -(Rss * St**2 + 2 * Rst * St + Rtt) / Rs
    metric = {"Sr": Sr, "St": St, "Srr": Srr, "Srt": Srt, "Stt": Stt, "Rs": Rs,
              "cot": np.cos(T) / np.sin(T)}
    nbr, ops = _stencil_matrices(nr, ntheta, h, dt)
    return MeridianGrid(dom, nr, ntheta, S, T, R, metric, ops, nbr)


# --------------------------------------------------------------------------
# discrete derivatives and operators


def _differences(u, grid: MeridianGrid):
    """Same values as ``grid.ops[k] @ u`` but with differences formed first.

    Subtracting neighbouring values before scaling keeps the rounding error
    relative to the differences, which matters where the metric coefficients
    are large (first rows near the origin).
    """
    u = np.asarray(u)
    u = (u if u.dtype == np.longdouble else u.astype(float)).ravel()
    if u.size != grid.size:
        raise ConfigError(f"grid function has {u.size} values, grid has {grid.size}")
    v = {k: u[idx] for k, idx in grid.neighbours.items()}
    h, dt = grid.h, grid.dtheta
    D = {
        "s": (v["n"] - v["S"]) / (2 * h),
        "ss": ((v["n"] - v["c"]) - (v["c"] - v["S"])) / h**2,
        "t": (v["e"] - v["w"]) / (2 * dt),
        "tt": ((v["e"] - v["c"]) - (v["c"] - v["w"])) / dt**2,
        "st": ((v["ne"] - v["nw"]) - (v["se"] - v["sw"])) / (4 * h * dt),
    }
    return {k: d.reshape(grid.nr, grid.ntheta) for k, d in D.items()}


def _mapped_derivatives(u, grid: MeridianGrid):
    """Physical polar derivatives ``u_r, u_t, u_rr, u_rt, u_tt`` at interior nodes."""
    n = grid.nr
    D = _differences(u, grid)
    m = {k: v[:n] for k, v in grid.metric.items()}
    ur = m["Sr"] * D["s"]
    ut = D["t"] + m["St"] * D["s"]
    urr = m["Sr"] ** 2 * D["ss"] + m["Srr"] * D["s"]
    urt = m["Sr"] * (m["St"] * D["ss"] + D["st"]) + m["Srt"] * D["s"]
    utt = D["tt"] + 2 * m["St"] * D["st"] + m["St"] ** 2 * D["ss"] + m["Stt"] * D["s"]
    return ur, ut, urr, urt, utt


def meridian_hessian(u, grid: MeridianGrid):
    """Hessian data at interior nodes.

    Returns the 2x2 meridian block (stacked, shape ``(nr, ntheta, 2, 2)``) in the
    orthonormal (radial, polar) frame and the azimuthal eigenvalue, which has
    multiplicity ``N - 2``.
    """
    ur, ut, urr, urt, utt = _mapped_derivatives(u, grid)
    r = grid.r[: grid.nr]
    cot = grid.metric["cot"][: grid.nr]
    H = np.empty(r.shape + (2, 2))
    H[..., 0, 0] = urr
    H[..., 0, 1] = H[..., 1, 0] = urt / r - ut / r**2
    H[..., 1, 1] = ur / r + utt / r**2
    mu = ur / r + cot * ut / r**2
    return H, mu


def hessian_eigenvalues(u, grid: MeridianGrid):
    """All N eigenvalues per interior node, shape ``(nr, ntheta, N)``."""
    H, mu = meridian_hessian(u, grid)
    lam2 = np.linalg.eigvalsh(H.astype(float))
    m = grid.domain.N - 2
    return np.concatenate([lam2, np.repeat(mu[..., None], m, axis=-1)], axis=-1)


def pucci_fd_apply(u, grid: MeridianGrid, e: EllipticityPair, plus=True):
    """Extremal operator of a grid function at the interior nodes, shape ``(nr, ntheta)``."""
    eig = hessian_eigenvalues(u, grid)
    out = pucci_from_eigenvalues(eig, e, plus=plus)
    assert np.all(np.isfinite(out)), "non-finite value in the discrete extremal operator"
    return out


def _coefficients(grid: MeridianGrid, arr, art, att, aphi):
    """Weights of the mapped difference quotients in ``tr(A D^2 u)``.

    ``A`` is given in the (radial, polar, azimuthal) frame at interior nodes.
    """
    n = grid.nr
    m = {k: v[:n] for k, v in grid.metric.items()}
    r = grid.r[:n]
    mult = grid.domain.N - 2
    Sr, St = m["Sr"], m["St"]
    c_ss = arr * Sr**2 + 2 * art * Sr * St / r + att * St**2 / r**2
    c_st = 2 * art * Sr / r + 2 * att * St / r**2
    c_tt = att / r**2
    c_t = -2 * art / r**2 + mult * aphi * m["cot"] / r**2
    c_s = (arr * m["Srr"] + 2 * art * (m["Srt"] / r - St / r**2)
           + att * (Sr / r + m["Stt"] / r**2) + mult * aphi * (Sr / r + m["cot"] * St / r**2))
    return {"ss": c_ss, "st": c_st, "tt": c_tt, "t": c_t, "s": c_s}


def _matrix(grid: MeridianGrid, coef):
    """Interior rows of the operator; see :func:`_with_dirichlet_rows` for the rest."""
    return sum(sp.diags(coef[k].ravel()) @ grid.ops[k] for k in ("ss", "st", "tt", "t", "s"))


def _apply(grid: MeridianGrid, coef, u):
    """Operator applied to ``u`` on all nodes (identity on the boundary row)."""
    D = _differences(u, grid)
    out = np.array(np.ravel(u), dtype=np.result_type(u, float))
    out[: grid.nr * grid.ntheta] = sum(coef[k] * D[k] for k in ("ss", "st", "tt", "t", "s")).ravel()
    return out


def _assemble(grid: MeridianGrid, arr, art, att, aphi):
    return _matrix(grid, _coefficients(grid, arr, art, att, aphi))


def _with_dirichlet_rows(grid: MeridianGrid, L_int):
    nb = grid.ntheta
    B = sp.csr_matrix((np.ones(nb), (np.arange(nb), grid.nr * nb + np.arange(nb))),
                      shape=(nb, grid.size))
    return sp.vstack([L_int, B], format="csr")


def _const(grid, value):
    return np.full((grid.nr, grid.ntheta), float(value))


def discretize_q_plus(grid: MeridianGrid, e: EllipticityPair, N=None, minus=False):
    """Sparse matrix of ``lam Lap + (Lam - lam) d_rr`` with identity Dirichlet rows.

    ``minus=True`` swaps the constants. ``N`` defaults to the grid's dimension and
    must agree with it when given.
    """
    if N is not None and N != grid.domain.N:
        raise ConfigError(f"grid is for N={grid.domain.N}, got N={N}")
    return _with_dirichlet_rows(grid, _matrix(grid, _linear_coefficients(grid, e, minus)))


def _linear_coefficients(grid, e, minus=False):
    lo, hi = (e.Lam, e.lam) if minus else (e.lam, e.Lam)
    return _coefficients(grid, _const(grid, hi), _const(grid, 0.0), _const(grid, lo),
                         _const(grid, lo))


def discrete_laplacian(grid: MeridianGrid):
    one = _const(grid, 1.0)
    return _with_dirichlet_rows(grid, _assemble(grid, one, _const(grid, 0.0), one, one))


def pucci_policy(u, grid: MeridianGrid, e: EllipticityPair, plus=True):
    """Optimal coefficients ``(a_rr, a_rt, a_tt, a_phi)`` for the current Hessian signs."""
    H, mu = meridian_hessian(u, grid)
    lam2, vec = np.linalg.eigh(H.astype(float))
    hi, lo = (e.Lam, e.lam) if plus else (e.lam, e.Lam)
    w = np.where(lam2 > 0, hi, lo)
    A = np.einsum("...ik,...k,...jk->...ij", vec, w, vec)
    aphi = np.where(mu > 0, hi, lo)
    return A[..., 0, 0], A[..., 0, 1], A[..., 1, 1], aphi


def _pattern(u, grid, e, plus):
    H, mu = meridian_hessian(u, grid)
    lam2 = np.linalg.eigvalsh(H.astype(float))
    return np.concatenate([lam2 > 0, (mu > 0)[..., None]], axis=-1)


# --------------------------------------------------------------------------
# nonlinear solves

KIND_ALIASES = {"q+": "q+", "qplus": "q+", "q-": "q-", "qminus": "q-",
                "m+": "m+", "pucciplus": "m+", "m-": "m-", "pucciminus": "m-"}


def _kind(kind):
    key = str(kind).lower().replace("_", "")
    if key not in KIND_ALIASES:
        raise ConfigError(f"unknown operator kind {kind!r}")
    return KIND_ALIASES[key]


@dataclass
class DiscreteSolution:
    grid: MeridianGrid
    values: np.ndarray
    residual_norm: float
    newton_iters: int
    kind: str = "q+"
    e: EllipticityPair | None = None
    p: float = float("nan")
    history: list = field(default_factory=list)
    policy_updates: int = 0
    policy_fixed: bool = True

    @property
    def interior_min(self):
        return float(self.values[:-1].min())

    def sup_distance(self, other: "DiscreteSolution"):
        if other.values.shape != self.values.shape:
            raise ConfigError("solutions live on grids of different shape")
        return float(np.max(np.abs(self.values - other.values)))

    def params(self):
        d = self.grid.domain
        return {"N": d.N, "epsilon": d.epsilon, "shape": d.description, "nr": self.grid.nr,
                "ntheta": self.grid.ntheta, "kind": self.kind, "p": self.p,
                "lambda": None if self.e is None else self.e.lam,
                "Lambda": None if self.e is None else self.e.Lam}


def _rounding_floor(grid, coef, u, p):
    """Pessimistic size of the rounding error in the residual for stored values ``u``."""
    h, dt = grid.h, grid.dtheta
    row = (np.abs(coef["s"]) / h + 4 * np.abs(coef["ss"]) / h**2 + np.abs(coef["t"]) / dt
           + 4 * np.abs(coef["tt"]) / dt**2 + np.abs(coef["st"]) / (h * dt))
    umax = float(np.max(np.abs(u)))
    return 16 * np.finfo(np.asarray(u).dtype).eps * (float(np.max(row)) * umax + umax**p)


def _linear_solve(J, b):
    if J.shape[0] < DIRECT_LIMIT:
        return spla.spsolve(J.tocsc(), b)
    ilu = spla.spilu(J.tocsc(), drop_tol=1e-5, fill_factor=20)
    M = spla.LinearOperator(J.shape, ilu.solve)
    x, info = spla.gmres(J, b, M=M, rtol=1e-12, restart=200, maxiter=50)
    if info != 0:
        raise DivergenceError(f"gmres did not converge (info={info})")
    return x


def solve_semilinear(dom: PerturbedBall | MeridianGrid, kind, e: EllipticityPair, p, init,
                     tol=1e-10, nr=64, ntheta=32, maxiter=60, grid=None) -> DiscreteSolution:
    """Positive solution of ``L u + u_+^p = 0`` in the domain, ``u = 0`` on its boundary.

    ``L`` is ``Q+`` (linear, plain Newton) or ``M+`` (semismooth Newton: the
    optimal coefficient pattern is recomputed from every iterate, the linear
    system for that pattern is solved, and the loop stops once the residual is
    below ``tol`` and the pattern no longer changes).

    Parameters
    ----------
    dom : PerturbedBall or MeridianGrid
        A prebuilt grid is used as is; otherwise one is built with ``nr x ntheta``.
    init : array or callable
        Seed grid function, or ``f(s, theta)`` evaluated on the mapped nodes.

    Raises
    ------
    DivergenceError
        Residual grew over five consecutive steps or ``maxiter`` was reached.
    PositivityError
        The limit is not positive inside, or the iterates collapsed toward zero.
    """
    grid = dom if isinstance(dom, MeridianGrid) else (grid or build_grid(dom, nr, ntheta))
    k = _kind(kind)
    if p <= 1:
        raise ConfigError("need p > 1")
    if callable(init):
        u = np.asarray(init(grid.s, grid.theta), dtype=float) * np.ones(grid.shape)
    else:
        u = np.array(init, dtype=float).reshape(grid.shape)
    u[-1] = 0.0
    if np.any(u[:-1] <= 0):
        raise ConfigError("seed must be strictly positive inside")
    eps = grid.domain.epsilon
    u0max = float(u.max())
    # the iterate and its residual live in extended precision, corrections are
    # computed in double (iterative refinement); in double alone the residual
    # stalls at eps * |u| / (r^2 dtheta^2) on the innermost ring
    u = u.ravel().astype(np.longdouble)
    interior = grid.nr * grid.ntheta
    plus = k in ("q+", "m+")
    policy = k.startswith("m")
    if not policy:
        fixed = _linear_coefficients(grid, e, minus=not plus)

    def operator(u):
        return _coefficients(grid, *pucci_policy(u, grid, e, plus)) if policy else fixed

    def residual(u, coef):
        G = _apply(grid, coef, u)
        G[:interior] += np.maximum(u[:interior], 0.0) ** p
        return G

    history = []
    L = operator(u)
    G = residual(u, L)
    history.append(float(np.max(np.abs(G))))
    growth, updates, it, stalled = 0, 0, 0, False
    pattern = _pattern(u, grid, e, plus) if policy else None
    fixed_point = not policy
    while True:
        # the residual is always taken with the optimal pattern for u, so it
        # measures the true extremal operator; the pattern is tracked only to
        # report whether the policy iteration reached its fixed point
        if history[-1] <= tol or stalled and history[-1] <= _rounding_floor(grid, L, u, p):
            break
        if it >= maxiter:
            raise DivergenceError(f"no convergence in {maxiter} iterations "
                                  f"(residual {history[-1]:.3e})", history, eps)
        it += 1
        upos = np.maximum(u[:interior], 0.0)
        d = np.zeros(grid.size)
        d[:interior] = (p * upos ** (p - 1)).astype(float)
        J = _with_dirichlet_rows(grid, _matrix(grid, L)) + sp.diags(d)
        step = _linear_solve(J, -G.astype(float))
        step[interior:] = 0.0  # Dirichlet rows: keep the boundary exactly zero
        t = 1.0
        while True:
            trial = u + t * step
            Lt = operator(trial)
            Gt = residual(trial, Lt)
            rt = float(np.max(np.abs(Gt)))
            if rt < history[-1] or t < 1 / 64:
                break
            t *= 0.5
        stalled = rt > 0.5 * history[-1]
        growth = growth + 1 if rt > history[-1] else 0
        u, L, G = trial, Lt, Gt
        history.append(rt)
        if policy:
            new = _pattern(u, grid, e, plus)
            fixed_point = bool(np.array_equal(new, pattern))
            updates += int(not fixed_point)
            pattern = new
        if not np.all(np.isfinite(u)):
            raise DivergenceError("iterate is not finite", history, eps)
        if growth >= 5:
            raise DivergenceError("residual grew over five consecutive steps", history, eps)
        if np.max(u) < 1e-6 * u0max:
            raise PositivityError("iterates collapsed onto the trivial solution", history, eps)

    U = u.reshape(grid.shape)
    if U[:-1].min() <= 0:
        raise PositivityError(f"limit is not positive inside (min {U[:-1].min():.3e})",
                              history, eps)
    if U.max() < 1e-6 * u0max:
        raise PositivityError("converged to the trivial solution", history, eps)
    return DiscreteSolution(grid, U, history[-1], it, k, e, float(p), history, updates,
                            fixed_point)


# --------------------------------------------------------------------------
# seeds, continuation and homotopy


def radial_seed(kind, e: EllipticityPair, N, p):
    """Dirichlet radial solution on the unit ball for the given operator, as ``f(s, theta)``.

    Raises
    ------
    SupercriticalError
        When the radial problem has no positive Dirichlet solution.
    """
    k = _kind(kind)
    if k in ("q+", "q-"):
        dim = e.dim_plus(N) if k == "q+" else e.dim_minus(N)
        # Q u = Lam_rr (u'' + (dim-1)/r u'); rescale the dimension-like profile
        a_rr = e.Lam if k == "q+" else e.lam
        prof = dirichlet_radial_solution(RadialProblem.dimlike(dim, p))
        scale = a_rr ** (1.0 / (p - 1))
    else:
        maker = RadialProblem.pucci_plus if k == "m+" else RadialProblem.pucci_minus
        prof = dirichlet_radial_solution(maker(N, e, p))
        scale = 1.0

    def f(s, theta):
        return scale * prof(np.clip(s, 0.0, 1.0)) + 0.0 * theta

    f.profile = prof
    f.scale = scale
    return f


@dataclass
class ContinuationReport:
    """Solutions along a decreasing list of amplitudes, with the distance to the ball."""

    epsilons: list
    solutions: list
    deltas: list
    baseline: DiscreteSolution

    def __iter__(self):
        return iter(self.solutions)

    def __len__(self):
        return len(self.solutions)

    def __getitem__(self, i):
        return self.solutions[i]

    @property
    def monotone(self):
        """``delta`` strictly decreasing along the (decreasing) amplitudes."""
        d = np.asarray(self.deltas)
        return bool(np.all(np.diff(d) < 0))

    def table(self):
        return [{"epsilon": eps, "delta": d, "residual": s.residual_norm, "iters": s.newton_iters}
                for eps, d, s in zip(self.epsilons, self.deltas, self.solutions)]


def continuation_in_epsilon(dom: PerturbedBall, kind, e: EllipticityPair, p,
                            eps_list: Sequence[float], nr=64, ntheta=32, tol=1e-10):
    """Solve on ``dom.with_epsilon(eps)`` for each amplitude, seeding from the previous one.

    The distance ``delta(eps) = max |u_eps - u_0|`` compares values node by node
    in mapped coordinates, against the discrete solution on the unperturbed grid
    of the same size.
    """
    eps_list = [float(x) for x in eps_list]
    if any(x < 0 for x in eps_list) or any(b > a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigError("amplitudes must be non-negative and decreasing")
    seed = radial_seed(kind, e, dom.N, p)
    base = solve_semilinear(build_grid(dom.with_epsilon(0.0), nr, ntheta), kind, e, p, seed, tol)
    sols, deltas = [], []
    prev = None
    for eps in eps_list:
        try:
            grid = build_grid(dom.with_epsilon(eps), nr, ntheta)
            init = seed if prev is None else prev.values
            sol = solve_semilinear(grid, kind, e, p, init, tol)
        except DivergenceError as exc:
            exc.epsilon = eps
            raise
        except GridError as exc:
            exc.epsilon = eps
            raise
        sols.append(sol)
        deltas.append(sol.sup_distance(base))
        prev = sol
        log.info("epsilon=%g delta=%.3e iters=%d", eps, deltas[-1], sol.newton_iters)
    rep = ContinuationReport(eps_list, sols, deltas, base)
    if len(deltas) > 1 and not rep.monotone:
        log.warning("delta(epsilon) is not decreasing: %s", deltas)
    return rep


def pucci_plus_threshold(e: EllipticityPair, N, tol=1e-2):
    """Critical exponent of the radial ``M+`` problem, computed by shooting."""
    if e.lam == e.Lam:
        return sobolev_exponent(N)
    prob = RadialProblem.pucci_plus(N, e, 2.0)
    return critical_exponent(prob, default_bracket(prob), tol=tol)


def _lane_emden_seed(Lam, N, p):
    prof = dirichlet_radial_solution(RadialProblem.dimlike(float(N), p))
    scale = Lam ** (1.0 / (p - 1))
    return lambda s, theta: scale * prof(np.clip(s, 0.0, 1.0)) + 0.0 * theta


def homotopy_in_s(e: EllipticityPair, N, p_target, dom: PerturbedBall, steps=8, nr=48,
                  ntheta=24, tol=1e-10, max_halvings=4, p_star=None):
    """Deform ``M+`` with constants ``(s, Lam)`` from ``s = Lam`` down to ``s = lam``.

    At ``s = Lam`` the operator is ``Lam`` times the Laplacian and the radial
    Lane-Emden solution seeds the solve. The exponent follows ``q(s)``, linear in
    ``s`` from ``min(p_target, 0.9 p*_N)`` to ``p_target``, clipped below
    ``0.95 p*_+(s)``. Each step is seeded by the previous solution; a failing step
    is retried with halved increments up to ``max_halvings`` times.

    Parameters
    ----------
    p_star : float, optional
        Precomputed threshold at ``s = lam``; computed by shooting when omitted.

    Raises
    ------
    SupercriticalError
        ``p_target`` is not below the threshold at ``s = lam``.
    HomotopyError
        A step failed even after refinement; ``s`` records where.
    """
    if dom.N != N:
        raise ConfigError(f"domain is in R^{dom.N}, got N={N}")
    upper = sobolev_exponent(e.dim_plus(N))
    if p_target >= upper:
        raise SupercriticalError(f"p={p_target} is not below the upper bound {upper:.6g}")
    p_star = pucci_plus_threshold(e, N) if p_star is None else p_star
    if p_target >= p_star:
        raise SupercriticalError(f"p={p_target} is not below the computed threshold {p_star:.6g}")
    lam, Lam = e.lam, e.Lam
    q_top = min(p_target, 0.9 * sobolev_exponent(N))
    thresholds = {}

    def q_of(s):
        if Lam == lam:
            return p_target
        q = q_top + (p_target - q_top) * (Lam - s) / (Lam - lam)
        if s > lam:
            if s not in thresholds:
                thresholds[s] = pucci_plus_threshold(EllipticityPair(s, Lam), N)
            q = min(q, 0.95 * thresholds[s])
        return q

    grid = build_grid(dom, nr, ntheta)
    q0 = q_of(Lam)
    try:
        sol = solve_semilinear(grid, "m+", EllipticityPair(Lam, Lam), q0,
                               _lane_emden_seed(Lam, N, q0), tol)
    except (DivergenceError, ConfigError) as exc:
        raise HomotopyError(f"Lane-Emden start failed: {exc}", Lam) from exc
    path = [(Lam, q0)]
    if Lam == lam:
        sol.path = path
        return sol

    targets = list(np.linspace(Lam, lam, steps + 1)[1:])
    s_cur = Lam
    halvings = 0
    while targets:
        s_next = targets[0]
        try:
            q = q_of(s_next)
            sol_next = solve_semilinear(grid, "m+", EllipticityPair(s_next, Lam), q, sol.values, tol)
        except (DivergenceError, ConfigError) as exc:
            if halvings >= max_halvings:
                raise HomotopyError(f"step to s={s_next:.6g} failed: {exc}", s_next) from exc
            halvings += 1
            targets.insert(0, 0.5 * (s_cur + s_next))
            log.info("halving homotopy step towards s=%g", s_next)
            continue
        targets.pop(0)
        sol, s_cur = sol_next, s_next
        path.append((s_cur, q))
    sol.path = path
    return sol


# --------------------------------------------------------------------------
# serialization


def write_solution(path, sol: DiscreteSolution, extra=None):
    """Columnar text ``r theta u`` with a JSON parameter header."""
    header = dict(sol.params())
    header.update({"residual": sol.residual_norm, "iters": sol.newton_iters})
    if extra:
        header.update(extra)
    cols = np.column_stack([sol.grid.r.ravel(), sol.grid.theta.ravel(), sol.values.ravel()])
    np.savetxt(path, cols, fmt="%.17g", header=json.dumps(header, sort_keys=True) + "\nr theta u")


def read_solution(path):
    """Inverse of :func:`write_solution`: ``(header dict, array of shape (n, 3))``."""
    with open(path) as fh:
        first = fh.readline()
    header = json.loads(first.lstrip("#").strip())
    return header, np.loadtxt(path, comments="#")
