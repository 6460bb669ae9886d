import numpy as np
import pytest

import oracles
from pucci_lab.domain import (PerturbedBall, build_grid, continuation_in_epsilon,
                              discrete_laplacian, discretize_q_plus, hessian_eigenvalues,
                              homotopy_in_s, pucci_fd_apply, radial_seed, read_solution,
                              solve_semilinear, write_solution)
from pucci_lab.errors import (ConfigError, DivergenceError, GridError, PositivityError,
                              SupercriticalError)
from pucci_lab.operators import EllipticityPair, pucci_plus

E12 = EllipticityPair(1.0, 2.0)


def ball(eps=0.0, N=3, shape="cos2"):
    return PerturbedBall.from_shape(N, eps, shape)


# -- smooth axisymmetric test function with a closed-form Hessian ------------
# f = exp(a z) (1 - b |x|^2), z the axis coordinate
A, B = 0.5, 0.3


def f_cart(x):
    return np.exp(A * x[-1]) * (1 - B * np.dot(x, x))


def f_polar(r, theta):
    return np.exp(A * r * np.cos(theta)) * (1 - B * r**2)


def f_hessian(r, theta, N=3):
    """Full N x N Hessian at the meridian point (r sin t, 0, ..., r cos t)."""
    x = np.zeros(N)
    x[0], x[-1] = r * np.sin(theta), r * np.cos(theta)
    q, z, ez = x @ x, x[-1], np.exp(A * x[-1])
    H = -2 * B * ez * np.eye(N)
    H[:-1, -1] = H[-1, :-1] = -2 * A * B * x[:-1] * ez
    H[-1, -1] = A**2 * ez * (1 - B * q) - 4 * A * B * z * ez - 2 * B * ez
    return H, x


def exact_on_grid(grid, fn):
    out = np.empty((grid.nr, grid.ntheta))
    for i in range(grid.nr):
        for j in range(grid.ntheta):
            out[i, j] = fn(*f_hessian(grid.r[i, j], grid.theta[i, j], grid.domain.N))
    return out


def q_plus_exact(H, x, e=E12):
    xh = x / np.linalg.norm(x)
    return e.lam * np.trace(H) + (e.Lam - e.lam) * xh @ H @ xh


# -- grids --------------------------------------------------------------------

def test_unperturbed_grid_is_polar():
    g = build_grid(ball(), 16, 16)
    np.testing.assert_allclose(g.r, g.s)
    assert np.all(g.r[-1] == 1.0)
    assert g.h == pytest.approx(1 / 16.5)
    assert g.interior.sum() == 16 * 16


def test_perturbed_grid_is_boundary_fitted():
    dom = ball(0.05)
    g = build_grid(dom, 32, 16)
    np.testing.assert_allclose(g.r[-1], dom.rho(g.theta[-1]), rtol=1e-14)
    assert np.all(np.diff(g.r, axis=0) > 0)
    assert dom.nesting_radii() == pytest.approx((0.95, 1.05), abs=1e-5)


def test_grid_rejections():
    wavy = PerturbedBall(3, 0.9, lambda t: np.cos(6 * t), "cos6")
    with pytest.raises(GridError) as info:
        build_grid(wavy, 32, 32)
    assert info.value.epsilon == 0.9
    with pytest.raises(ConfigError):
        build_grid(ball(), 8, 16)
    with pytest.raises(ConfigError):
        PerturbedBall(3, 0.1, lambda t: 2 * np.cos(t))
    with pytest.raises(GridError):
        PerturbedBall.from_shape(3, 1.0, "cos2")


# -- discrete operators -------------------------------------------------------

@pytest.mark.parametrize("N", [3, 4])
def test_quadratics_on_the_ball(N):
    g = build_grid(ball(N=N), 32, 16)
    u = 1 - g.r**2
    L = discretize_q_plus(g, E12)
    out = (L @ u.ravel())[: g.nr * g.ntheta]
    np.testing.assert_allclose(out, -2 * N - 2, atol=1e-9)
    np.testing.assert_allclose(pucci_fd_apply(u, g, E12), -2.0 * N, atol=1e-9)
    np.testing.assert_allclose(pucci_fd_apply(g.r**2 / 2, g, E12), 2.0 * N, atol=1e-9)
    np.testing.assert_allclose(pucci_fd_apply(g.r**2 / 2, g, E12, plus=False), 1.0 * N, atol=1e-9)


def test_equal_constants_give_scaled_laplacian():
    g = build_grid(ball(0.05), 32, 16)
    e = EllipticityPair(1.5, 1.5)
    Q = discretize_q_plus(g, e)
    Lap = discrete_laplacian(g)
    n = g.nr * g.ntheta
    assert abs(Q[:n] - 1.5 * Lap[:n]).max() < 1e-9 * abs(Lap).max()
    assert abs(Q[n:] - Lap[n:]).max() == 0


# The stencils carry 1/r and 1/r^2 metric factors, so their truncation error is
# O(h^2 / r): first order on the innermost ring, second order on any fixed
# annulus. The orders below are measured on r >= 0.25 (the solution error itself
# is second order everywhere, see the solve tests).

def _annulus(g):
    return g.s[:-1] >= 0.25


def test_q_plus_second_order_on_perturbed_grid():
    errs = []
    for nr in (32, 64):
        g = build_grid(ball(0.05), nr, nr // 2)
        u = g.sample(f_polar)
        num = (discretize_q_plus(g, E12) @ u.ravel())[: g.nr * g.ntheta].reshape(g.nr, g.ntheta)
        errs.append(np.max(np.abs(num - exact_on_grid(g, q_plus_exact))[_annulus(g)]))
    assert errs[1] < 1e-2
    assert np.log2(errs[0] / errs[1]) > 1.8


def test_pucci_second_order_on_perturbed_grid():
    errs = []
    for nr in (32, 64):
        g = build_grid(ball(0.05), nr, nr // 2)
        u = g.sample(f_polar)
        ex = exact_on_grid(g, lambda H, x: pucci_plus(H, E12))
        errs.append(np.max(np.abs(pucci_fd_apply(u, g, E12) - ex)[_annulus(g)]))
    assert np.log2(errs[0] / errs[1]) > 1.8


def test_eigenvalues_match_cartesian_oracle():
    rng = np.random.default_rng(3)
    errs = []
    for nr in (32, 64):
        g = build_grid(ball(0.05), nr, nr // 2)
        eig = hessian_eigenvalues(g.sample(f_polar), g)
        rows = np.nonzero(g.s[:-1, 0] >= 0.25)[0]
        err = 0.0
        for i, j in zip(rng.choice(rows, 20), rng.integers(0, g.ntheta, 20)):
            r, t = g.r[i, j], g.theta[i, j]
            x = np.array([r * np.sin(t), 0.0, r * np.cos(t)])
            ref = np.linalg.eigvalsh(oracles.cartesian_hessian(f_cart, x, 1e-4))
            err = max(err, np.max(np.abs(np.sort(eig[i, j]) - ref)))
        errs.append(err)
    assert errs[1] < 5e-3 and errs[1] < errs[0] / 3


def test_radial_profile_solves_the_discrete_equation():
    seed = radial_seed("m+", E12, 3, 3.0)
    errs = []
    for nr in (32, 64, 128):
        g = build_grid(ball(), nr, 16)
        u = g.sample(lambda r, t: seed(r, t))
        errs.append(np.max(np.abs(pucci_fd_apply(u, g, E12) + u[:-1] ** 3)))
    assert errs[2] < errs[1] < errs[0]
    assert np.log2(errs[1] / errs[2]) > 1.5


@pytest.mark.parametrize("eps", [0.0, 0.05])
def test_inverse_positivity(eps):
    g = build_grid(ball(eps), 16, 16)
    Linv = np.linalg.inv(discretize_q_plus(g, E12).toarray())
    n = g.nr * g.ntheta
    # L u = f with f <= 0 inside and u = 0 on the boundary gives u >= 0
    assert np.min(-Linv[:, :n]) >= -1e-12 * np.max(np.abs(Linv))


def test_discrete_sandwich():
    rng = np.random.default_rng(11)
    g = build_grid(ball(0.05), 32, 16)
    n = g.nr * g.ntheta
    Q = discretize_q_plus(g, E12)
    for _ in range(5):
        c = rng.normal(size=4)
        u = g.sample(lambda r, t: c[0] + c[1] * r**2 * np.cos(t) + c[2] * r**3 + c[3] * np.sin(r * t))
        q = (Q @ u.ravel())[:n].reshape(g.nr, g.ntheta)
        lo, hi = pucci_fd_apply(u, g, E12, plus=False), pucci_fd_apply(u, g, E12)
        tol = 1e-8 * max(1.0, np.max(np.abs(hi)))
        assert np.all(lo - tol <= q) and np.all(q <= hi + tol)


# -- nonlinear solves ---------------------------------------------------------

def test_solve_on_ball_converges_to_radial_solution():
    seed = radial_seed("q+", E12, 3, 4.0)
    errs = []
    for nr in (32, 64):
        g = build_grid(ball(), nr, nr // 2)
        sol = solve_semilinear(g, "q+", E12, 4.0, seed, tol=1e-10)
        assert sol.residual_norm <= 1e-10 and sol.interior_min > 0
        errs.append(np.max(np.abs(sol.values - g.sample(seed))))
    assert np.log2(errs[0] / errs[1]) > 1.8


def test_pucci_solve_reaches_policy_fixed_point():
    sol = solve_semilinear(ball(0.05, N=4), "m+", E12, 3.0, radial_seed("m+", E12, 4, 3.0),
                           nr=32, ntheta=16)
    assert sol.policy_fixed and sol.residual_norm <= 1e-10
    assert np.all(sol.values[:-1] > 0) and np.all(sol.values[-1] == 0)
    r = pucci_fd_apply(sol.values, sol.grid, E12) + sol.values[:-1] ** 3
    assert np.max(np.abs(r)) <= 1e-9


def test_bad_seeds_and_supercritical_evidence():
    g = build_grid(ball(N=4), 32, 16)
    with pytest.raises(ConfigError):
        solve_semilinear(g, "q+", E12, 4.0, np.zeros(g.shape))
    with pytest.raises(ConfigError):
        solve_semilinear(g, "nope", E12, 4.0, np.ones(g.shape))
    with pytest.raises(SupercriticalError):
        radial_seed("q+", E12, 4, 12.0)
    # p = 12 is above the Q+ threshold 9: Newton from a scaled seed gets nowhere.
    # Evidence only; at 32x16 the discrete problem still has a solution
    g = build_grid(ball(N=4), 64, 32)
    with pytest.raises((DivergenceError, PositivityError)):
        solve_semilinear(g, "q+", E12, 12.0, radial_seed("q+", E12, 4, 8.0))


def test_continuation_small_grid():
    rep = continuation_in_epsilon(ball(), "q+", E12, 4.0, [0.1, 0.05, 0.025], nr=32, ntheta=16)
    assert len(rep) == 3 and rep.monotone
    assert all(s.interior_min > 0 for s in rep)
    rep0 = continuation_in_epsilon(ball(), "q+", E12, 4.0, [0.0], nr=32, ntheta=16)
    assert rep0.deltas[0] < 1e-12
    with pytest.raises(ConfigError):
        continuation_in_epsilon(ball(), "q+", E12, 4.0, [0.01, 0.05])


def test_homotopy_equal_constants_is_one_solve():
    e = EllipticityPair(2.0, 2.0)
    sol = homotopy_in_s(e, 3, 3.0, ball(0.05), nr=32, ntheta=16)
    assert sol.path == [(2.0, 3.0)]
    direct = solve_semilinear(sol.grid, "m+", e, 3.0, sol.values.astype(float) * 1.1)
    assert sol.sup_distance(direct) < 1e-9


def test_homotopy_rejects_supercritical_target():
    with pytest.raises(SupercriticalError):
        homotopy_in_s(E12, 4, 9.0, ball(0.05, N=4), nr=32, ntheta=16)
    with pytest.raises(SupercriticalError):
        homotopy_in_s(E12, 4, 8.0, ball(0.05, N=4), nr=32, ntheta=16, p_star=7.5)
    with pytest.raises(ConfigError):
        homotopy_in_s(E12, 4, 3.0, ball(0.05, N=3))


def test_solution_round_trip(tmp_path):
    sol = solve_semilinear(ball(0.05), "q+", E12, 4.0, radial_seed("q+", E12, 3, 4.0),
                           nr=32, ntheta=16)
    path = tmp_path / "u.txt"
    write_solution(path, sol, {"note": "test"})
    header, cols = read_solution(path)
    assert header["epsilon"] == 0.05 and header["note"] == "test" and header["kind"] == "q+"
    np.testing.assert_array_equal(cols[:, 2], sol.values.astype(float).ravel())
    np.testing.assert_array_equal(cols[:, 0], sol.grid.r.ravel())
    assert path.read_text().splitlines()[1] == "# r theta u"
