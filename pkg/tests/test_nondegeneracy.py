import logging
import math

import numpy as np
import pytest

import oracles
from pucci_lab.errors import ConfigError, InvalidBaseError
from pucci_lab.nondegeneracy import (ModeProblem, indicial_exponent, mode_nondegeneracy,
                                     mode_sweep, radial_nondegeneracy, scaling_mode,
                                     scaling_mode_residual, sphere_eigenvalue,
                                     sturm_cross_check)
from pucci_lab.operators import EllipticityPair
from pucci_lab.radial import RadialProblem, dirichlet_radial_solution

E12 = EllipticityPair(1.0, 2.0)


@pytest.fixture(scope="module")
def base3():
    return dirichlet_radial_solution(RadialProblem.dimlike(3.0, 3.0))


@pytest.fixture(scope="module")
def base_n4():
    # Q+ with N = 4, (1, 2): dimension-like number 2.5
    return dirichlet_radial_solution(RadialProblem.dimlike(E12.dim_plus(4), 3.0))


def test_sphere_eigenvalues():
    assert sphere_eigenvalue(0, 3) == 0.0
    assert sphere_eigenvalue(1, 3) == -2.0
    assert sphere_eigenvalue(2, 3) == -6.0
    assert sphere_eigenvalue(3, 5) == -18.0
    with pytest.raises(ConfigError):
        sphere_eigenvalue(-1, 3)


def test_indicial_exponent():
    s = indicial_exponent(3.0, -1.5)
    assert s == pytest.approx((-1 + math.sqrt(7)) / 2, rel=1e-14)
    assert s * (s - 1) + 2 * s - 1.5 == pytest.approx(0.0, abs=1e-14)
    # flat Laplacian in R^3, k = 1: r^1
    assert indicial_exponent(3.0, -2.0) == pytest.approx(1.0)


def test_radial_mode_matches_oracle(base3):
    rep = radial_nondegeneracy(base3, 3.0, 3.0)
    ref, err = oracles.richardson(lambda n: oracles.h_at_one(3.0, 3.0, base3.values[0],
                                                             n_per_unit=n), 400)
    assert err < 1e-8
    assert rep.h_at_1 == pytest.approx(ref, abs=1e-8 * rep.max_abs)
    assert rep.nondegenerate


def test_radial_mode_is_the_scaling_derivative(base3):
    # h1 = v + (p-1)/2 r v' solves the same equation, so h = h1 / v(0)
    rep = radial_nondegeneracy(base3, 3.0, 3.0)
    h1, _ = scaling_mode(base3, 3.0, 3.0, np.array([0.0, 1.0]))
    assert h1[0] == pytest.approx(base3.values[0])
    assert h1[1] == pytest.approx(base3.derivs[-1], rel=1e-12)
    assert rep.h_at_1 == pytest.approx(h1[1] / h1[0], rel=1e-7)
    assert h1[1] < 0
    assert scaling_mode_residual(base3, 3.0, 3.0) < 1e-6


def test_potential_scan_detects_a_degenerate_value(base3):
    mus = np.linspace(0.5, 2.0, 16)
    h = [radial_nondegeneracy(base3, 3.0, 3.0, mu=m).h_at_1 for m in mus]
    assert np.any(np.sign(h[:-1]) != np.sign(h[1:]))


def test_bad_base_rejected(base3):
    with pytest.raises(InvalidBaseError):
        radial_nondegeneracy(base3, 3.0, 2.5)


def test_modes_match_oracle(base_n4):
    d = E12.dim_plus(4)
    for k in (1, 2, 3):
        mp = ModeProblem(k, 4, E12, 3.0, base_n4)
        rep = mode_nondegeneracy(mp)
        assert rep.sigma == pytest.approx(indicial_exponent(d, -0.5 * k * (k + 2)))
        r0 = 1e-6
        r, a = oracles.mode_amplitude(d, 3.0, base_n4.values[0], mp.angular_coefficient,
                                      rep.sigma, r0=r0, n_per_unit=800)
        assert rep.a(1.0)[0] == pytest.approx(a[-1], rel=1e-6)
        assert rep.nondegenerate and rep.ratio > 1e-3


def test_mode_zero_rejected(base_n4):
    with pytest.raises(ConfigError):
        mode_nondegeneracy(ModeProblem(0, 4, E12, 3.0, base_n4))
    with pytest.raises(ConfigError):
        ModeProblem(1.5, 4, E12, 3.0, base_n4)


def test_low_dimension_warns(caplog):
    base = dirichlet_radial_solution(RadialProblem.dimlike(E12.dim_plus(3), 3.0))
    with caplog.at_level(logging.WARNING, logger="pucci_lab.nondegeneracy"):
        rep = mode_nondegeneracy(ModeProblem(1, 3, E12, 3.0, base))
    assert "<= 2" in caplog.text
    assert np.isfinite(rep.a_at_1)


def test_sturm_comparison(base_n4):
    for k in (1, 2):
        rep = sturm_cross_check(ModeProblem(k, 4, E12, 3.0, base_n4))
        assert rep, rep.messages
        assert rep.first_zero is None
        assert rep.wronskian_defect < 1e-6 and rep.w_residual < 1e-6


def test_mode_sweep(base_n4):
    reports = mode_sweep(base_n4, 4, E12, 3.0, kmax=6)
    assert [r.k for r in reports] == list(range(1, 7))
    assert all(r.nondegenerate for r in reports)
    # a_k(1) keeps the sign of a_k near the origin: no zero crossing
    assert all(r.a_at_1 > 0 for r in reports)
