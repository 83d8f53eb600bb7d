import math

import numpy as np
import pytest

from mmrev import equilibrium as eqm
from mmrev.equilibrium import (BracketNotFound, Shot, Trajectory, c_from_c_hat, compare_to_limit,
                               default_s_max, find_ground_eigenvalue, potential, seed_from_v_tau, shoot,
                               solve_equilibrium, theta_from_m, write_csv)
from mmrev.lattice import ValueSurface
from mmrev.model import ScaledParams


def _p(A=0.9, kappa=0.3, sigma=0.3):
    return ScaledParams(A_s=A, kappa_s=kappa, sigma_s=sigma, mu_s=1.0, T_s=1.0)


def test_potential_values():
    p = _p()
    M = p.constants.M
    assert potential(0.0, p) == pytest.approx(4 * M / p.sigma_s ** 2, rel=1e-15)
    x = np.linspace(-2, 2, 9)
    assert np.allclose(potential(x, p), potential(-x, p), rtol=1e-15)
    h = _p(A=0.0)
    assert np.allclose(potential(x, h), x ** 2 / h.sigma_s ** 4, rtol=1e-15)


def test_harmonic_ground_state_shape():
    p = _p(A=0.0)
    c = 1.0 / p.sigma_s ** 2
    s_max = default_s_max(p, c)
    tr = shoot(c, p, s_max, s_max / 20000)
    # at the exact eigenvalue rounding decides the far tail; the decaying
    # branch must hold well past the stationary width
    assert np.all(tr.m[tr.x < 5 * p.sigma_s] > 0)
    keep = tr.x < 4 * p.sigma_s
    exact = np.exp(-tr.x[keep] ** 2 / (2 * p.sigma_s ** 2))
    assert np.max(np.abs(tr.m[keep] - exact)) < 1e-8


def test_harmonic_excited_energy_crosses():
    p = _p(A=0.0)
    c = 3.5 / p.sigma_s ** 2
    assert shoot(c, p, default_s_max(p, c), default_s_max(p, c) / 20000).outcome is Shot.CROSSES_ZERO


def test_sub_ground_energy_diverges_positive():
    p = _p()
    c = potential(0.0, p)
    tr = shoot(c, p, default_s_max(p, c), default_s_max(p, c) / 20000)
    assert tr.outcome is Shot.DIVERGES_POSITIVE
    assert np.all(tr.m > 0)


def test_harmonic_eigenvalue():
    for sigma in (0.3, 1.0):
        p = _p(A=0.0, sigma=sigma)
        c = find_ground_eigenvalue(p)
        assert c * sigma ** 2 - 1 == pytest.approx(0.0, abs=1e-8)
        assert c_from_c_hat(c, p) == pytest.approx(0.0, abs=1e-8)


def test_eigenvalue_above_potential_minimum_and_monotone_in_flow():
    cs = []
    for A in (0.3, 0.9, 2.7):
        p = _p(A=A)
        c = find_ground_eigenvalue(p)
        assert c > potential(0.0, p)
        cs.append(c)
    assert cs[0] < cs[1] < cs[2]


def test_seed_round_trip():
    p = _p()
    assert c_from_c_hat(seed_from_v_tau(0.123, p), p) == pytest.approx(0.123, rel=1e-13)


def test_shooting_residual():
    p = _p()
    c = find_ground_eigenvalue(p)
    s_max = default_s_max(p, c)
    h = s_max / 20000
    tr = shoot(c, p, s_max, h)
    x, m = tr.x, tr.m
    keep = slice(1, int(np.searchsorted(x, 5 * p.sigma_s / math.sqrt(2))))
    d2 = (m[2:] - 2 * m[1:-1] + m[:-2]) / h ** 2
    V = potential(x[1:-1], p)
    res = d2 - (V - c) * m[1:-1]
    assert np.max(np.abs(res[keep]) / (1 + V[keep])) <= 1e-6


def test_theta_even_and_centered():
    eq = solve_equilibrium(_p())
    assert np.array_equal(eq.theta_values, eq.theta_values[::-1])
    assert eq.theta_values[len(eq.x) // 2] == 0.0
    assert np.all(eq.m_values > 0)
    assert eq.theta_at(eq.mu) == 0.0


def test_harmonic_theta_vanishes():
    eq = solve_equilibrium(_p(A=0.0))
    assert np.max(np.abs(eq.theta_values)) < 1e-5


def test_theta_requires_positive_m():
    tr = Trajectory(np.array([0.0, 0.1]), np.array([1.0, -0.1]), np.zeros(2), Shot.CROSSES_ZERO, 1.0)
    with pytest.raises(ValueError):
        theta_from_m(tr, _p())


def _snapshot_from_theta(eq, s, offset=0.7):
    vals = np.zeros((3, len(s)))
    vals[1] = eq.theta_at(s) + offset
    return ValueSurface(50.0, vals)


def test_compare_to_itself_is_zero():
    p = _p()
    eq = solve_equilibrium(p)
    s = np.linspace(eq.s[0], eq.s[-1], 101)
    snap = _snapshot_from_theta(eq, s)
    assert compare_to_limit(snap, s, eq) < 1e-15


def test_window_shrinking_is_monotone():
    p = _p()
    eq = solve_equilibrium(p)
    s = np.linspace(eq.s[0], eq.s[-1], 101)
    vals = np.zeros((3, len(s)))
    vals[1] = np.cos(3 * (s - eq.mu)) + (s - eq.mu) ** 3
    snap = ValueSurface(50.0, vals)
    errs = [compare_to_limit(snap, s, eq, f) for f in (1.0, 0.8, 0.5, 0.2)]
    assert all(a >= b for a, b in zip(errs, errs[1:]))
    with pytest.raises(ValueError):
        compare_to_limit(snap, s, eq, 0.0)


def test_bracket_failure_reports_history(monkeypatch):
    def never(self, c, keep=False):
        return Trajectory(np.zeros(1), np.ones(1), np.zeros(1), Shot.DECAYS, c)

    monkeypatch.setattr(eqm._Shooter, "shoot", never)
    with pytest.raises(BracketNotFound, match="tried"):
        find_ground_eigenvalue(_p())


def test_needs_mean_reversion():
    p = ScaledParams(A_s=1.0, kappa_s=1.0, sigma_s=0.3, mu_s=0.0, T_s=1.0, drift=0.0)
    with pytest.raises(ValueError):
        solve_equilibrium(p)


def test_write_csv_columns(tmp_path):
    p = _p()
    eq = solve_equilibrium(p)
    s = np.linspace(eq.s[0], eq.s[-1], 51)
    f = tmp_path / "eq.csv"
    write_csv(f, eq, _snapshot_from_theta(eq, s), s, header="x", gamma=0.01)
    lines = f.read_text().splitlines()
    assert lines[0] == "# x" and lines[1] == "s,m,theta,v_limit_sdep,error"
    first = [float(v) for v in lines[2].split(",")]
    assert first[0] == pytest.approx(eq.s[0] / 0.01)
