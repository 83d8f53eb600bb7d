import math

import numpy as np
import pytest
from scipy.linalg import eigh_tridiagonal

from mmrev.lattice import ValueSurface, build_lattice, terminal_condition
from mmrev.model import ModelParams, ScaledParams, scale_params
from mmrev.policy import (baseline_table, bounded_inventory_limits, constant_model_limits, extract_policy,
                          gueant_asymptotic_spreads, gueant_matrix, linear_utility_limits, q_insensitivity,
                          s_insensitivity, scaled_constant_limits, smallest_eigenpair, spread_sum_defect,
                          sturm_count, zhang_small_kappa_limits)


@pytest.fixture
def sp():
    return ScaledParams(A_s=2.0, kappa_s=0.75, sigma_s=0.8, mu_s=2.0, T_s=1.0)


@pytest.fixture
def lat(sp):
    return build_lattice(sp, 5, 6, 0.01, 1.0, n_s=21)


def test_constant_model_surface_gives_constant_prices(sp, lat):
    h = math.log(1 + 1 / sp.kappa_s)
    for c, tau in ((0.3, 1.0), (-2.0, 7.5)):
        vals = np.repeat((lat.q * sp.mu_s + c * tau)[:, None], lat.n_s, axis=1).astype(float)
        pol = extract_policy(ValueSurface(tau, vals), sp, lat.s)
        assert np.nanmax(np.abs(pol.ask_price - (sp.mu_s + h))) < 1e-13
        assert np.nanmax(np.abs(pol.bid_price - (sp.mu_s - h))) < 1e-13


def test_terminal_policy(sp, lat):
    pol = extract_policy(terminal_condition(lat), sp, lat.s)
    h = math.log(1 + 1 / sp.kappa_s)
    assert np.nanmax(np.abs(pol.ask_spread - h)) < 1e-13
    assert np.nanmax(np.abs(pol.bid_spread - h)) < 1e-13
    assert np.nanmax(np.abs(pol.ask_price - (lat.s + h))) < 1e-13


def test_closed_sides_at_bounds(sp, lat):
    pol = extract_policy(terminal_condition(lat), sp, lat.s)
    assert np.all(np.isnan(pol.ask_price[0])) and np.all(np.isnan(pol.bid_price[-1]))
    assert np.all(np.isfinite(pol.ask_price[1:])) and np.all(np.isfinite(pol.bid_price[:-1]))


def test_spread_sum_identity(sp, lat):
    rng = np.random.default_rng(3)
    v = rng.normal(size=(lat.n_q, lat.n_s))
    pol = extract_policy(v, sp, lat.s)
    assert spread_sum_defect(pol, v, sp) <= 1e-12


def test_invariance_under_s_offset(sp, lat):
    rng = np.random.default_rng(4)
    v = rng.normal(size=(lat.n_q, lat.n_s))
    off = rng.normal(size=lat.n_s)
    a = extract_policy(v, sp, lat.s)
    b = extract_policy(v + off[None, :], sp, lat.s)
    assert np.nanmax(np.abs(a.ask_price - b.ask_price)) < 1e-12
    assert np.nanmax(np.abs(a.bid_price - b.bid_price)) < 1e-12


def test_rejects_nonfinite(sp, lat):
    v = np.zeros((lat.n_q, lat.n_s))
    v[2, 3] = np.nan
    with pytest.raises(ValueError):
        extract_policy(v, sp, lat.s)


def test_constant_model_limits_example():
    a, b = constant_model_limits(ModelParams(A=10, kappa=5, gamma=0.005, sigma=0.05, mu=1, alpha=1, T=1))
    assert a == pytest.approx(1.199900, abs=5e-7)
    assert b == pytest.approx(0.800100, abs=5e-7)


def test_constant_model_limits_limits():
    p = ModelParams(A=1, kappa=2.0, gamma=1e-9, sigma=0.1, mu=1, alpha=1, T=1)
    assert constant_model_limits(p) == pytest.approx(linear_utility_limits(p), abs=1e-8)
    big = ModelParams(A=1, kappa=1e12, gamma=1.0, sigma=0.1, mu=1, alpha=1, T=1)
    assert constant_model_limits(big) == pytest.approx((1.0, 1.0), abs=1e-11)
    with pytest.raises(ValueError):
        constant_model_limits(ModelParams(A=1, kappa=1, gamma=0.0, sigma=0.1, mu=1, alpha=1, T=1))


def test_linear_utility_example():
    a, b = linear_utility_limits(ModelParams(A=1, kappa=1.5, gamma=0, sigma=0.1, mu=1, alpha=1, T=1))
    assert a == pytest.approx(1.666667, abs=5e-7) and b == pytest.approx(0.333333, abs=5e-7)
    a, b = linear_utility_limits(ModelParams(A=1, kappa=1e12, gamma=0, sigma=0.1, mu=1, alpha=1, T=1))
    assert a == pytest.approx(1.0, abs=1e-11) and b == pytest.approx(1.0, abs=1e-11)


def test_bounded_inventory_example():
    p = ScaledParams(A_s=1.0, kappa_s=1.0, sigma_s=0.0, mu_s=0.0, T_s=1.0)
    _, bid = bounded_inventory_limits(p, 1, 0)
    assert bid == pytest.approx(-math.log(2) + math.log(math.sin(3 * math.pi / 4)), abs=1e-15)
    assert bid == pytest.approx(-1.039721, abs=5e-7)


def test_bounded_inventory_symmetry_and_domain():
    p = ScaledParams(A_s=1.0, kappa_s=0.6, sigma_s=0.0, mu_s=0.4, T_s=1.0)
    Q = 5
    for q in range(-Q + 1, Q):
        a, _ = bounded_inventory_limits(p, Q, q)
        _, b = bounded_inventory_limits(p, Q, -q)
        assert a - p.mu_s == pytest.approx(-(b - p.mu_s), abs=1e-14)
    assert math.isnan(bounded_inventory_limits(p, Q, -Q)[0])
    assert math.isnan(bounded_inventory_limits(p, Q, Q)[1])
    with pytest.raises(ValueError):
        bounded_inventory_limits(p, Q, Q + 1)


def test_bounded_inventory_large_q_cap_limit():
    p = ScaledParams(A_s=1.0, kappa_s=0.6, sigma_s=0.0, mu_s=0.4, T_s=1.0)
    a, b = bounded_inventory_limits(p, 100000, 3)
    ca, cb = scaled_constant_limits(p)
    assert a == pytest.approx(ca, abs=1e-8) and b == pytest.approx(cb, abs=1e-8)


def test_zhang_examples():
    p = ScaledParams(A_s=10.0, kappa_s=6.0, sigma_s=0.02, mu_s=0.3, T_s=1.0)
    a, _ = zhang_small_kappa_limits(p, 0)
    assert a == pytest.approx(math.log(7 / 6) + 0.3 + 1e-4, abs=1e-15)
    asks, _ = zhang_small_kappa_limits(p, np.arange(-5, 6))
    assert np.allclose(np.diff(asks), -0.02 ** 2 / 2, atol=1e-15)
    flat = ScaledParams(A_s=10.0, kappa_s=6.0, sigma_s=0.0, mu_s=0.3, T_s=1.0)
    assert zhang_small_kappa_limits(flat, 4) == pytest.approx(scaled_constant_limits(flat), abs=1e-15)


def test_sturm_count_matches_eigensolver():
    rng = np.random.default_rng(0)
    d, e = rng.normal(size=9), rng.normal(size=8)
    w = eigh_tridiagonal(d, e, eigvals_only=True)
    for x in (-3.0, -0.5, 0.0, 0.7, 3.0):
        assert sturm_count(d, e, x) == int(np.sum(w < x))


def test_smallest_eigenpair_against_scipy():
    rng = np.random.default_rng(1)
    d, e = rng.uniform(0, 2, size=15), -rng.uniform(0.1, 1, size=14)
    lam, x = smallest_eigenpair(d, e)
    w, V = eigh_tridiagonal(d, e)
    assert lam == pytest.approx(w[0], abs=1e-12)
    assert np.allclose(x, V[:, 0] * np.sign(V[np.argmax(np.abs(V[:, 0])), 0]), atol=1e-10)


def _brownian(**kw):
    base = dict(A=2.0, kappa=1.5, gamma=2.0, sigma=0.4, mu=1.0, alpha=0.0, T=1.0)
    base.update(kw)
    return ModelParams(**base)


def test_gueant_q1_sigma0_by_hand():
    p = _brownian(sigma=0.0)
    ask, bid = gueant_asymptotic_spreads(p, 1)
    base = math.log(1 + p.gamma / p.kappa) / p.gamma
    # ground state of -eta * path(3) is (1, sqrt 2, 1)
    assert bid[1] - base == pytest.approx(math.log(math.sqrt(2)) / p.kappa, abs=1e-12)
    assert ask[1] - base == pytest.approx(math.log(math.sqrt(2)) / p.kappa, abs=1e-12)


def test_gueant_q3_sigma0_direct_eigensolve():
    p = _brownian(sigma=0.0)
    d, e = gueant_matrix(p, 3)
    w, V = eigh_tridiagonal(d, e)
    f = np.abs(V[:, 0])
    ask, bid = gueant_asymptotic_spreads(p, 3)
    base = math.log(1 + p.gamma / p.kappa) / p.gamma
    assert np.allclose(bid[:-1], base + np.log(f[:-1] / f[1:]) / p.kappa, atol=1e-10)
    assert np.allclose(ask[1:], base + np.log(f[1:] / f[:-1]) / p.kappa, atol=1e-10)


def test_gueant_symmetry():
    ask, bid = gueant_asymptotic_spreads(_brownian(), 6)
    assert np.allclose(bid[:-1], ask[::-1][:-1], atol=1e-12)
    with pytest.raises(ValueError):
        gueant_asymptotic_spreads(_brownian(alpha=1.0), 3)


def test_insensitivity_metrics(sp, lat):
    h = math.log(1 + 1 / sp.kappa_s)
    vals = np.repeat((lat.q * sp.mu_s)[:, None], lat.n_s, axis=1).astype(float)
    pol = extract_policy(ValueSurface(1.0, vals), sp, lat.s)
    assert s_insensitivity(pol, 3) < 1e-13
    assert q_insensitivity(pol, 3, sp.mu_s + h) < 1e-13
    pol0 = extract_policy(terminal_condition(lat), sp, lat.s)
    assert s_insensitivity(pol0, 3) == pytest.approx((lat.s_max - lat.s_min) / 2, rel=1e-12)


def test_baseline_table_units(medium_a):
    sp = scale_params(medium_a)
    lat = build_lattice(sp, 5, 4, 0.01, 1.0, n_s=11)
    tab = baseline_table(medium_a, lat)
    assert set(tab) == {"constant", "bounded", "zhang", "linear"}
    ca, cb = constant_model_limits(medium_a)
    assert tab["constant"][0][0] / medium_a.gamma == pytest.approx(ca, rel=1e-14)
    la, _ = linear_utility_limits(medium_a)
    assert tab["linear"][0][2] / medium_a.gamma == pytest.approx(la, rel=1e-14)
