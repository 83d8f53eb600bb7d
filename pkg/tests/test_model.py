import math

import numpy as np
import pytest

from mmrev.model import (ModelParams, ScaledParams, derived_constants, ou_moments, read_keyvalue,
                         scale_params, scale_price, scale_prices_only, to_scaled, unscale_params,
                         unscale_price)


def test_scale_params_desk_example():
    # A=10, sigma=0.05, gamma=0.005, kappa=5, mu=1, alpha=1
    sp = scale_params(ModelParams(A=10, kappa=5, gamma=0.005, sigma=0.05, mu=1, alpha=1, T=800))
    assert sp.A_s == pytest.approx(10, rel=1e-15)
    assert sp.sigma_s == pytest.approx(2.5e-4, rel=1e-14)
    assert sp.mu_s == pytest.approx(5e-3, rel=1e-14)
    assert sp.kappa_s == pytest.approx(1000, rel=1e-14)
    assert sp.T_s == pytest.approx(800, rel=1e-15)


def test_scale_params_medium_a(medium_a):
    sp = scale_params(medium_a)
    assert (sp.A_s, sp.kappa_s, sp.mu_s, sp.T_s) == pytest.approx((2, 0.75, 2, 10), rel=1e-15)
    assert sp.sigma_s == pytest.approx(0.8, rel=1e-15)


def test_identity_scaling():
    p = ModelParams(A=3.3, kappa=0.7, gamma=1, sigma=0.21, mu=-0.4, alpha=1, T=2.5)
    sp = scale_params(p)
    assert (sp.A_s, sp.kappa_s, sp.sigma_s, sp.mu_s, sp.T_s) == (p.A, p.kappa, p.sigma, p.mu, p.T)


@pytest.mark.parametrize("bad", [dict(alpha=0.0), dict(gamma=0.0)])
def test_scale_params_rejects_degenerate(medium_a, bad):
    p = ModelParams(**{**medium_a.__dict__, **bad})
    with pytest.raises(ValueError):
        scale_params(p)


def test_round_trip(medium_a):
    back = unscale_params(scale_params(medium_a), medium_a.gamma, medium_a.alpha)
    for f in ("A", "kappa", "gamma", "sigma", "mu", "alpha", "T"):
        assert getattr(back, f) == pytest.approx(getattr(medium_a, f), rel=1e-12)


def test_brownian_scaling_round_trip():
    p = ModelParams(A=2, kappa=1.5, gamma=2, sigma=0.4, mu=1, alpha=0, T=3)
    sp = to_scaled(p)
    assert sp.drift == 0.0 and sp.T_s == 3
    assert unscale_params(sp, 2, 0) == p
    with pytest.raises(ValueError):
        scale_prices_only(ModelParams(A=2, kappa=1.5, gamma=2, sigma=0.4, mu=1, alpha=1, T=3))


def test_unscale_price():
    assert unscale_price(2.0, 2) == 1.0
    assert unscale_price(5e-3, 0.005) == pytest.approx(1.0, rel=1e-15)
    assert unscale_price(scale_price(1.2345, 0.7), 0.7) == pytest.approx(1.2345, rel=1e-15)
    with pytest.raises(ValueError):
        unscale_price(1.0, 0.0)


def test_derived_constants_oracle():
    sp = ScaledParams(A_s=2.0, kappa_s=0.75, sigma_s=0.8, mu_s=2.0, T_s=1.0)
    c = derived_constants(sp)
    k = 0.75
    assert c.M == pytest.approx(2.0 / (k + 1) * (1 + 1 / k) ** (-k), rel=1e-14)
    assert c.half_spread == pytest.approx(math.log(1 + 1 / k), rel=1e-15)
    assert c.eta_q == pytest.approx(k * c.M, rel=1e-15)


def test_ou_moments_examples():
    p = ModelParams(A=1, kappa=1, gamma=1, sigma=1, mu=0, alpha=1, T=1)
    m, v = ou_moments(2.0, math.log(2), p)
    assert m == pytest.approx(1.0, rel=1e-15)
    assert v == pytest.approx(0.375, rel=1e-15)
    assert ou_moments(0.7, 0.0, p) == (0.7, 0.0)
    m, v = ou_moments(5.0, 200.0, p)
    assert m == pytest.approx(0.0, abs=1e-15) and v == pytest.approx(0.5, rel=1e-15)


def test_ou_moments_brownian_limit():
    p = ModelParams(A=1, kappa=1, gamma=1, sigma=0.3, mu=5, alpha=0, T=1)
    assert ou_moments(1.5, 2.0, p) == pytest.approx((1.5, 0.18), rel=1e-15)
    with pytest.raises(ValueError):
        ou_moments(0.0, -1.0, p)


def test_ou_moments_vectorised():
    p = ModelParams(A=1, kappa=1, gamma=1, sigma=1, mu=1, alpha=2, T=1)
    s0 = np.array([0.0, 1.0, 2.0])
    m, _ = ou_moments(s0, 0.3, p)
    assert m.shape == (3,) and m[1] == pytest.approx(1.0, rel=1e-15)


@pytest.mark.parametrize("field,val", [("kappa", 0.0), ("A", -1.0), ("sigma", -0.1), ("T", 0.0),
                                       ("alpha", -1.0), ("mu", float("nan"))])
def test_model_params_validation(medium_a, field, val):
    with pytest.raises(ValueError):
        ModelParams(**{**medium_a.__dict__, field: val})


def test_read_keyvalue(tmp_path):
    f = tmp_path / "m.cfg"
    f.write_text("[model]\nA = 2  # flow\nkappa=1.5\n\n# comment\ngamma = 2\nsigma=0.4\nmu=1\nalpha=1\nT=10\n")
    p = ModelParams.from_file(f)
    assert p == ModelParams(A=2, kappa=1.5, gamma=2, sigma=0.4, mu=1, alpha=1, T=10)
    (tmp_path / "bad.cfg").write_text("A 2\n")
    with pytest.raises(ValueError, match="key = value"):
        read_keyvalue(tmp_path / "bad.cfg")
    (tmp_path / "miss.cfg").write_text("A = 2\n")
    with pytest.raises(ValueError, match="missing"):
        ModelParams.from_file(tmp_path / "miss.cfg")
