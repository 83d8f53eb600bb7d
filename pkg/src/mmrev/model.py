"""Model parameters, price/time scaling and exact OU moments.

All solvers work in dimensionless units where time is measured in
mean-reversion cycles (1/alpha) and prices are multiplied by the risk
aversion gamma.  In those units alpha = gamma = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

MODEL_KEYS = ("A", "kappa", "gamma", "sigma", "mu", "alpha", "T")


@dataclass(frozen=True)
class ModelParams:
    """Market-unit parameters of the quoting problem.

    Attributes:
        A: market-order flow magnitude (fills per unit time at zero spread).
        kappa: order-book decay rate (1/price).
        gamma: risk aversion (1/price). Zero only for the linear-utility case.
        sigma: reference-price volatility (price/sqrt(time)).
        mu: long-term mean of the reference price.
        alpha: mean-reversion rate (1/time). Zero means a Brownian reference.
        T: trading horizon.
    """

    A: float
    kappa: float
    gamma: float
    sigma: float
    mu: float
    alpha: float
    T: float

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if not math.isfinite(val):
                raise ValueError(f"{f.name} must be finite, got {val!r}")
        if self.A < 0:
            raise ValueError("A must be nonnegative")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.T <= 0:
            raise ValueError("T must be positive")

    @classmethod
    def from_mapping(cls, m) -> "ModelParams":
        missing = [k for k in MODEL_KEYS if k not in m]
        if missing:
            raise ValueError(f"missing model parameters: {', '.join(missing)}")
        return cls(**{k: float(m[k]) for k in MODEL_KEYS})

    @classmethod
    def from_file(cls, path) -> "ModelParams":
        return cls.from_mapping(read_keyvalue(path))


@dataclass(frozen=True)
class ScaledParams:
    """Dimensionless parameters (alpha = gamma = 1 after scaling).

    ``drift`` is the mean-reversion rate in solver time units: 1 for the
    fully scaled OU problem, 0 when the reference price is Brownian and
    only prices were rescaled.
    """

    A_s: float
    kappa_s: float
    sigma_s: float
    mu_s: float
    T_s: float
    drift: float = 1.0

    def __post_init__(self):
        if not (self.A_s >= 0 and self.kappa_s > 0 and self.sigma_s >= 0 and self.T_s > 0):
            raise ValueError(f"invalid scaled parameters: {self}")
        if self.drift not in (0.0, 1.0):
            raise ValueError("drift must be 1 (scaled OU) or 0 (Brownian)")

    @property
    def constants(self) -> "DerivedConstants":
        return derived_constants(self)

    @property
    def half_spread(self) -> float:
        return math.log1p(1.0 / self.kappa_s)


@dataclass(frozen=True)
class DerivedConstants:
    M: float
    half_spread: float
    eta_q: float


def derived_constants(p: ScaledParams) -> DerivedConstants:
    k = p.kappa_s
    # (1 + 1/k)^(-k) through log1p keeps precision for large k
    M = p.A_s / (k + 1.0) * math.exp(-k * math.log1p(1.0 / k))
    return DerivedConstants(M=M, half_spread=math.log1p(1.0 / k), eta_q=k * M)


def scale_params(p: ModelParams) -> ScaledParams:
    if p.alpha <= 0 or p.gamma <= 0:
        raise ValueError("scaling needs alpha > 0 and gamma > 0")
    return ScaledParams(
        A_s=p.A / p.alpha,
        kappa_s=p.kappa / p.gamma,
        sigma_s=p.gamma * p.sigma / math.sqrt(p.alpha),
        mu_s=p.gamma * p.mu,
        T_s=p.alpha * p.T,
    )


def scale_prices_only(p: ModelParams) -> ScaledParams:
    """Price scaling for a Brownian reference (alpha = 0); time is left as is."""
    if p.alpha != 0:
        raise ValueError("scale_prices_only is for alpha = 0; use scale_params")
    if p.gamma <= 0:
        raise ValueError("gamma must be positive")
    return ScaledParams(
        A_s=p.A,
        kappa_s=p.kappa / p.gamma,
        sigma_s=p.gamma * p.sigma,
        mu_s=p.gamma * p.mu,
        T_s=p.T,
        drift=0.0,
    )


def to_scaled(p: ModelParams) -> ScaledParams:
    return scale_params(p) if p.alpha > 0 else scale_prices_only(p)


def unscale_params(s: ScaledParams, gamma: float, alpha: float) -> ModelParams:
    """Inverse of :func:`scale_params` given the two dropped parameters."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if s.drift == 0.0:
        return ModelParams(A=s.A_s, kappa=s.kappa_s * gamma, gamma=gamma,
                           sigma=s.sigma_s / gamma, mu=s.mu_s / gamma, alpha=0.0, T=s.T_s)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return ModelParams(
        A=s.A_s * alpha,
        kappa=s.kappa_s * gamma,
        gamma=gamma,
        sigma=s.sigma_s * math.sqrt(alpha) / gamma,
        mu=s.mu_s / gamma,
        alpha=alpha,
        T=s.T_s / alpha,
    )


def unscale_price(x, gamma: float):
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return x / gamma


def scale_price(x, gamma: float):
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return x * gamma


def ou_moments(s0, dt, p: ModelParams):
    """Conditional mean and variance of S_{t+dt} given S_t = s0.

    Works elementwise on numpy arrays. For alpha = 0 the Brownian limit
    (mean s0, variance sigma^2 dt) is returned.
    """
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    return _ou_moments(s0, dt, p.alpha, p.mu, p.sigma)


def _ou_moments(s0, dt, alpha, mu, sigma):
    if alpha == 0:
        return s0 + 0.0 * dt, sigma * sigma * dt
    decay = math.exp(-alpha * dt)
    mean = decay * s0 + (1.0 - decay) * mu
    # -expm1(-2 a dt) keeps small-dt variances accurate
    var = sigma * sigma / (2.0 * alpha) * (-math.expm1(-2.0 * alpha * dt))
    return mean, var


def read_keyvalue(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, ``[x]`` headers are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = (t.strip() for t in line.split("=", 1))
        if not key:
            raise ValueError(f"{path}:{lineno}: empty key")
        out[key] = val
    return out
