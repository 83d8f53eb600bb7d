"""Optimal feedback quotes from a value surface, plus closed-form baselines.

Everything here is in scaled units unless the function takes ModelParams,
in which case it returns market prices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lattice import Lattice, ValueSurface
from .model import ModelParams, ScaledParams, scale_params


@dataclass
class PolicySurface:
    """Feedback quotes over (q, s_j).

    ask entries are NaN at q = -Q and bid entries are NaN at q = Q, where
    that side of the book is closed.
    """

    tau: float
    ask_price: np.ndarray
    bid_price: np.ndarray
    ask_spread: np.ndarray
    bid_spread: np.ndarray

    @property
    def q_cap(self) -> int:
        return (self.ask_price.shape[0] - 1) // 2

    def row(self, q: int):
        i = q + self.q_cap
        return self.ask_price[i], self.bid_price[i]


def extract_policy(v: ValueSurface | np.ndarray, p: ScaledParams, s: np.ndarray,
                   tau: float | None = None) -> PolicySurface:
    """Feedback spreads: ask = h - s + v(q) - v(q-1), bid = h + s - v(q+1) + v(q)."""
    if isinstance(v, ValueSurface):
        tau = v.tau if tau is None else tau
        vals = v.values
    else:
        vals = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ValueError("value surface has non-finite entries")
    h = p.half_spread
    n_q = vals.shape[0]
    ask_spread = np.full(vals.shape, np.nan)
    bid_spread = np.full(vals.shape, np.nan)
    ask_spread[1:] = h - s + vals[1:] - vals[:-1]
    bid_spread[:-1] = h + s - vals[1:] + vals[:-1]
    if n_q == 1:
        ask_spread[:] = np.nan
    return PolicySurface(
        tau=0.0 if tau is None else float(tau),
        ask_price=s + ask_spread,
        bid_price=s - bid_spread,
        ask_spread=ask_spread,
        bid_spread=bid_spread,
    )


def spread_sum_defect(pol: PolicySurface, v: np.ndarray, p: ScaledParams) -> float:
    """Max deviation of ask + bid spread from 2h + 2v(q) - v(q+1) - v(q-1)."""
    lhs = pol.ask_spread[1:-1] + pol.bid_spread[1:-1]
    rhs = 2 * p.half_spread + 2 * v[1:-1] - v[2:] - v[:-2]
    if lhs.size == 0:
        return 0.0
    return float(np.max(np.abs(lhs - rhs)))


def s_insensitivity(pol: PolicySurface, q_max: int, side: str = "ask") -> float:
    """max over |q| <= q_max and s of |price(q, s) - mean_s price(q, .)|."""
    arr = pol.ask_price if side == "ask" else pol.bid_price
    Q = pol.q_cap
    rows = arr[Q - q_max:Q + q_max + 1]
    return float(np.nanmax(np.abs(rows - np.nanmean(rows, axis=1, keepdims=True))))


def q_insensitivity(pol: PolicySurface, q_max: int, target: float, side: str = "ask") -> float:
    """max over |q| <= q_max and s of |price - target|."""
    arr = pol.ask_price if side == "ask" else pol.bid_price
    Q = pol.q_cap
    rows = arr[Q - q_max:Q + q_max + 1]
    return float(np.nanmax(np.abs(rows - target)))


# ---------------------------------------------------------------- baselines

def constant_model_limits(p: ModelParams) -> tuple[float, float]:
    """Exact quotes when the reference price sits at mu forever (market units)."""
    if p.gamma <= 0:
        raise ValueError("gamma must be positive; use linear_utility_limits for gamma = 0")
    half = math.log1p(p.gamma / p.kappa) / p.gamma
    return p.mu + half, p.mu - half


def linear_utility_limits(p: ModelParams) -> tuple[float, float]:
    return p.mu + 1.0 / p.kappa, p.mu - 1.0 / p.kappa


def bounded_inventory_limits(p: ScaledParams, Q: int, q: int) -> tuple[float, float]:
    """Long-time quotes of the constant-price model with inventory capped at +-Q.

    Returns (ask, bid); the closed side (ask at q = -Q, bid at q = Q) is NaN.
    """
    if Q < 1 or abs(q) > Q:
        raise ValueError(f"need |q| <= Q and Q >= 1, got q={q}, Q={Q}")
    k, h, mu = p.kappa_s, p.half_spread, p.mu_s
    den = 2 * Q + 2

    def lsin(i):
        return math.log(math.sin(i * math.pi / den))

    ask = math.nan if q == -Q else mu + h + (lsin(q + Q + 1) - lsin(q + Q)) / k
    bid = math.nan if q == Q else mu - h + (lsin(q + Q + 2) - lsin(q + Q + 1)) / k
    return ask, bid


def zhang_small_kappa_limits(p: ScaledParams, q) -> tuple:
    """Long-time quotes of the linearised (small kappa) model; works on arrays of q."""
    q = np.asarray(q, dtype=float)
    h, mu, s2 = p.half_spread, p.mu_s, p.sigma_s ** 2
    ask = h + mu - s2 / 4.0 * (2 * q - 1)
    bid = -h + mu - s2 / 4.0 * (2 * q + 1)
    if ask.ndim == 0:
        return float(ask), float(bid)
    return ask, bid


def scaled_constant_limits(p: ScaledParams) -> tuple[float, float]:
    return p.mu_s + p.half_spread, p.mu_s - p.half_spread


# ------------------------------------------------------- alpha = 0 baseline

def sturm_count(diag: np.ndarray, off: np.ndarray, x: float) -> int:
    """Number of eigenvalues < x of the symmetric tridiagonal (diag, off)."""
    count = 0
    d = diag[0] - x
    if d < 0:
        count += 1
    tiny = np.finfo(float).tiny
    for i in range(1, len(diag)):
        if d == 0:
            d = tiny
        d = diag[i] - x - off[i - 1] ** 2 / d
        if d < 0:
            count += 1
    return count


def smallest_eigenpair(diag: np.ndarray, off: np.ndarray, tol: float = 1e-14):
    """Smallest eigenvalue by Sturm bisection, eigenvector by inverse iteration."""
    diag = np.asarray(diag, dtype=float)
    off = np.asarray(off, dtype=float)
    n = len(diag)
    if n == 1:
        return float(diag[0]), np.ones(1)
    # Gershgorin bounds
    rad = np.zeros(n)
    rad[:-1] += np.abs(off)
    rad[1:] += np.abs(off)
    lo, hi = float(np.min(diag - rad)), float(np.max(diag + rad))
    scale = max(abs(lo), abs(hi), 1.0)
    while hi - lo > tol * scale:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if sturm_count(diag, off, mid) >= 1:
            hi = mid
        else:
            lo = mid
    lam = 0.5 * (lo + hi)

    from scipy.linalg import solve_banded

    shift = lam - 1e-10 * scale
    ab = np.zeros((3, n))
    ab[0, 1:] = off
    ab[1] = diag - shift
    ab[2, :-1] = off
    x = np.ones(n)
    for _ in range(50):
        y = solve_banded((1, 1), ab, x)
        y /= np.linalg.norm(y)
        if np.linalg.norm(y - x) < 1e-15 * n:
            x = y
            break
        x = y
    if x[np.argmax(np.abs(x))] < 0:
        x = -x
    return lam, x


def gueant_matrix(p: ModelParams, Q: int) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal and off-diagonal of the (2Q+1)-dim Brownian-reference matrix."""
    if p.gamma <= 0:
        raise ValueError("gamma must be positive")
    a = p.kappa * p.gamma * p.sigma ** 2 / 2.0
    eta = p.A * math.exp(-(1.0 + p.kappa / p.gamma) * math.log1p(p.gamma / p.kappa))
    q = np.arange(-Q, Q + 1, dtype=float)
    return a * q ** 2, np.full(2 * Q, -eta)


def gueant_asymptotic_spreads(p: ModelParams, Q: int):
    """Long-time (ask, bid) spreads in market units for a Brownian reference.

    Arrays indexed by q + Q; ask is NaN at q = -Q, bid is NaN at q = Q.
    """
    if p.alpha != 0:
        raise ValueError("the asymptotic spreads hold for alpha = 0 only")
    diag, off = gueant_matrix(p, Q)
    _, f = smallest_eigenpair(diag, off)
    if np.any(f <= 0):
        raise ArithmeticError("ground-state eigenvector is not sign-definite")
    base = math.log1p(p.gamma / p.kappa) / p.gamma
    logf = np.log(f)
    bid = np.full(2 * Q + 1, np.nan)
    ask = np.full(2 * Q + 1, np.nan)
    bid[:-1] = base + (logf[:-1] - logf[1:]) / p.kappa
    ask[1:] = base + (logf[1:] - logf[:-1]) / p.kappa
    return ask, bid


def baseline_table(p: ModelParams, lat: Lattice) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Scaled (ask, bid) baseline prices per q for every applicable closed form."""
    out = {}
    q = lat.q
    if p.alpha > 0 and p.gamma > 0:
        sp = scale_params(p)
        a, b = scaled_constant_limits(sp)
        out["constant"] = (np.full(q.shape, a), np.full(q.shape, b))
        bi = [bounded_inventory_limits(sp, lat.q_cap, int(k)) for k in q]
        out["bounded"] = (np.array([x[0] for x in bi]), np.array([x[1] for x in bi]))
        out["zhang"] = zhang_small_kappa_limits(sp, q)
        la, lb = linear_utility_limits(p)
        out["linear"] = (np.full(q.shape, la * p.gamma), np.full(q.shape, lb * p.gamma))
    return out
