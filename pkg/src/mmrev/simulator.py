"""Monte Carlo simulation of the quoting strategy in market units.

The reference price is sampled exactly from its OU transition, quotes are
read from a policy source at the current (time to horizon, inventory,
price), and each side of the book fills at most once per step with
probability 1 - exp(-A exp(-kappa * spread) dt).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .lattice import Lattice
from .model import ModelParams, _ou_moments, to_scaled
from .policy import (
    PolicySurface,
    constant_model_limits,
    gueant_asymptotic_spreads,
    linear_utility_limits,
    zhang_small_kappa_limits,
)

MAX_FILL_PROB = 0.2
EXP_CLAMP = 700.0
DEFAULT_DT_CYCLES = 1.0 / 500.0
ASK, BID = 1, -1


class QuoteUnavailable(RuntimeError):
    pass


class PolicySource(Protocol):
    def quotes(self, tau: float, q: np.ndarray, S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Market ask and bid prices; NaN only on a side closed by the inventory bound."""


@dataclass
class ConstantPolicy:
    ask: float
    bid: float

    def quotes(self, tau, q, S):
        n = np.shape(S)
        return np.full(n, float(self.ask)), np.full(n, float(self.bid))


@dataclass
class ConstantSpreadPolicy:
    """Quotes at S + ask_spread and S - bid_spread."""

    ask_spread: float
    bid_spread: float

    def quotes(self, tau, q, S):
        S = np.asarray(S, dtype=float)
        return S + self.ask_spread, S - self.bid_spread


@dataclass
class BaselinePolicy:
    """Closed-form long-time quotes: constant, zhang, linear or gueant."""

    name: str
    p: ModelParams
    q_cap: int = 30
    _ask: np.ndarray = field(init=False, repr=False)
    _bid: np.ndarray = field(init=False, repr=False)
    _relative: bool = field(init=False, repr=False, default=False)

    def __post_init__(self):
        q = np.arange(-self.q_cap, self.q_cap + 1)
        p = self.p
        if self.name == "constant":
            a, b = constant_model_limits(p)
            self._ask, self._bid = np.full(q.shape, a), np.full(q.shape, b)
        elif self.name == "linear":
            a, b = linear_utility_limits(p)
            self._ask, self._bid = np.full(q.shape, a), np.full(q.shape, b)
        elif self.name == "zhang":
            sp = to_scaled(p)
            a, b = zhang_small_kappa_limits(sp, q)
            self._ask, self._bid = a / p.gamma, b / p.gamma
        elif self.name == "gueant":
            a, b = gueant_asymptotic_spreads(p, self.q_cap)
            self._ask, self._bid = a, b  # spreads around the reference price
            self._relative = True
        else:
            raise ValueError(f"unknown baseline {self.name!r}")

    def quotes(self, tau, q, S):
        i = np.asarray(q) + self.q_cap
        a, b = self._ask[i], self._bid[i]
        if self._relative:
            return S + a, S - b
        return a.copy(), b.copy()


class SurfacePolicy:
    """Quotes from solver snapshots: nearest snapshot in tau, linear in s.

    Snapshots and lattice are in scaled units; ``p`` supplies gamma and
    alpha to convert time and prices.
    """

    def __init__(self, policies: list[PolicySurface], lat: Lattice, p: ModelParams):
        if not policies:
            raise ValueError("need at least one policy snapshot")
        order = np.argsort([pol.tau for pol in policies], kind="stable")
        self.policies = [policies[i] for i in order]
        self.taus = np.array([pol.tau for pol in self.policies])
        self.lat, self.p = lat, p
        self.time_scale = p.alpha if p.alpha > 0 else 1.0
        self.ask = np.stack([pol.ask_price for pol in self.policies])
        self.bid = np.stack([pol.bid_price for pol in self.policies])
        self._mid = 0.5 * (self.taus[1:] + self.taus[:-1])

    def snapshot_index(self, tau: float) -> int:
        return int(np.searchsorted(self._mid, tau * self.time_scale, side="right"))

    def quotes(self, tau, q, S):
        k = self.snapshot_index(tau)
        lat, g = self.lat, self.p.gamma
        x = (np.asarray(S, dtype=float) * g - lat.s_min) / lat.ds
        j = np.clip(np.floor(x).astype(int), 0, lat.n_s - 2)
        w = np.clip(x - j, 0.0, 1.0)  # flat outside the grid
        qi = np.asarray(q) + lat.q_cap
        out = []
        for arr in (self.ask[k], self.bid[k]):
            out.append(((1 - w) * arr[qi, j] + w * arr[qi, j + 1]) / g)
        return out[0], out[1]


@dataclass
class SimPath:
    """One trajectory, recorded every ``stride`` steps (plus the final step)."""

    t: np.ndarray
    S: np.ndarray
    ask: np.ndarray
    bid: np.ndarray
    Q: np.ndarray
    X: np.ndarray
    W: np.ndarray
    fills: list = field(default_factory=list)  # (side, time, price); side +1 ask, -1 bid
    crossed_steps: int = 0
    stride: int = 1

    @property
    def n_fills(self) -> int:
        return len(self.fills)

    def fill_counts(self) -> tuple[int, int]:
        a = sum(1 for f in self.fills if f[0] == ASK)
        return a, len(self.fills) - a


def check_dt(p: ModelParams, dt: float) -> None:
    if not dt > 0:
        raise ValueError("dt must be positive")
    prob = -math.expm1(-p.A * dt)
    if prob >= MAX_FILL_PROB:
        raise ValueError(f"fill probability per step {prob:.3f} >= {MAX_FILL_PROB}; reduce dt")


def simulate_batch(policy: PolicySource, p: ModelParams, dt: float, seed: int, n_paths: int,
                   q0: int = 0, q_cap: int = 30, s0: float | None = None, stride: int = 1,
                   first_index: int = 0, chunk: int = 500) -> list[SimPath]:
    """Simulate paths first_index .. first_index + n_paths - 1.

    Path i draws all of its randomness from ``default_rng([seed, i])``, so a
    path is reproduced bit for bit whatever the batch it runs in.
    """
    check_dt(p, dt)
    if abs(q0) > q_cap:
        raise ValueError(f"q0 = {q0} outside [-{q_cap}, {q_cap}]")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out: list[SimPath] = []
    for start in range(0, n_paths, chunk):
        idx = range(first_index + start, first_index + min(n_paths, start + chunk))
        out.extend(_simulate_chunk(policy, p, dt, seed, list(idx), q0, q_cap,
                                   p.mu if s0 is None else s0, stride))
    return out


def simulate(policy: PolicySource, p: ModelParams, dt: float, seed: int, q0: int = 0,
             q_cap: int = 30, s0: float | None = None, stride: int = 1, path_index: int = 0) -> SimPath:
    return simulate_batch(policy, p, dt, seed, 1, q0, q_cap, s0, stride, first_index=path_index)[0]


def _simulate_chunk(policy, p, dt, seed, indices, q0, q_cap, s0, stride):
    n_steps = int(math.ceil(p.T / dt - 1e-9))
    m = len(indices)
    normals = np.empty((m, n_steps))
    unif = np.empty((m, n_steps, 2))
    for r, i in enumerate(indices):
        rng = np.random.default_rng([seed, i])
        normals[r] = rng.standard_normal(n_steps)
        unif[r] = rng.random((n_steps, 2))

    S = np.full(m, float(s0))
    Q = np.full(m, int(q0))
    X = np.zeros(m)
    rec_steps = list(range(0, n_steps, stride))
    if rec_steps[-1] != n_steps:
        rec_steps.append(n_steps)
    n_rec = len(rec_steps)
    R = {k: np.empty((m, n_rec)) for k in ("S", "ask", "bid", "X")}
    RQ = np.empty((m, n_rec), dtype=int)
    fills: list[list] = [[] for _ in range(m)]
    crossed = np.zeros(m, dtype=int)
    r_i = 0
    ask = bid = np.full(m, np.nan)
    for k in range(n_steps + 1):
        t = min(k * dt, p.T)
        if k < n_steps:
            ask, bid = policy.quotes(p.T - t, Q, S)
            ask_open = Q > -q_cap
            bid_open = Q < q_cap
            bad = (ask_open & ~np.isfinite(ask)) | (bid_open & ~np.isfinite(bid))
            if np.any(bad):
                raise QuoteUnavailable(f"no finite quote at t = {t:.6g} for inventory {int(Q[bad][0])}")
        if r_i < n_rec and rec_steps[r_i] == k:
            R["S"][:, r_i], R["ask"][:, r_i], R["bid"][:, r_i], R["X"][:, r_i] = S, ask, bid, X
            RQ[:, r_i] = Q
            r_i += 1
        if k == n_steps:
            break
        da = ask - S
        db = S - bid
        crossed += (ask_open & (da < 0)) | (bid_open & (db < 0))
        with np.errstate(invalid="ignore"):
            lam_a = p.A * np.exp(np.clip(-p.kappa * da, -EXP_CLAMP, EXP_CLAMP))
            lam_b = p.A * np.exp(np.clip(-p.kappa * db, -EXP_CLAMP, EXP_CLAMP))
            fa = ask_open & (unif[:, k, 0] < -np.expm1(-lam_a * dt))
            fb = bid_open & (unif[:, k, 1] < -np.expm1(-lam_b * dt))
        if np.any(fa) or np.any(fb):
            X = X + np.where(fa, ask, 0.0) - np.where(fb, bid, 0.0)
            Q = Q - fa.astype(int) + fb.astype(int)
            for r in np.flatnonzero(fa):
                fills[r].append((ASK, t, float(ask[r])))
            for r in np.flatnonzero(fb):
                fills[r].append((BID, t, float(bid[r])))
        h = min(dt, p.T - t)
        mean, var = _ou_moments(S, h, p.alpha, p.mu, p.sigma)
        S = mean + math.sqrt(var) * normals[:, k]

    t_rec = np.minimum(np.array(rec_steps) * dt, p.T)
    paths = []
    for r in range(m):
        Sr, Qr, Xr = R["S"][r], RQ[r], R["X"][r]
        paths.append(SimPath(t_rec.copy(), Sr.copy(), R["ask"][r].copy(), R["bid"][r].copy(),
                             Qr.copy(), Xr.copy(), Xr + Qr * Sr, fills[r], int(crossed[r]), stride))
    return paths


# ------------------------------------------------------------------ stats

@dataclass
class BatchSummary:
    n_paths: int
    mean_W: float
    var_W: float
    mean_Q: float
    var_Q: float
    mean_fills: float
    var_fills: float
    utility: float
    utility_se: float
    crossed_steps: int
    fill_rate_bins: np.ndarray = field(repr=False)
    fill_rate: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "n_paths", "mean_W", "var_W", "mean_Q", "var_Q", "mean_fills", "var_fills",
            "utility", "utility_se", "crossed_steps")}
        d["fill_rate_bins"] = self.fill_rate_bins.tolist()
        d["fill_rate"] = self.fill_rate.tolist()
        return d


def batch_stats(paths: list[SimPath], gamma: float, T: float | None = None, n_bins: int = 20) -> BatchSummary:
    """Terminal means/variances, E[-exp(-gamma W_T)] with its standard error, fill rates per time bin."""
    if not paths:
        raise ValueError("no paths")
    W = np.array([pa.W[-1] for pa in paths])
    Qt = np.array([pa.Q[-1] for pa in paths], dtype=float)
    nf = np.array([pa.n_fills for pa in paths], dtype=float)
    n = len(paths)
    ddof = 1 if n > 1 else 0
    u = -np.exp(-gamma * W)
    T = float(paths[0].t[-1]) if T is None else T
    edges = np.linspace(0.0, T, n_bins + 1)
    counts = np.zeros(n_bins)
    for pa in paths:
        if pa.fills:
            ts = np.array([f[1] for f in pa.fills])
            counts += np.histogram(ts, bins=edges)[0]
    width = edges[1] - edges[0] if T > 0 else 1.0
    return BatchSummary(
        n_paths=n, mean_W=float(W.mean()), var_W=float(W.var(ddof=ddof)),
        mean_Q=float(Qt.mean()), var_Q=float(Qt.var(ddof=ddof)),
        mean_fills=float(nf.mean()), var_fills=float(nf.var(ddof=ddof)),
        utility=float(u.mean()), utility_se=float(u.std(ddof=ddof) / math.sqrt(n)) if n > 1 else 0.0,
        crossed_steps=int(sum(pa.crossed_steps for pa in paths)),
        fill_rate_bins=edges, fill_rate=counts / (n * width),
    )


def lag_diagnostic(paths: list[SimPath], max_lag: int = 10, block: int = 50, component: str = "fills"):
    """Correlation of mid-quote changes at block t + lag with price changes at block t.

    Step increments are summed over blocks of ``block`` recorded steps before
    correlating, which averages out the per-step fill noise.  ``component``
    "fills" keeps only the quote changes across steps with a fill (the part
    mediated by inventory); "all" keeps every change, whose lag-0 value is
    dominated by the direct price dependence of the quotes.

    Returns (lags in recorded steps, corr, peak lag).  A positive peak means
    quotes follow the reference price with a delay.
    """
    if component not in ("fills", "all"):
        raise ValueError("component must be 'fills' or 'all'")
    lags = np.arange(-max_lag, max_lag + 1)
    num = np.zeros(len(lags))
    sx = sy = 0.0
    for pa in paths:
        dS = np.diff(pa.S)
        mid = 0.5 * (pa.ask + pa.bid)
        dm = np.nan_to_num(np.diff(mid))
        if component == "fills":
            dm = np.where(np.diff(pa.Q) != 0, dm, 0.0)
        nb = len(dS) // block
        if nb == 0:
            continue
        x = dS[:nb * block].reshape(nb, block).sum(axis=1)
        y = dm[:nb * block].reshape(nb, block).sum(axis=1)
        x = x - x.mean()
        y = y - y.mean()
        for i, L in enumerate(lags):
            if abs(L) >= nb:
                continue
            if L >= 0:
                num[i] += np.dot(x[:nb - L], y[L:])
            else:
                num[i] += np.dot(x[-L:], y[:nb + L])
        sx += np.dot(x, x)
        sy += np.dot(y, y)
    corr = num / math.sqrt(sx * sy) if sx > 0 and sy > 0 else np.zeros(len(lags))
    return lags * block, corr, int(lags[int(np.argmax(corr))]) * block


def max_quiet_quote_change(path: SimPath, t_lo: float, t_hi: float) -> float:
    """Largest ask/bid move between consecutive recorded steps with no fill in between."""
    fill_t = np.array(sorted(f[1] for f in path.fills))
    worst = 0.0
    for k in range(len(path.t) - 1):
        a, b = path.t[k], path.t[k + 1]
        if a < t_lo or b > t_hi:
            continue
        # a fill recorded at time a changes inventory before the quote at b
        if fill_t.size and np.any((fill_t >= a) & (fill_t < b)):
            continue
        for arr in (path.ask, path.bid):
            d = arr[k + 1] - arr[k]
            if np.isfinite(d):
                worst = max(worst, abs(d))
    return worst
