"""Long-time equilibrium of the scaled HJB equation as a Schroedinger ground state.

With centered prices x = s - mu, the stationary s-profile theta(x) and the
growth rate C of the value function satisfy an ODE that the substitution
m = exp(-x^2/(2 sigma^2) - theta) turns into

    -m'' + V(x) m = C_hat m,   V(x) = x^2/sigma^4 + (2M/sigma^2)(e^{kappa x} + e^{-kappa x}),

with C_hat = (2C + 1)/sigma^2.  The ground state is the only eigenfunction
without sign changes; it is found by shooting from x = 0 with (m, m') = (1, 0)
and bisecting on C_hat.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .lattice import ValueSurface
from .model import ScaledParams

WKB_ACTION = 40.0  # decay exponent required between turning point and s_max
MAX_STDDEVS = 12.0
MAX_DOUBLINGS = 60
BLOWUP = 1e12


class BracketNotFound(RuntimeError):
    pass


class ShootingError(RuntimeError):
    pass


class Shot(enum.Enum):
    DIVERGES_POSITIVE = "diverges_positive"
    CROSSES_ZERO = "crosses_zero"
    DECAYS = "decays"  # still positive and decreasing at s_max


def potential(x, p: ScaledParams):
    """V(x) for centered price x (works on arrays)."""
    sig2 = p.sigma_s ** 2
    M = p.constants.M
    x = np.asarray(x, dtype=float)
    v = x * x / (sig2 * sig2) + (2.0 * M / sig2) * 2.0 * np.cosh(p.kappa_s * x)
    return float(v) if v.ndim == 0 else v


def turning_point(C_hat: float, p: ScaledParams) -> float:
    """Largest x >= 0 with V(x) <= C_hat (0 when C_hat <= V(0)); V is increasing on x > 0."""
    if C_hat <= potential(0.0, p):
        return 0.0
    lo, hi = 0.0, p.sigma_s * math.sqrt(C_hat) * p.sigma_s + p.sigma_s
    while potential(hi, p) < C_hat:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if potential(mid, p) < C_hat:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    return hi


def default_s_max(p: ScaledParams, C_hat: float, action: float = WKB_ACTION) -> float:
    """Where int_{turning point}^{s_max} sqrt(V - C_hat) reaches ``action``.

    Capped at 12 stationary standard deviations (sigma/sqrt(2) in scaled
    units) but never placed before the turning point plus that action
    measured in the local decay length.
    """
    if p.sigma_s <= 0:
        raise ValueError("the equilibrium problem needs sigma > 0")
    x0 = turning_point(C_hat, p)
    cap = MAX_STDDEVS * p.sigma_s / math.sqrt(2.0)
    step = p.sigma_s / 200.0
    x, acc = x0, 0.0
    while acc < action:
        x_next = x + step
        acc += step * math.sqrt(max(potential(x_next, p) - C_hat, 0.0))
        x = x_next
        if x >= cap and x > x0 + step:
            return max(cap, x0 + 20 * step)
    return x


@dataclass
class Trajectory:
    x: np.ndarray
    m: np.ndarray
    n: np.ndarray
    outcome: Shot
    C_hat: float


class _Shooter:
    """RK4 for m' = n, n' = (V - C_hat) m on a fixed uniform grid in x >= 0."""

    def __init__(self, p: ScaledParams, s_max: float, h: float):
        if not (h > 0 and s_max > 0):
            raise ValueError("need h > 0 and s_max > 0")
        self.p = p
        n_steps = max(1, int(math.ceil(s_max / h)))
        self.h = s_max / n_steps
        self.x = np.linspace(0.0, s_max, n_steps + 1)
        self.V = potential(self.x, p)
        self.V_mid = potential(self.x[:-1] + 0.5 * self.h, p)

    def shoot(self, C_hat: float, keep: bool = False) -> Trajectory:
        h = self.h
        V = (self.V - C_hat).tolist()
        Vm = (self.V_mid - C_hat).tolist()
        m, n = 1.0, 0.0
        ms, ns = ([m], [n]) if keep else (None, None)
        outcome = Shot.DECAYS
        last = 0
        for k in range(len(V) - 1):
            a0, am, a1 = V[k], Vm[k], V[k + 1]
            k1m, k1n = n, a0 * m
            k2m, k2n = n + 0.5 * h * k1n, am * (m + 0.5 * h * k1m)
            k3m, k3n = n + 0.5 * h * k2n, am * (m + 0.5 * h * k2m)
            k4m, k4n = n + h * k3n, a1 * (m + h * k3m)
            m += h / 6.0 * (k1m + 2 * k2m + 2 * k3m + k4m)
            n += h / 6.0 * (k1n + 2 * k2n + 2 * k3n + k4n)
            last = k + 1
            if keep:
                ms.append(m)
                ns.append(n)
            if m <= 0.0:
                outcome = Shot.CROSSES_ZERO
                break
            if n > 0.0 and a1 > 0.0:
                # forbidden region, positive and rising: m'' > 0 from here on
                outcome = Shot.DIVERGES_POSITIVE
                break
            if abs(m) > BLOWUP:
                raise ShootingError(f"|m| exceeded {BLOWUP:g} at x = {self.x[k + 1]:.4g} without classification")
        if keep:
            return Trajectory(self.x[:last + 1], np.array(ms), np.array(ns), outcome, C_hat)
        return Trajectory(self.x[:0], np.empty(0), np.empty(0), outcome, C_hat)


def shoot(C_hat: float, p: ScaledParams, s_max: float, h: float) -> Trajectory:
    """Integrate from (m, m') = (1, 0) at x = 0 and classify the outcome."""
    return _Shooter(p, s_max, h).shoot(C_hat, keep=True)


def find_ground_eigenvalue(p: ScaledParams, seed: float | None = None, s_max: float | None = None,
                           h: float | None = None, rtol: float = 1e-10) -> float:
    """Bisection on C_hat between 'no sign change on [0, s_max]' and 'sign change'.

    ``seed`` defaults to the harmonic value 1/sigma^2 + 4M/sigma^2.  The
    bracket is widened geometrically from the seed; C_hat <= V(0) can never
    produce a sign change and serves as a guaranteed lower end.
    """
    sig2 = p.sigma_s ** 2
    v0 = potential(0.0, p)
    if seed is None:
        seed = 1.0 / sig2 + v0
    if s_max is None:
        s_max = default_s_max(p, max(seed, v0))
    if h is None:
        h = s_max / 20000.0
    sh = _Shooter(p, s_max, h)

    tried: list[float] = []

    def high(c):
        tried.append(c)
        return sh.shoot(c).outcome is Shot.CROSSES_ZERO

    def history():
        return ", ".join(f"{c:.6g}" for c in tried[-8:])

    width = 1e-3 * max(abs(seed), 1.0 / sig2)
    lo, hi = seed, seed
    doublings = 0
    while high(lo):
        hi = lo
        lo = max(seed - width, v0)
        width *= 2.0
        doublings += 1
        if doublings > MAX_DOUBLINGS:
            raise BracketNotFound(f"no lower end found; tried C_hat = {history()}")
    width = 1e-3 * max(abs(seed), 1.0 / sig2)
    while not high(hi):
        lo = hi
        hi = seed + width
        width *= 2.0
        doublings += 1
        if doublings > MAX_DOUBLINGS:
            raise BracketNotFound(f"no sign change up to C_hat = {hi:.6g}; tried {history()}; raise s_max")
    while hi - lo > rtol * (1.0 + abs(0.5 * (lo + hi))):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if high(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def c_from_c_hat(C_hat: float, p: ScaledParams) -> float:
    return (C_hat * p.sigma_s ** 2 - 1.0) / 2.0


def seed_from_v_tau(v_tau: float, p: ScaledParams) -> float:
    return (2.0 * v_tau + 1.0) / p.sigma_s ** 2


def theta_from_m(traj: Trajectory, p: ScaledParams, x_max: float | None = None):
    """theta = -log m - x^2/(2 sigma^2) on the even extension, theta(0) = 0.

    Returns (x, theta) on a grid symmetric about 0.
    """
    x, m = traj.x, traj.m
    if x_max is not None:
        keep = x <= x_max * (1 + 1e-12)
        x, m = x[keep], m[keep]
    if np.any(m <= 0):
        raise ValueError("m must be positive on the requested domain")
    th = -np.log(m) - x * x / (2 * p.sigma_s ** 2)
    th -= th[0]
    xs = np.concatenate([-x[:0:-1], x])
    ts = np.concatenate([th[:0:-1], th])
    return xs, ts


@dataclass
class EquilibriumSolution:
    """Ground state in centered coordinates x = s - mu (scaled units)."""

    C_hat: float
    C: float
    mu: float
    x: np.ndarray = field(repr=False)
    m_values: np.ndarray = field(repr=False)
    theta_values: np.ndarray = field(repr=False)

    @property
    def s(self) -> np.ndarray:
        return self.x + self.mu

    def theta_at(self, s) -> np.ndarray:
        return np.interp(np.asarray(s, dtype=float) - self.mu, self.x, self.theta_values)


def solve_equilibrium(p: ScaledParams, seed: float | None = None, half_width: float | None = None,
                      s_max: float | None = None, h: float | None = None) -> EquilibriumSolution:
    """Find C_hat, then store m and theta on [-half_width, half_width] around mu.

    ``half_width`` defaults to 5 stationary standard deviations and must lie
    inside the integration domain, where m is still free of the growing
    mode's influence.
    """
    if p.drift != 1.0:
        raise ValueError("the equilibrium problem needs a mean-reverting reference")
    c_hat = find_ground_eigenvalue(p, seed, s_max, h)
    if s_max is None:
        s_max = default_s_max(p, c_hat)
    if h is None:
        h = s_max / 20000.0
    if half_width is None:
        half_width = 5.0 * p.sigma_s / math.sqrt(2.0)
    traj = _Shooter(p, s_max, h).shoot(c_hat, keep=True)
    if traj.x[-1] < half_width:
        raise ShootingError(
            f"trajectory at the eigenvalue stops at x = {traj.x[-1]:.4g}, inside the requested {half_width:.4g}")
    keep = traj.x <= half_width * (1 + 1e-12)
    m_half = traj.m[keep]
    xs, th = theta_from_m(traj, p, half_width)
    ms = np.concatenate([m_half[:0:-1], m_half])
    return EquilibriumSolution(c_hat, c_from_c_hat(c_hat, p), p.mu_s, xs, ms, th)


def s_dependent_part(snapshot: ValueSurface, s: np.ndarray, mu: float, q: int = 0) -> np.ndarray:
    row = snapshot.at(q)
    return row - np.interp(mu, s, row)


def compare_to_limit(snapshot: ValueSurface, s: np.ndarray, eq: EquilibriumSolution,
                     fraction: float = 1.0) -> float:
    """max |v(tau,0,s) - v(tau,0,mu) - theta(s)| over the shared s-range.

    ``fraction`` shrinks the window toward mu (1.0 = whole overlap).
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    lo = max(s[0], eq.s[0])
    hi = min(s[-1], eq.s[-1])
    half = min(eq.mu - lo, hi - eq.mu) * fraction
    sel = np.abs(s - eq.mu) <= half * (1 + 1e-12)
    if not np.any(sel):
        return 0.0
    diff = s_dependent_part(snapshot, s, eq.mu)[sel] - eq.theta_at(s[sel])
    return float(np.max(np.abs(diff)))


def write_csv(path, eq: EquilibriumSolution, snapshot: ValueSurface | None = None,
              s: np.ndarray | None = None, header: str | None = None, gamma: float = 1.0) -> None:
    """Columns s, m, theta and (if a snapshot is given) v_limit_sdep and error = v_limit_sdep - theta.

    The s column is divided by ``gamma`` to give market prices.
    """
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        cols = ["s", "m", "theta"]
        vs = None
        if snapshot is not None:
            if s is None:
                raise ValueError("need the lattice s grid with a snapshot")
            cols += ["v_limit_sdep", "error"]
            vs = np.interp(eq.s, s, s_dependent_part(snapshot, s, eq.mu), left=np.nan, right=np.nan)
        w.writerow(cols)
        for i, si in enumerate(eq.s):
            row = [repr(float(si / gamma)), repr(float(eq.m_values[i])), repr(float(eq.theta_values[i]))]
            if vs is not None:
                row += [repr(float(vs[i])), repr(float(vs[i] - eq.theta_values[i]))]
            w.writerow(row)
