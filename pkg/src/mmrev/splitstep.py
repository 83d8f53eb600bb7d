"""Split-step solver for the exponentiated value function.

With vt = exp(-v) the equation is linear in s (an OU generator) and, after
the substitution w = exp(-kappa s q) vt^(-kappa), linear in q as well (a
path-graph generator).  Each backward step applies the exact q-propagator
column by column, then the Gaussian transition matrix row by row, then
rescales so the largest entry is one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .fd_solver import SolverError
from .lattice import BoundaryMode, Lattice, ValueSurface, halved, richardson_combine
from .model import ScaledParams
from .policy import PolicySurface, extract_policy

LOG_GUARD = 700.0
DEFAULT_TV_THRESHOLD = 1e-3


class Underflow(SolverError):
    pass


class GridCalibrationError(ValueError):
    pass


@dataclass
class TildeSurface:
    """exp(-v) up to the factor exp(norm_log): v = -log(tilde_values) - norm_log."""

    tau: float
    tilde_values: np.ndarray
    norm_log: float = 0.0

    def to_value_surface(self) -> ValueSurface:
        return ValueSurface(self.tau, -np.log(self.tilde_values) - self.norm_log, BoundaryMode.CAP)

    @classmethod
    def from_value_surface(cls, v: ValueSurface) -> "TildeSurface":
        L = -v.values
        top = float(L.max())
        return cls(v.tau, np.exp(L - top), top)


# ------------------------------------------------------------ S evolution

@dataclass
class TransitionMatrix:
    """Row-stochastic p_ij plus the Gaussian law it was built from."""

    probs: np.ndarray
    dt: float
    lattice: dict = field(repr=False, default_factory=dict)
    s: np.ndarray = field(repr=False, default=None)
    ghost_lo: np.ndarray = field(repr=False, default=None)
    ghost_hi: np.ndarray = field(repr=False, default=None)


def _gauss_cells(s: np.ndarray, ds: float, mean: np.ndarray, sd: float) -> np.ndarray:
    edges = s[:-1] + ds / 2  # upper edge of every cell but the last
    if sd == 0:
        # degenerate law: all mass in the cell holding the mean
        cdf = (edges[None, :] >= mean[:, None]).astype(float)
    else:
        z = (edges[None, :] - mean[:, None]) / sd
        cdf = ndtr(z)
    n = len(s)
    P = np.empty((len(mean), n))
    P[:, 0] = cdf[:, 0]
    P[:, 1:-1] = np.diff(cdf, axis=1)
    if sd == 0:
        P[:, -1] = 1.0 - cdf[:, -1]
    else:
        P[:, -1] = ndtr(-z[:, -1])  # upper tail without cancellation
    return np.clip(P, 0.0, None)


def build_transition_matrix(lat: Lattice, dt: float, p: ScaledParams,
                            tv_threshold: float | None = DEFAULT_TV_THRESHOLD,
                            sheppard: bool = True, n_ghost: int | None = None) -> TransitionMatrix:
    """Cell probabilities of the exact OU transition over dt; edge cells absorb the tails.

    Lumping each cell's mass onto its node adds ds^2/12 to the one-step
    variance.  With ``sheppard`` the Gaussian is narrowed by that amount
    first, so the lumped chain diffuses at the right rate even when
    ds^2 is comparable to sigma^2 dt.

    ``probs`` lumps the tails into the edge cells.  The split of that mass
    over ``n_ghost`` virtual nodes beyond each edge is kept as well, for
    the S-step's log-linear continuation of vt.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = lat.s
    if p.drift == 0:
        mean = s.copy()
        sd = p.sigma_s * math.sqrt(dt)
    else:
        decay = math.exp(-dt)
        mean = decay * s + (1.0 - decay) * p.mu_s
        sd = p.sigma_s * math.sqrt(-math.expm1(-2 * dt) / 2.0)
    if sheppard and sd > 0:
        var = sd * sd - lat.ds ** 2 / 12.0
        if var <= 0:
            raise GridCalibrationError(
                f"ds = {lat.ds:.3g} is too coarse for one-step deviation {sd:.3g}; need ds < sqrt(12)*sd")
        lump_sd = math.sqrt(var)
    else:
        lump_sd = sd
    # the same law on a grid padded by k ghost nodes per side; the outer
    # ghosts take the remaining tails
    k = n_ghost if n_ghost is not None else _default_ghosts(lat, lump_sd)
    pad = np.arange(1, k + 1) * lat.ds
    s_ext = np.concatenate([s[0] - pad[::-1], s, s[-1] + pad])
    ext = _gauss_cells(s_ext, lat.ds, mean, lump_sd)
    ext /= ext.sum(axis=1, keepdims=True)  # absorbs round-off only
    n = len(s)
    P = ext[:, k:k + n].copy()
    ghost_lo = ext[:, k - 1::-1].copy() if k else np.zeros((n, 0))  # nearest ghost first
    ghost_hi = ext[:, k + n:].copy()
    P[:, 0] += ghost_lo.sum(axis=1)
    P[:, -1] += ghost_hi.sum(axis=1)
    tm = TransitionMatrix(P, dt, lat.descriptor(), s, ghost_lo, ghost_hi)
    if tv_threshold is not None and p.drift != 0 and p.sigma_s > 0:
        rep = calibrate_grid(tm, p, lat, tv_threshold)
        if rep.flagged:
            raise GridCalibrationError(
                f"Markov-chain stationary law is {rep.tv_distance:.2e} (TV) from the OU law; "
                f"refine ds (threshold {tv_threshold:g})")
    return tm


@dataclass
class CalibrationReport:
    tv_distance: float
    threshold: float
    flagged: bool
    chain_stationary: np.ndarray = field(repr=False)
    ou_stationary: np.ndarray = field(repr=False)


def stationary_vector(P: np.ndarray, tol: float = 1e-14, max_iter: int = 200_000) -> np.ndarray:
    """Left Perron vector of a row-stochastic matrix by power iteration."""
    n = P.shape[0]
    pi = np.full(n, 1.0 / n)
    PT = P.T
    # squaring the transposed operator speeds up slow mixing chains
    op = PT.copy()
    for _ in range(max_iter):
        nxt = op @ pi
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - pi)) < tol:
            return nxt
        pi = nxt
        op = op @ op
        op /= op.sum(axis=0, keepdims=True)
    return pi


def calibrate_grid(tm: TransitionMatrix, p: ScaledParams, lat: Lattice | None = None,
                   threshold: float = DEFAULT_TV_THRESHOLD) -> CalibrationReport:
    """TV distance between the chain's stationary law and the discretised OU law."""
    if lat is None:
        lat = Lattice.from_descriptor(tm.lattice)
    chain = stationary_vector(tm.probs)
    sd = p.sigma_s / math.sqrt(2.0)
    ou = _gauss_cells(lat.s, lat.ds, np.array([p.mu_s]), sd)[0]
    tv = 0.5 * float(np.sum(np.abs(chain - ou)))
    return CalibrationReport(tv, threshold, tv > threshold, chain, ou)


def s_evolution_step(tv: TildeSurface, tm: TransitionMatrix, tails: str = "extrapolate") -> TildeSurface:
    """vt(s_i, q) <- sum_j p_ij vt(s_j, q) for every q.

    With ``tails="lump"`` the two edge cells carry vt at the edge node for
    their whole tail mass.  ``"extrapolate"`` instead spreads that mass over
    the ghost nodes and continues vt log-linearly through the two outermost
    nodes (v linear in s there), which keeps rows with large |q| accurate.
    Constant rows are treated identically by both.
    """
    x = tv.tilde_values
    scale = x.max(axis=1, keepdims=True)
    y = x / scale
    if tails == "lump":
        out = y @ tm.probs.T
    elif tails == "extrapolate":
        out = y @ tm.probs.T
        with np.errstate(divide="ignore"):
            logy = np.log(y)
        out += y[:, :1] * _ghost_excess(logy[:, 0] - logy[:, 1], tm.ghost_lo)
        out += y[:, -1:] * _ghost_excess(logy[:, -1] - logy[:, -2], tm.ghost_hi)
    else:
        raise ValueError(f"unknown tail treatment {tails!r}")
    out *= scale
    _guard(out)
    return TildeSurface(tv.tau, out, tv.norm_log)


def _ghost_excess(step_log: np.ndarray, ghost: np.ndarray) -> np.ndarray:
    """sum_k g_ik (r^k - 1) per row, where r = exp(step_log) is the edge ratio."""
    k = np.arange(1, ghost.shape[1] + 1)
    expo = np.minimum(np.outer(step_log, k), LOG_GUARD)
    return np.expm1(expo) @ ghost.T


def _default_ghosts(lat: Lattice, sd: float) -> int:
    # cover 8 deviations plus the tilt of rows with slope up to q_cap + 5
    if sd == 0:
        return 1
    return int(math.ceil((8 * sd + (lat.q_cap + 5) * sd * sd) / lat.ds)) + 2


# ------------------------------------------------------------ Q evolution

@dataclass
class QPropagator:
    """exp(dt * eta * Adj) for the path graph on 2Q+1 inventory states.

    ``matrix`` is summed from the Taylor series of the nonnegative generator
    (with squaring), so every entry carries full relative precision.  The
    closed sine eigenbasis is kept for diagnostics.
    """

    dt: float
    eta: float
    dim: int
    eigenvalues: np.ndarray = field(repr=False)
    eigenvectors: np.ndarray = field(repr=False)
    matrix: np.ndarray = field(repr=False)

    def spectral_matrix(self) -> np.ndarray:
        V = self.eigenvectors
        return (V * np.exp(self.dt * self.eigenvalues)) @ V.T


def path_generator(dim: int, eta: float) -> np.ndarray:
    G = np.zeros((dim, dim))
    if dim > 1:
        i = np.arange(dim - 1)
        G[i, i + 1] = eta
        G[i + 1, i] = eta
    return G


def sine_basis(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of the unit path adjacency: 2 cos(k pi/(n+1)), sin(j k pi/(n+1))."""
    k = np.arange(1, dim + 1)
    theta = k * math.pi / (dim + 1)
    V = math.sqrt(2.0 / (dim + 1)) * np.sin(np.outer(k, theta))
    return 2.0 * np.cos(theta), V


def nonneg_expm(G: np.ndarray) -> np.ndarray:
    """exp(G) for entrywise nonnegative G by Taylor series and squaring."""
    if np.any(G < 0):
        raise ValueError("generator must be entrywise nonnegative")
    dim = G.shape[0]
    norm = float(np.max(G.sum(axis=1))) if dim else 0.0
    squarings = max(0, math.ceil(math.log2(norm / 0.5))) if norm > 0.5 else 0
    X = G / 2.0 ** squarings
    E = np.eye(dim)
    term = np.eye(dim)
    for k in range(1, 400):
        term = term @ X / k
        E += term
        if k >= dim and not np.any(term > 1e-17 * E):
            break
    for _ in range(squarings):
        E = E @ E
    return E


def build_q_propagator(q_cap: int, eta: float, dt: float) -> QPropagator:
    dim = 2 * q_cap + 1
    lam, V = sine_basis(dim)
    return QPropagator(dt, eta, dim, eta * lam, V, nonneg_expm(dt * path_generator(dim, eta)))


def q_evolution_step(tv: TildeSurface, qp: QPropagator, p: ScaledParams, s: np.ndarray) -> TildeSurface:
    """Exact fill-term evolution over dt in the w = exp(kappa (v - s q)) variables."""
    k = p.kappa_s
    Q = (qp.dim - 1) // 2
    q = np.arange(-Q, Q + 1, dtype=float)[:, None]
    v = -np.log(tv.tilde_values) - tv.norm_log
    logw = k * (v - q * s[None, :])
    shift = logw.max(axis=0, keepdims=True)  # per-column scale; the map is linear in w
    w = qp.matrix @ np.exp(logw - shift)
    v_new = q * s[None, :] + (np.log(w) + shift) / k
    out = np.exp(-(v_new + tv.norm_log))
    _guard(out)
    return TildeSurface(tv.tau, out, tv.norm_log)


def _guard(x: np.ndarray) -> None:
    top = float(x.max())
    bottom = float(x.min())
    if not (bottom > 0 and math.log(top) - math.log(bottom) <= LOG_GUARD):
        raise Underflow("exp(-v) spans more than exp(700); use the finite-difference solver")


def normalize(tv: TildeSurface) -> TildeSurface:
    c = float(tv.tilde_values.max())
    return TildeSurface(tv.tau, tv.tilde_values / c, tv.norm_log + math.log(c))


# ------------------------------------------------------------------ driver

@dataclass
class SplitStepResult:
    snapshots: list[ValueSurface]
    policies: list[PolicySurface]
    v_tau_estimate: float


def terminal_tilde(lat: Lattice) -> TildeSurface:
    L = -np.multiply.outer(lat.q.astype(float), lat.s)  # log of exp(-q s)
    top = float(L.max())
    out = np.exp(L - top)
    _guard(out)
    return TildeSurface(0.0, out, top)


def splitstep_solve(p: ScaledParams, lat: Lattice, snapshot_times=None, *,
                    tv_threshold: float | None = DEFAULT_TV_THRESHOLD,
                    normalize_steps: bool = True, tails: str = "extrapolate",
                    richardson: bool = False) -> SplitStepResult:
    """Q-evolution, then S-evolution, then rescaling, for every backward step.

    With ``richardson`` the run is repeated at dt/2 and the snapshots are
    combined as 2*fine - coarse, removing the first-order splitting error.
    """
    if snapshot_times is not None:
        lat = Lattice.from_descriptor({**lat.descriptor(), "snapshot_times": tuple(snapshot_times)})
    if richardson:
        kw = dict(tv_threshold=tv_threshold, normalize_steps=normalize_steps, tails=tails)
        coarse = splitstep_solve(p, lat, **kw)
        fine = splitstep_solve(p, halved(lat), **kw)
        snaps = richardson_combine(coarse.snapshots, fine.snapshots)
        v_tau = 2 * fine.v_tau_estimate - coarse.v_tau_estimate
        return SplitStepResult(snaps, [extract_policy(sn, p, lat.s) for sn in snaps], v_tau)
    tm = build_transition_matrix(lat, lat.dt, p, tv_threshold)
    qp = build_q_propagator(lat.q_cap, p.constants.eta_q, lat.dt)
    s = lat.s
    wanted = set(lat.snapshot_steps())
    tv = terminal_tilde(lat)
    snaps: list[ValueSurface] = []
    if 0 in wanted or lat.n_t == 0:
        snaps.append(tv.to_value_surface())
    prev = tv
    for n in range(1, lat.n_t + 1):
        prev = tv
        try:
            nxt = q_evolution_step(tv, qp, p, s)
            nxt = s_evolution_step(nxt, tm, tails)
        except SolverError as e:
            raise type(e)(str(e), n) from None
        tv = normalize(nxt) if normalize_steps else nxt
        tv.tau = n * lat.dt
        if n in wanted:
            snaps.append(tv.to_value_surface())
    if lat.n_t > 0:
        i = lat.q_cap
        dv = (tv.to_value_surface().values[i] - prev.to_value_surface().values[i]) / lat.dt
        v_tau = float(np.interp(lat.mu, s, dv))
    else:
        v_tau = float("nan")
    policies = [extract_policy(sn, p, s) for sn in snaps]
    return SplitStepResult(snaps, policies, v_tau)
