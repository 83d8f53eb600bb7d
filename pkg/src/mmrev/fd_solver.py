"""Fully implicit finite differences in backward time with fixed-point iteration.

Per step the unknown surface v^{n+1} appears linearly through the time
derivative, diffusion and upwind drift; the squared gradient and the two
exponential fill terms are evaluated at the previous iterate.  The fill
terms' derivative in v(q) is moved to the implicit side, which keeps the
iteration contractive when those terms are large (big |q| or wide s grids)
without changing its fixed point.  Every iterate costs one tridiagonal
solve in s per inventory level.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .lattice import BoundaryMode, Lattice, ValueSurface, halved, richardson_combine, terminal_condition
from .model import ScaledParams
from .policy import PolicySurface, extract_policy

log = logging.getLogger(__name__)

EXP_GUARD = 700.0


class SolverError(RuntimeError):
    """Numerical failure; ``step`` is the time index when known."""

    def __init__(self, msg, step=None):
        super().__init__(msg if step is None else f"{msg} (time step {step})")
        self.step = step


class NonConvergence(SolverError):
    pass


class Overflow(SolverError):
    pass


@dataclass(frozen=True)
class FdConfig:
    picard_tol: float = 1e-10
    picard_max_iters: int = 200
    relaxation: float = 1.0
    boundary_mode: BoundaryMode = BoundaryMode.CAP
    linearize_gradient: bool = True

    def __post_init__(self):
        if not self.picard_tol > 0:
            raise ValueError("picard_tol must be positive")
        if self.picard_max_iters < 1:
            raise ValueError("picard_max_iters must be >= 1")
        if not 0 < self.relaxation <= 1:
            raise ValueError("relaxation must lie in (0, 1]")
        object.__setattr__(self, "boundary_mode", BoundaryMode.parse(self.boundary_mode))


@dataclass
class FdResult:
    snapshots: list[ValueSurface]
    policies: list[PolicySurface]
    v_tau_estimate: float
    iterations: list[int]


class _Stepper:
    """Pre-assembled operator for one lattice/parameter pair."""

    def __init__(self, lat: Lattice, p: ScaledParams, cfg: FdConfig):
        self.lat, self.p, self.cfg = lat, p, cfg
        self.s = lat.s
        dt, ds = lat.dt, lat.ds
        n = lat.n_s
        s = self.s
        sig2 = p.sigma_s ** 2
        b = p.drift * (p.mu_s - s)  # drift coefficient mu - s
        up = b > 0  # information flows from larger s
        dn = b < 0
        diff = dt * sig2 / (2 * ds * ds)
        adv = dt * np.abs(b) / ds

        diag = 1.0 + 2 * diff + adv
        upper = -diff - np.where(up, adv, 0.0)
        lower = -diff - np.where(dn, adv, 0.0)
        # edges: zero second derivative, one-sided drift (it points inward)
        diag[0] = 1.0 + adv[0]
        upper[0] = -adv[0]
        lower[0] = 0.0
        diag[-1] = 1.0 + adv[-1]
        lower[-1] = -adv[-1]
        upper[-1] = 0.0

        margin = np.abs(diag) - np.abs(upper) - np.abs(lower)
        if np.any(margin <= 0):
            raise SolverError("implicit operator is not strictly diagonally dominant")

        self.diag, self.upper, self.lower = diag, upper, lower

        self.grad_coef = dt * sig2 / 2.0
        self.inv_2ds = 1.0 / (2 * ds)
        self.inv_ds = 1.0 / ds
        c = p.constants
        self.src = dt * c.M
        self.kappa = p.kappa_s

    def gradient(self, v: np.ndarray) -> np.ndarray:
        g = np.empty_like(v)
        g[:, 1:-1] = (v[:, 2:] - v[:, :-2]) * self.inv_2ds
        g[:, 0] = (v[:, 1] - v[:, 0]) * self.inv_ds
        g[:, -1] = (v[:, -1] - v[:, -2]) * self.inv_ds
        return g

    def gradient_sq(self, v: np.ndarray) -> np.ndarray:
        g = self.gradient(v)
        return g * g

    def _solve_linearized(self, rhs: np.ndarray, g: np.ndarray, d_extra: np.ndarray) -> np.ndarray:
        """Solve with sigma^2/2 * v_s^2 replaced by sigma^2/2 * (2 g v_s - g^2).

        The g^2 part is already on the right-hand side; ``d_extra`` is added
        to the diagonal.  Every q row gets its own tridiagonal matrix; they
        are stacked into one banded system with zero coupling between rows.
        """
        nq, n = g.shape
        c = self.grad_coef * self.inv_ds  # dt sigma^2 / (2 ds)
        diag = self.diag + d_extra
        upper = np.broadcast_to(self.upper, g.shape).copy()
        lower = np.broadcast_to(self.lower, g.shape).copy()
        upper[:, 1:-1] += c * g[:, 1:-1]
        lower[:, 1:-1] -= c * g[:, 1:-1]
        diag[:, 0] -= 2 * c * g[:, 0]
        upper[:, 0] += 2 * c * g[:, 0]
        diag[:, -1] += 2 * c * g[:, -1]
        lower[:, -1] -= 2 * c * g[:, -1]
        ab = np.zeros((3, nq * n))
        up = upper.copy()
        up[:, -1] = 0.0
        lo = lower.copy()
        lo[:, 0] = 0.0
        ab[0, 1:] = up.ravel()[:-1]
        ab[1] = diag.ravel()
        ab[2, :-1] = lo.ravel()[1:]
        return solve_banded((1, 1), ab, rhs.ravel(), check_finite=False).reshape(nq, n)

    def source(self, v: np.ndarray, step) -> tuple[np.ndarray, np.ndarray]:
        """Fill terms and minus their derivative in v(q), both times dt."""
        k, s = self.kappa, self.s
        out = np.zeros_like(v)
        if self.src == 0.0:
            return out, out.copy()
        # ask fill (q -> q-1) exists for q > -Q, bid fill for q < Q
        e_ask = -k * (-s - v[:-1] + v[1:])
        e_bid = -k * (s - v[1:] + v[:-1])
        worst = max(float(np.max(e_ask, initial=-np.inf)), float(np.max(e_bid, initial=-np.inf)))
        if worst > EXP_GUARD:
            raise Overflow(f"fill-term exponent {worst:.1f} exceeds {EXP_GUARD:g}", step)
        out[1:] += np.exp(e_ask)
        out[:-1] += np.exp(e_bid)
        return self.src * out, (self.src * k) * out

    def enforce_q_boundary(self, v: np.ndarray) -> None:
        if self.cfg.boundary_mode is BoundaryMode.ZERO2ND and v.shape[0] >= 3:
            v[-1] = 2 * v[-2] - v[-3]
            v[0] = 2 * v[1] - v[2]

    def step(self, v_n: np.ndarray, step_index=None, guess=None) -> tuple[np.ndarray, int]:
        cfg = self.cfg
        relax = cfg.relaxation
        v_k = v_n.copy() if guess is None else guess
        prev_change = np.inf
        for it in range(1, cfg.picard_max_iters + 1):
            src, d = self.source(v_k, step_index)
            rhs = v_n + src + d * v_k
            if self.grad_coef and cfg.linearize_gradient:
                g = self.gradient(v_k)
                rhs += self.grad_coef * g * g
            else:
                g = np.zeros_like(v_k)
                if self.grad_coef:
                    rhs -= self.grad_coef * self.gradient_sq(v_k)
            v_new = self._solve_linearized(rhs, g, d)
            self.enforce_q_boundary(v_new)
            if relax != 1.0:
                v_new = relax * v_new + (1.0 - relax) * v_k
            change = float(np.max(np.abs(v_new - v_k)))
            if not np.isfinite(change):
                raise NonConvergence("fixed-point iterate became non-finite", step_index)
            v_k = v_new
            if change <= cfg.picard_tol:
                return v_k, it
            if it > 2 and change > prev_change and relax > 0.5:
                relax = 0.5
                log.debug("step %s: oscillation detected, relaxation -> 0.5", step_index)
            prev_change = change
        raise NonConvergence(
            f"fixed-point iteration did not reach {cfg.picard_tol:g} in {cfg.picard_max_iters} iterations",
            step_index)


def fd_step(v_n: ValueSurface, lat: Lattice, p: ScaledParams, cfg: FdConfig | None = None,
            _stepper: _Stepper | None = None) -> ValueSurface:
    """Advance one backward time step."""
    cfg = cfg or FdConfig()
    st = _stepper or _Stepper(lat, p, cfg)
    vals, _ = st.step(v_n.values)
    return ValueSurface(v_n.tau + lat.dt, vals, cfg.boundary_mode)


def v_tau_at_mean(v_now: np.ndarray, v_prev: np.ndarray, lat: Lattice, dt: float) -> float:
    i = lat.q_cap
    s = lat.s
    return float(np.interp(lat.mu, s, (v_now[i] - v_prev[i]) / dt))


def fd_solve(p: ScaledParams, lat: Lattice, cfg: FdConfig | None = None,
             initial: ValueSurface | None = None, richardson: bool = False) -> FdResult:
    """Step from the terminal surface to tau = n_t * dt, keeping snapshots.

    With ``richardson`` the run is repeated at dt/2 and the snapshots are
    combined as 2*fine - coarse, removing the first-order time error.
    """
    cfg = cfg or FdConfig()
    if richardson:
        coarse = fd_solve(p, lat, cfg, initial)
        fine = fd_solve(p, halved(lat), cfg, initial)
        snaps = richardson_combine(coarse.snapshots, fine.snapshots)
        return FdResult(snaps, [extract_policy(sn, p, lat.s) for sn in snaps],
                        2 * fine.v_tau_estimate - coarse.v_tau_estimate,
                        coarse.iterations + fine.iterations)
    st = _Stepper(lat, p, cfg)
    v0 = initial if initial is not None else terminal_condition(lat, cfg.boundary_mode)
    v = v0.values.copy()
    if initial is not None:
        st.enforce_q_boundary(v)
    wanted = set(lat.snapshot_steps())
    snaps: list[ValueSurface] = []
    iters: list[int] = []
    if 0 in wanted or lat.n_t == 0:
        snaps.append(ValueSurface(v0.tau, v.copy(), cfg.boundary_mode))
    v_prev = None
    for n in range(1, lat.n_t + 1):
        # linear extrapolation in tau as the first iterate
        guess = None if v_prev is None else 2 * v - v_prev
        v_prev = v
        v, k = st.step(v, n, guess)
        iters.append(k)
        if n in wanted:
            snaps.append(ValueSurface(v0.tau + n * lat.dt, v.copy(), cfg.boundary_mode))
    v_tau = v_tau_at_mean(v, v_prev, lat, lat.dt) if lat.n_t > 0 else float("nan")
    policies = [extract_policy(sn, p, lat.s) for sn in snaps]
    return FdResult(snaps, policies, v_tau, iters)
