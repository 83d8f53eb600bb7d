"""Discrete (tau, q, s) domain and value-surface storage."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import ScaledParams

DEFAULT_WIDTH_STDDEVS = 5.0
DEFAULT_Q_CAP = 30
MAX_DRIFT_CELLS = 1e3


class BoundaryMode(str, enum.Enum):
    """Numerical boundary at q = +-Q."""

    CAP = "cap"  # buying forbidden at Q, selling forbidden at -Q
    ZERO2ND = "zero2nd"  # v(Q) - v(Q-1) = v(Q-1) - v(Q-2)

    @classmethod
    def parse(cls, x) -> "BoundaryMode":
        if isinstance(x, cls):
            return x
        aliases = {"inventorycap": "cap", "zerosecondderivativeinq": "zero2nd"}
        key = str(x).strip().lower()
        return cls(aliases.get(key, key))


@dataclass(frozen=True)
class Lattice:
    """Uniform price grid x bounded inventory x uniform backward-time steps.

    Grid points are ``center + (j - (n_s-1)/2) * ds``; ``center`` and ``ds``
    are snapped to a common power-of-two unit so every point and every
    spacing is exactly representable.
    """

    s_min: float
    s_max: float
    n_s: int
    ds: float
    q_cap: int
    dt: float
    n_t: int
    snapshot_times: tuple[float, ...]
    mu: float
    center: float = field(repr=False, default=0.0)

    def __post_init__(self):
        if self.n_s < 3:
            raise ValueError("n_s must be >= 3")
        if not (self.s_min < self.mu < self.s_max):
            raise ValueError("grid must straddle the long-term mean")
        if self.q_cap < 1:
            raise ValueError("q_cap must be >= 1")
        if self.dt <= 0 or self.n_t < 0:
            raise ValueError("need dt > 0 and n_t >= 0")

    @property
    def s(self) -> np.ndarray:
        offsets = np.arange(self.n_s) - (self.n_s - 1) / 2.0
        return self.center + offsets * self.ds

    @property
    def q(self) -> np.ndarray:
        return np.arange(-self.q_cap, self.q_cap + 1)

    @property
    def n_q(self) -> int:
        return 2 * self.q_cap + 1

    @property
    def horizon(self) -> float:
        return self.n_t * self.dt

    def q_index(self, q: int) -> int:
        if abs(q) > self.q_cap:
            raise IndexError(f"inventory {q} outside [-{self.q_cap}, {self.q_cap}]")
        return q + self.q_cap

    def snapshot_steps(self) -> list[int]:
        return sorted({min(self.n_t, int(round(t / self.dt))) for t in self.snapshot_times})

    def descriptor(self) -> dict:
        return {
            "s_min": self.s_min, "s_max": self.s_max, "n_s": self.n_s, "ds": self.ds,
            "q_cap": self.q_cap, "dt": self.dt, "n_t": self.n_t,
            "snapshot_times": list(self.snapshot_times), "mu": self.mu, "center": self.center,
        }

    @classmethod
    def from_descriptor(cls, d: dict) -> "Lattice":
        d = dict(d)
        d["snapshot_times"] = tuple(d["snapshot_times"])
        return cls(**d)

    def same_grid(self, other: "Lattice") -> bool:
        return (self.n_s == other.n_s and self.q_cap == other.q_cap
                and self.ds == other.ds and self.center == other.center)


def _pow2_unit(max_abs: float) -> float:
    # spacing of doubles in [2^(e-1), 2^e) containing max_abs
    e = math.frexp(max_abs)[1] if max_abs > 0 else -1000
    return math.ldexp(1.0, e - 52)


def build_lattice(
    p: ScaledParams,
    width_stddevs: float = DEFAULT_WIDTH_STDDEVS,
    q_cap: int = DEFAULT_Q_CAP,
    dt: float = 0.01,
    horizon: float | None = None,
    snapshot_times=None,
    n_s: int = 201,
    half_width: float | None = None,
) -> Lattice:
    """Build the computational lattice around the long-term mean.

    The half width of the price grid is ``width_stddevs`` stationary standard
    deviations (sigma/sqrt(2) in scaled units) unless ``half_width`` is given,
    which is required when sigma = 0 or the reference is Brownian.
    """
    if width_stddevs <= 0:
        raise ValueError("width_stddevs must be positive")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if horizon is None:
        horizon = p.T_s
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if half_width is None:
        if p.sigma_s == 0 or p.drift == 0:
            raise ValueError("half_width is required when sigma = 0 or alpha = 0")
        half_width = width_stddevs * p.sigma_s / math.sqrt(2.0)
    if not half_width > 0:
        raise ValueError("half_width must be positive")
    n_s = int(n_s)
    if n_s < 3:
        raise ValueError("n_s must be >= 3")

    mu = p.mu_s
    unit = _pow2_unit(abs(mu) + 1.5 * half_width)
    center = round(mu / unit) * unit
    ds = 2.0 * half_width / (n_s - 1)
    ds = max(2, round(ds / (2 * unit))) * 2 * unit
    offsets = np.arange(n_s) - (n_s - 1) / 2.0
    s = center + offsets * ds

    n_t = int(math.ceil(horizon / dt - 1e-9)) if horizon > 0 else 0
    if snapshot_times is None:
        snapshot_times = (0.0, n_t * dt)
    snaps = tuple(sorted(float(t) for t in snapshot_times))
    if snaps and (snaps[0] < 0 or snaps[-1] > n_t * dt + 1e-9 * max(1.0, horizon)):
        raise ValueError(f"snapshot times must lie in [0, {horizon}]")

    s_max = float(s[-1])
    if dt * abs(mu - s_max) / ds > MAX_DRIFT_CELLS:
        raise ValueError(
            f"drift resolution too poor: dt*|mu - s_max|/ds = {dt * abs(mu - s_max) / ds:.3g} > {MAX_DRIFT_CELLS:g}")
    return Lattice(
        s_min=float(s[0]), s_max=s_max, n_s=n_s, ds=float(ds), q_cap=int(q_cap),
        dt=float(dt), n_t=n_t, snapshot_times=snaps, mu=mu, center=float(center),
    )


@dataclass
class ValueSurface:
    """v(tau, q, s_j) in scaled units; ``values[q + Q, j]``."""

    tau: float
    values: np.ndarray
    boundary_mode: BoundaryMode = BoundaryMode.CAP

    def __post_init__(self):
        self.boundary_mode = BoundaryMode.parse(self.boundary_mode)
        if self.values.ndim != 2:
            raise ValueError("values must be a (2Q+1, n_s) array")

    @property
    def q_cap(self) -> int:
        return (self.values.shape[0] - 1) // 2

    def at(self, q: int) -> np.ndarray:
        return self.values[q + self.q_cap]

    def copy(self) -> "ValueSurface":
        return ValueSurface(self.tau, self.values.copy(), self.boundary_mode)


def terminal_condition(lat: Lattice, boundary_mode=BoundaryMode.CAP) -> ValueSurface:
    values = np.multiply.outer(lat.q.astype(float), lat.s)
    return ValueSurface(tau=0.0, values=values, boundary_mode=boundary_mode)


def halved(lat: Lattice) -> Lattice:
    """The same lattice with dt halved and the horizon kept."""
    return replace(lat, dt=lat.dt / 2, n_t=2 * lat.n_t)


def richardson_combine(coarse: list[ValueSurface], fine: list[ValueSurface]) -> list[ValueSurface]:
    """2*fine - coarse for matching snapshots; cancels the O(dt) error term."""
    if len(coarse) != len(fine):
        raise ValueError("snapshot lists differ in length")
    out = []
    for c, f in zip(coarse, fine):
        if not math.isclose(c.tau, f.tau, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError(f"snapshot times differ: {c.tau} vs {f.tau}")
        out.append(ValueSurface(f.tau, 2.0 * f.values - c.values, f.boundary_mode))
    return out
