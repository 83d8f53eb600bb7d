"""Command-line entry point: solve, simulate, equilibrium, compare.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .equilibrium import (BracketNotFound, ShootingError, compare_to_limit, seed_from_v_tau,
                          solve_equilibrium, write_csv as write_equilibrium_csv)
from .fd_solver import FdConfig, SolverError, fd_solve
from .lattice import BoundaryMode, Lattice, ValueSurface, build_lattice
from .model import MODEL_KEYS, ModelParams, ScaledParams, read_keyvalue, to_scaled
from .persist import FormatError, read_surface, write_policy_csv, write_surface, write_surface_csv
from .policy import (PolicySurface, baseline_table, extract_policy, gueant_asymptotic_spreads,
                     q_insensitivity, s_insensitivity, scaled_constant_limits)
from .simulator import (BaselinePolicy, QuoteUnavailable, SimPath, SurfacePolicy, batch_stats,
                        check_dt, lag_diagnostic, simulate_batch)
from .splitstep import GridCalibrationError, splitstep_solve

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SOLVERS = ("fd", "splitstep")
SIM_POLICIES = ("fd", "splitstep", "constant", "zhang", "linear")
DEFAULT_SNAPSHOTS = (0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0)
NUMERIC_ERRORS = (SolverError, BracketNotFound, ShootingError, GridCalibrationError, QuoteUnavailable,
                  FloatingPointError, ArithmeticError)


class ConfigError(ValueError):
    pass


def _bool(x: str) -> bool:
    v = str(x).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {x!r}")


def _floats(x: str) -> tuple[float, ...]:
    return tuple(float(t) for t in str(x).replace(",", " ").split())


def _opt_float(x: str):
    return None if str(x).strip().lower() in ("none", "") else float(x)


# key -> parser; every key lives in exactly one block
LATTICE_KEYS = {"width_stddevs": float, "n_s": int, "q_cap": int, "dt": float, "horizon": float,
                "snapshot_times": _floats, "half_width": _opt_float}
SOLVER_KEYS = {"solver": str, "picard_tol": float, "picard_max_iters": int, "boundary_mode": str,
               "richardson": _bool, "tv_threshold": _opt_float}
SIM_KEYS = {"paths": int, "seed": int, "dt_sim": float, "q0": int, "policy": str, "write_paths": int,
            "sim_snapshots": int}


@dataclass
class RunConfig:
    """Everything one CLI run needs.

    Times (dt, horizon, snapshot_times, dt_sim) are in mean-reversion cycles
    (1/alpha); with alpha = 0 they are in model time units.  half_width is a
    market price distance.
    """

    model: ModelParams
    width_stddevs: float = 5.0
    n_s: int = 201
    q_cap: int = 30
    dt: float = 0.01
    horizon: float | None = None
    snapshot_times: tuple[float, ...] | None = None
    half_width: float | None = None
    solver: str = "fd"
    picard_tol: float = 1e-10
    picard_max_iters: int = 200
    boundary_mode: str = "cap"
    richardson: bool = False
    tv_threshold: float | None = 1e-3
    paths: int = 100
    seed: int = 0
    dt_sim: float = 1.0 / 500.0
    q0: int = 0
    policy: str = "fd"
    write_paths: int = 10
    sim_snapshots: int = 200
    out: Path = field(default_factory=lambda: Path("."))

    def __post_init__(self):
        if self.horizon is None:
            self.horizon = self.model.T * (self.model.alpha if self.model.alpha > 0 else 1.0)
        if self.snapshot_times is None:
            self.snapshot_times = (0.0,) + tuple(t for t in DEFAULT_SNAPSHOTS if t < self.horizon) + (self.horizon,)
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.policy not in SIM_POLICIES:
            raise ConfigError(f"policy must be one of {SIM_POLICIES}, got {self.policy!r}")
        if self.paths < 1:
            raise ConfigError("paths must be >= 1")
        if self.dt_sim <= 0:
            raise ConfigError("dt_sim must be positive")
        if self.sim_snapshots < 1:
            raise ConfigError("sim_snapshots must be >= 1")
        try:
            BoundaryMode.parse(self.boundary_mode)
        except ValueError:
            raise ConfigError(f"unknown boundary_mode {self.boundary_mode!r}") from None
        self.fd_config()
        self.lattice()

    @classmethod
    def from_mapping(cls, m: dict, out=None) -> "RunConfig":
        unknown = set(m) - set(MODEL_KEYS) - set(LATTICE_KEYS) - set(SOLVER_KEYS) - set(SIM_KEYS)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        model = ModelParams.from_mapping(m)
        kw = {}
        for table in (LATTICE_KEYS, SOLVER_KEYS, SIM_KEYS):
            for k, conv in table.items():
                if k in m:
                    kw[k] = conv(m[k])
        if out is not None:
            kw["out"] = Path(out)
        return cls(model=model, **kw)

    @classmethod
    def from_file(cls, path, out=None) -> "RunConfig":
        return cls.from_mapping(read_keyvalue(path), out)

    @property
    def scaled(self) -> ScaledParams:
        return to_scaled(self.model)

    @property
    def time_scale(self) -> float:
        return self.model.alpha if self.model.alpha > 0 else 1.0

    def fd_config(self) -> FdConfig:
        return FdConfig(picard_tol=self.picard_tol, picard_max_iters=self.picard_max_iters,
                        boundary_mode=self.boundary_mode)

    def lattice(self, snapshot_times=None) -> Lattice:
        hw = None if self.half_width is None else self.half_width * self.model.gamma
        return build_lattice(self.scaled, self.width_stddevs, self.q_cap, self.dt, self.horizon,
                             self.snapshot_times if snapshot_times is None else snapshot_times,
                             n_s=self.n_s, half_width=hw)

    def hash_payload(self) -> dict:
        keys = ("width_stddevs", "n_s", "q_cap", "dt", "horizon", "snapshot_times", "half_width",
                "picard_tol", "picard_max_iters", "boundary_mode", "richardson", "tv_threshold")
        d = {"model": asdict(self.model)}
        d.update({k: getattr(self, k) for k in keys})
        d["snapshot_times"] = list(d["snapshot_times"])
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.hash_payload(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def sim_model(self) -> ModelParams:
        return replace(self.model, T=self.horizon / self.time_scale)


# ------------------------------------------------------------------ solving

@dataclass
class Solved:
    snapshots: list[ValueSurface]
    policies: list[PolicySurface]
    v_tau_estimate: float
    lattice: Lattice


def run_solver(cfg: RunConfig, solver: str | None = None, snapshot_times=None) -> Solved:
    solver = solver or cfg.solver
    lat = cfg.lattice(snapshot_times)
    p = cfg.scaled
    if solver == "fd":
        r = fd_solve(p, lat, cfg.fd_config(), richardson=cfg.richardson)
    else:
        r = splitstep_solve(p, lat, tv_threshold=cfg.tv_threshold, richardson=cfg.richardson)
    return Solved(r.snapshots, r.policies, r.v_tau_estimate, lat)


def regime_report(cfg: RunConfig, solved: Solved) -> list[dict]:
    """s- and q-insensitivity of the quotes at every snapshot, |q| <= q_cap/4."""
    p = cfg.scaled
    g = cfg.model.gamma
    qm = max(1, cfg.q_cap // 4)
    ask_lim, bid_lim = scaled_constant_limits(p)
    rows = []
    for pol in solved.policies:
        s_ins = max(s_insensitivity(pol, qm, "ask"), s_insensitivity(pol, qm, "bid"))
        q_ins = max(q_insensitivity(pol, qm, ask_lim, "ask"), q_insensitivity(pol, qm, bid_lim, "bid"))
        rows.append({"tau": pol.tau / cfg.time_scale, "q_max": qm,
                     "s_insensitivity_scaled": s_ins, "q_insensitivity_scaled": q_ins,
                     "s_insensitivity": s_ins / g, "q_insensitivity": q_ins / g})
    return rows


def _stamp(cfg_hash: str) -> dict:
    return {"version": __version__, "config_hash": cfg_hash}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def cmd_solve(cfg: RunConfig, args) -> int:
    solver = args.solver or cfg.solver
    solved = run_solver(cfg, solver)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash
    extra = {"model": asdict(cfg.model), "solver": solver, "v_tau_estimate": solved.v_tau_estimate,
             "richardson": cfg.richardson}
    names = []
    for k, sn in enumerate(solved.snapshots):
        name = f"surface_{k:03d}.mmrv"
        write_surface(out / name, sn, solved.lattice, cfg.scaled, h, extra)
        names.append(name)
    write_surface_csv(out / "surfaces.csv", solved.snapshots, solved.lattice, h)
    write_policy_csv(out / "policies.csv", solved.policies, solved.lattice, cfg.model, h)
    report = {**_stamp(h), "solver": solver, "v_tau_estimate": solved.v_tau_estimate,
              "surfaces": names, "regimes": regime_report(cfg, solved)}
    _write_json(out / "report.json", report)
    print(f"solved {len(names)} snapshots with {solver}; v_tau at mu = {solved.v_tau_estimate:.10g}")
    for r in report["regimes"]:
        print(f"  tau={r['tau']:<10.6g} s-insensitivity={r['s_insensitivity']:.3e}  "
              f"q-insensitivity={r['q_insensitivity']:.3e}")
    return EXIT_OK


# ------------------------------------------------------------- simulating

def _sim_policy(cfg: RunConfig, name: str):
    if name in ("fd", "splitstep"):
        n = cfg.sim_snapshots
        # denser near tau = 0, where quotes move fastest
        u = np.linspace(0.0, 1.0, n + 1)
        times = tuple(sorted(set(float(x) for x in cfg.horizon * u * u)))
        solved = run_solver(cfg, name, times)
        return SurfacePolicy(solved.policies, solved.lattice, cfg.model)
    return BaselinePolicy(name, cfg.model, cfg.q_cap)


def write_path_csv(path: Path, sp: SimPath, dt: float, cfg_hash: str) -> None:
    n = len(sp.t)
    ask_fill = np.zeros(n, dtype=int)
    bid_fill = np.zeros(n, dtype=int)
    for side, t, _ in sp.fills:
        k = min(n - 1, int(round(t / (dt * sp.stride))))
        (ask_fill if side > 0 else bid_fill)[k] = 1
    with open(path, "w") as fh:
        fh.write(f"# mmrev {__version__} config_hash={cfg_hash} units=market\n")
        fh.write("t,S,ask,bid,Q,X,W,ask_fill,bid_fill\n")
        for i in range(n):
            fh.write(",".join([repr(float(sp.t[i])), repr(float(sp.S[i])), repr(float(sp.ask[i])),
                               repr(float(sp.bid[i])), str(int(sp.Q[i])), repr(float(sp.X[i])),
                               repr(float(sp.W[i])), str(ask_fill[i]), str(bid_fill[i])]) + "\n")


def cmd_simulate(cfg: RunConfig, args) -> int:
    name = args.policy or cfg.policy
    n_paths = args.paths if args.paths is not None else cfg.paths
    seed = args.seed if args.seed is not None else cfg.seed
    dt_cycles = args.dt_sim if args.dt_sim is not None else cfg.dt_sim
    n_write = min(n_paths, cfg.write_paths if args.write_paths is None else args.write_paths)
    if cfg.horizon <= 0:
        raise ConfigError("simulation needs a positive horizon")
    mp = cfg.sim_model()
    dt = dt_cycles / cfg.time_scale
    if abs(cfg.q0) > cfg.q_cap:
        raise ConfigError(f"q0 = {cfg.q0} outside [-{cfg.q_cap}, {cfg.q_cap}]")
    try:
        check_dt(mp, dt)
    except ValueError as e:
        raise ConfigError(str(e)) from None

    policy = _sim_policy(cfg, name)
    n_steps = int(math.ceil(mp.T / dt - 1e-9))
    # terminal values and fills only; full paths are re-run for the files
    paths = simulate_batch(policy, mp, dt, seed, n_paths, cfg.q0, cfg.q_cap, stride=max(1, n_steps))
    summary = batch_stats(paths, mp.gamma, mp.T)
    full = simulate_batch(policy, mp, dt, seed, n_write, cfg.q0, cfg.q_cap) if n_write else []
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash
    pdir = out / "paths"
    if full:
        pdir.mkdir(exist_ok=True)
    for i, sp in enumerate(full):
        write_path_csv(pdir / f"path_{i:05d}.csv", sp, dt, h)
    d = {**_stamp(h), "policy": name, "seed": seed, "dt": dt, "q0": cfg.q0, **summary.to_dict()}
    d["utility_estimate"] = d.pop("utility")
    d["se_W"] = math.sqrt(summary.var_W / summary.n_paths)
    d["se_Q"] = math.sqrt(summary.var_Q / summary.n_paths)
    if full:
        block = max(1, n_steps // 100)
        lags, corr, peak = lag_diagnostic(full, max_lag=10, block=block)
        d["lag_peak_steps"] = peak
        d["lag_peak_time"] = peak * dt
    if summary.crossed_steps:
        d["note"] = "some posted quotes crossed the reference price; fills used the as-is intensity"
    _write_json(out / "summary.json", d)
    print(f"simulated {n_paths} paths ({name}); E[W_T] = {summary.mean_W:.6g}, "
          f"E[Q_T] = {summary.mean_Q:.4g}, fills/path = {summary.mean_fills:.4g}")
    if summary.crossed_steps:
        print(f"warning: {summary.crossed_steps} steps with crossed quotes", file=sys.stderr)
    return EXIT_OK


# ------------------------------------------------------------ equilibrium

def cmd_equilibrium(cfg: RunConfig | None, args) -> int:
    if args.surface:
        surf, lat, p, header = read_surface(args.surface)
        extra = header.get("extra", {})
        if "model" not in extra:
            raise ConfigError(f"{args.surface}: no model parameters in header")
        mp = ModelParams(**extra["model"])
        v_tau = extra.get("v_tau_estimate", float("nan"))
        h = header["config_hash"]
        out = cfg.out if cfg else Path(args.out or ".")
    else:
        if cfg is None:
            raise ConfigError("equilibrium needs --config or a surface file")
        solved = run_solver(cfg)
        surf, lat, p, mp = solved.snapshots[-1], solved.lattice, cfg.scaled, cfg.model
        v_tau, h, out = solved.v_tau_estimate, cfg.config_hash, cfg.out
    if mp.alpha <= 0:
        raise ConfigError("equilibrium analysis needs alpha > 0")
    seed = seed_from_v_tau(v_tau, p) if math.isfinite(v_tau) else None
    half = min(lat.mu - lat.s_min, lat.s_max - lat.mu)
    eq = solve_equilibrium(p, seed, half_width=half)
    err = compare_to_limit(surf, lat.s, eq, fraction=0.8)
    win = np.abs(eq.x) <= 0.8 * half
    out.mkdir(parents=True, exist_ok=True)
    write_equilibrium_csv(out / "equilibrium.csv", eq, surf, lat.s,
                          header=f"mmrev {__version__} config_hash={h} units=market", gamma=mp.gamma)
    rep = {**_stamp(h), "C_hat": eq.C_hat, "C": eq.C, "seed": seed, "v_tau_estimate": v_tau,
           "tau": surf.tau / (mp.alpha if mp.alpha > 0 else 1.0),
           "max_error_central80": err, "max_abs_theta_central80": float(np.max(np.abs(eq.theta_values[win])))}
    _write_json(out / "equilibrium.json", rep)
    print(f"C_hat = {eq.C_hat:.12g}  C = {eq.C:.6g}  max |v_sdep - theta| (central 80%) = {err:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------- compare

Q_RANGES = (("q<=Q/4", 4), ("q<=Q/2", 2), ("all", 1))


def _baselines(mp: ModelParams, lat: Lattice) -> dict[str, tuple[np.ndarray, np.ndarray, bool]]:
    """name -> (ask, bid, relative) in scaled units per q; relative means offsets from s."""
    out = {k: (a, b, False) for k, (a, b) in baseline_table(mp, lat).items()}
    if mp.alpha == 0 and mp.sigma > 0:
        a, b = gueant_asymptotic_spreads(mp, lat.q_cap)
        out["gueant"] = (mp.gamma * a, -mp.gamma * b, True)
    return out


def _max_dev(x: np.ndarray, y: np.ndarray, Q: int, div: int, cols=slice(None)) -> float:
    qm = Q // div
    d = np.abs(x - y)[Q - qm:Q + qm + 1, cols]
    return float(np.nanmax(d)) if np.any(np.isfinite(d)) else float("nan")


def cmd_compare(args) -> int:
    loaded = []
    for f in args.files:
        surf, lat, p, header = read_surface(f)
        loaded.append((f, surf, lat, p, header))
    _, _, lat0, p0, h0 = loaded[0]
    for f, _, lat, p, header in loaded[1:]:
        if not lat.same_grid(lat0):
            raise ConfigError(f"{f}: lattice differs from {loaded[0][0]}; refusing to compare")
        if header["config_hash"] != h0["config_hash"] and not args.force:
            raise ConfigError(f"{f}: config hash {header['config_hash']} differs from {h0['config_hash']} "
                              "(use --force to compare anyway)")
    rows = []
    for i, (f, surf, lat, p, header) in enumerate(loaded):
        mp = ModelParams(**header["extra"]["model"]) if "model" in header.get("extra", {}) else None
        if mp is None:
            raise ConfigError(f"{f}: no model parameters in header")
        g = mp.gamma
        pol = extract_policy(surf, p, lat.s)
        tau = surf.tau / (mp.alpha if mp.alpha > 0 else 1.0)
        refs = {}
        for name, (a, b, rel) in _baselines(mp, lat).items():
            A = a[:, None] + (lat.s[None, :] if rel else 0.0)
            B = b[:, None] + (lat.s[None, :] if rel else 0.0)
            refs[name] = (A, B)
        if len(loaded) > 1:
            other = loaded[1] if i == 0 else loaded[0]
            op = extract_policy(other[1], other[3], other[2].s)
            refs[f"file:{other[0]}"] = (op.ask_price, op.bid_price)
        Q = lat.q_cap
        if "zhang" in refs:
            # shape only: both sides measured from their q = 0 quote
            za, zb = refs["zhang"]
            refs["zhang-q0"] = (za - za[Q] + pol.ask_price[Q], zb - zb[Q] + pol.bid_price[Q])
        # closed forms hold at the mean price; "all" also shows the s-dependence
        jm = int(np.argmin(np.abs(lat.s - lat.mu)))
        s_ranges = (("s=mu", slice(jm, jm + 1)), ("all", slice(None)))
        for name, (A, B) in refs.items():
            for label, div in Q_RANGES:
                for s_label, cols in s_ranges:
                    rows.append({"file": str(f), "tau": tau, "baseline": name, "q_range": label,
                                 "s_range": s_label,
                                 "max_abs_ask": _max_dev(pol.ask_price, A, lat.q_cap, div, cols) / g,
                                 "max_abs_bid": _max_dev(pol.bid_price, B, lat.q_cap, div, cols) / g})
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "compare.csv", "w") as fh:
        fh.write(f"# mmrev {__version__} config_hash={h0['config_hash']} units=market\n")
        fh.write("file,tau,baseline,q_range,s_range,max_abs_ask,max_abs_bid\n")
        for r in rows:
            fh.write(f"{r['file']},{r['tau']!r},{r['baseline']},{r['q_range']},{r['s_range']},"
                     f"{r['max_abs_ask']!r},{r['max_abs_bid']!r}\n")
    w = max(len(r["baseline"]) for r in rows) if rows else 8
    print(f"{'file':<20} {'tau':>10} {'baseline':<{w}} {'q range':<8} {'s range':<7} {'max|ask|':>11} {'max|bid|':>11}")
    for r in rows:
        print(f"{r['file']:<20} {r['tau']:>10.6g} {r['baseline']:<{w}} {r['q_range']:<8} {r['s_range']:<7} "
              f"{r['max_abs_ask']:>11.3e} {r['max_abs_bid']:>11.3e}")
    return EXIT_OK


# ------------------------------------------------------------------- main

def _add_globals(ap: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    ap.add_argument("--config", metavar="PATH", default=d, help="key = value configuration file")
    ap.add_argument("--out", metavar="DIR", default=d, help="output directory")
    ap.add_argument("--force", action="store_true", default=argparse.SUPPRESS if suppress else False,
                    help="compare surfaces with different config hashes")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmrev", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"mmrev {__version__}")
    _add_globals(ap, False)
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve for value and policy surfaces")
    _add_globals(s, True)
    s.add_argument("--solver", choices=SOLVERS)

    m = sub.add_parser("simulate", help="Monte Carlo simulation of a quoting policy")
    _add_globals(m, True)
    m.add_argument("--paths", type=int)
    m.add_argument("--seed", type=int)
    m.add_argument("--dt-sim", type=float, help="time step in mean-reversion cycles")
    m.add_argument("--policy", choices=SIM_POLICIES)
    m.add_argument("--write-paths", type=int, help="number of path CSV files to write")

    e = sub.add_parser("equilibrium", help="ground eigenvalue and theta(s)")
    _add_globals(e, True)
    e.add_argument("surface", nargs="?", help="surface file from solve (seeds the eigenvalue search)")

    c = sub.add_parser("compare", help="compare surfaces with closed-form baselines")
    _add_globals(c, True)
    c.add_argument("files", nargs="+")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # phase 1: everything that can be validated before computing
    try:
        cfg = None
        if args.config:
            cfg = RunConfig.from_file(args.config, args.out)
        elif args.command in ("solve", "simulate"):
            raise ConfigError(f"{args.command} needs --config")
    except (ValueError, OSError, KeyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    tag = f" [config {cfg.config_hash}]" if cfg else ""
    try:
        if args.command == "solve":
            return cmd_solve(cfg, args)
        if args.command == "simulate":
            return cmd_simulate(cfg, args)
        if args.command == "equilibrium":
            return cmd_equilibrium(cfg, args)
        return cmd_compare(args)
    except (ConfigError, FormatError, OSError, KeyError) as e:
        print(f"config error: {e}{tag}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS + (ValueError,) as e:
        print(f"numerical failure: {type(e).__name__}: {e}{tag}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
