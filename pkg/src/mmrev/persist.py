"""Value-surface files and CSV exports.

Binary layout: the 5 magic bytes ``MMRV1``, a little-endian uint32 header
length, a UTF-8 JSON header, then the surface as row-major float64 (q rows,
s columns).
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .lattice import BoundaryMode, Lattice, ValueSurface
from .model import ModelParams, ScaledParams
from .policy import PolicySurface

MAGIC = b"MMRV1"


class FormatError(ValueError):
    pass


def write_surface(path, surf: ValueSurface, lat: Lattice, p: ScaledParams, config_hash: str = "",
                  extra: dict | None = None) -> None:
    values = np.ascontiguousarray(surf.values, dtype="<f8")
    header = {
        "version": __version__,
        "config_hash": config_hash,
        "units": "scaled",
        "lattice": lat.descriptor(),
        "params": asdict(p),
        "boundary_mode": surf.boundary_mode.value,
        "tau": surf.tau,
        "shape": list(values.shape),
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(values.tobytes())


def read_surface(path) -> tuple[ValueSurface, Lattice, ScaledParams, dict]:
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise FormatError(f"{path}: not a surface file")
    (n,) = struct.unpack("<I", data[5:9])
    header = json.loads(data[9:9 + n].decode())
    shape = tuple(header["shape"])
    body = data[9 + n:]
    if len(body) != 8 * shape[0] * shape[1]:
        raise FormatError(f"{path}: payload size does not match shape {shape}")
    values = np.frombuffer(body, dtype="<f8").reshape(shape).astype(float)
    lat = Lattice.from_descriptor(header["lattice"])
    p = ScaledParams(**header["params"])
    surf = ValueSurface(header["tau"], values, BoundaryMode(header["boundary_mode"]))
    return surf, lat, p, header


def _header_line(fh, config_hash: str, units: str) -> None:
    fh.write(f"# mmrev {__version__} config_hash={config_hash} units={units}\n")


def write_surface_csv(path, surfaces: list[ValueSurface], lat: Lattice, config_hash: str = "") -> None:
    """Columns tau, q, s, v (scaled units)."""
    with open(path, "w", newline="") as fh:
        _header_line(fh, config_hash, "scaled")
        w = csv.writer(fh)
        w.writerow(["tau", "q", "s", "v"])
        for sf in surfaces:
            for i, q in enumerate(lat.q):
                for s, v in zip(lat.s, sf.values[i]):
                    w.writerow([repr(sf.tau), int(q), repr(float(s)), repr(float(v))])


def write_policy_csv(path, policies: list[PolicySurface], lat: Lattice, mp: ModelParams,
                     config_hash: str = "") -> None:
    """Columns tau, q, s, ask_price, bid_price, ask_spread, bid_spread in market units.

    tau is in model time units; closed sides are written as empty fields.
    """
    g = mp.gamma
    tscale = mp.alpha if mp.alpha > 0 else 1.0

    def fmt(x):
        return "" if not np.isfinite(x) else repr(float(x / g))

    with open(path, "w", newline="") as fh:
        _header_line(fh, config_hash, "market")
        w = csv.writer(fh)
        w.writerow(["tau", "q", "s", "ask_price", "bid_price", "ask_spread", "bid_spread"])
        for pol in policies:
            for i, q in enumerate(lat.q):
                for j, s in enumerate(lat.s):
                    w.writerow([repr(pol.tau / tscale), int(q), fmt(s), fmt(pol.ask_price[i, j]),
                                fmt(pol.bid_price[i, j]), fmt(pol.ask_spread[i, j]), fmt(pol.bid_spread[i, j])])


def write_transition_csv(path, probs: np.ndarray, s: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s_from"] + [repr(float(x)) for x in s])
        for si, row in zip(s, probs):
            w.writerow([repr(float(si))] + [repr(float(x)) for x in row])
