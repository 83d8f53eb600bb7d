"""Optimal limit-order quoting with a mean-reverting reference price."""

__version__ = "0.1.0"

from .model import ModelParams, ScaledParams, scale_params, to_scaled, unscale_price, ou_moments  # noqa: E402
from .lattice import Lattice, ValueSurface, BoundaryMode, build_lattice  # noqa: E402
from .policy import PolicySurface, extract_policy  # noqa: E402
from .fd_solver import FdConfig, fd_solve  # noqa: E402
from .splitstep import splitstep_solve  # noqa: E402

__all__ = [
    "__version__", "ModelParams", "ScaledParams", "scale_params", "to_scaled", "unscale_price",
    "ou_moments", "Lattice", "ValueSurface", "BoundaryMode", "build_lattice", "PolicySurface",
    "extract_policy", "FdConfig", "fd_solve", "splitstep_solve",
]
