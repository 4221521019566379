"""Numeric defaults shared across modules.

Every tolerance that a check depends on lives here so a scenario config can
override it in one place and so reports can echo the exact values used.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict


@dataclass(frozen=True)
class Defaults:
    # Newton / root finding
    newton_tol: float = 1e-12       # absolute, scaled by 1 + |u| + |p|
    max_iter: int = 50
    max_damping: int = 20
    max_multistarts: int = 8

    # finite differences
    fd_eps_first: float = 1e-5      # first derivatives of explicit functions
    fd_eps_second: float = 1e-3     # second derivatives of implicit quantities
    h_mtw: float = 1e-3             # p-step factor for the tensor second difference
    h_hess: float = 1e-4            # x-step factor for height-function Hessians

    # condition thresholds
    a2_tol: float = 1e-8
    conv_tol: float = 1e-7          # relative, scaled by max(1, |f|)
    a3s_tol: float = 1e-6
    mp_tol: float = 1e-9            # relative, scaled by 1 + |g|
    ff_tol: float = 1e-6
    sep_tol: float = 1e-3
    coll_tol: float = 1e-6
    hess_tol: float = 1e-3

    # domain handling
    box_margin: float = 1e-9        # shrink applied before boundary-sensitive evaluation
    inconclusive_fail_fraction: float = 0.01

    # sampling
    theta_m: int = 32
    xi_samples: int = 16            # complement directions for n >= 3

    def replace(self, **kwargs) -> "Defaults":
        data = asdict(self)
        for key, value in kwargs.items():
            if key not in data:
                raise KeyError(f"unknown tolerance key: {key}")
            data[key] = value
        return Defaults(**data)

    def as_dict(self) -> dict:
        return asdict(self)


DEFAULTS = Defaults()

# Sentinel used for vacuous verdicts (n = 1 has an empty co-dimension-one sphere).
import sys

VACUOUS_MARGIN = sys.float_info.max
