"""Built-in catalog of generating functions and the plugin registry.

Catalog ids and parameter names are stable strings referenced by scenario
configs.  Expected condition verdicts are stored with a provenance tag:
"analytic" when the verdict follows from a closed form, "measured" when it was
determined empirically with the tensor oracle at the recorded defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict

import numpy as np

from .core import Gamma, GeneratingFunction

Array = np.ndarray


@dataclass(frozen=True)
class CatalogEntry:
    id: str
    description: str
    builder: Callable[..., GeneratingFunction]
    default_params: dict = field(default_factory=dict)
    known_properties: dict = field(default_factory=dict)

    def build(self, params: dict | None = None) -> GeneratingFunction:
        merged = dict(self.default_params)
        if params:
            unknown = set(params) - set(self.default_params)
            if unknown:
                raise KeyError(f"{self.id}: unknown parameters {sorted(unknown)}")
            merged.update(params)
        return self.builder(**merged)


def _eye(nbatch: tuple, n: int) -> Array:
    return np.broadcast_to(np.eye(n), nbatch + (n, n)).copy()


def _batch_shape(x: Array, y: Array, z: Array) -> tuple:
    return np.broadcast_shapes(x.shape[:-1], y.shape[:-1], np.shape(z))


def _box(radius: float, center, n: int) -> Array:
    center = np.broadcast_to(np.asarray(center, dtype=float), (n,))
    return np.stack([center - radius, center + radius], axis=1)


def build_ot_quad(n: int = 2, radius: float = 1.0, z_span: float = 8.0) -> GeneratingFunction:
    """g(x, y, z) = -|x - y|^2 / 2 - z on centered boxes."""

    def g(x, y, z):
        d = np.asarray(x, float) - np.asarray(y, float)
        return -0.5 * np.sum(d * d, axis=-1) - np.asarray(z, float)

    def gx(x, y, z):
        return np.broadcast_to(np.asarray(y, float) - np.asarray(x, float), _batch_shape(x, y, z) + (n,)).copy()

    def gy(x, y, z):
        return np.broadcast_to(np.asarray(x, float) - np.asarray(y, float), _batch_shape(x, y, z) + (n,)).copy()

    def gz(x, y, z):
        return np.full(_batch_shape(x, y, z), -1.0)

    def gxx(x, y, z):
        return -_eye(_batch_shape(x, y, z), n)

    def gxy(x, y, z):
        return _eye(_batch_shape(x, y, z), n)

    def gxz(x, y, z):
        return np.zeros(_batch_shape(x, y, z) + (n,))

    def gstar(x, y, u):
        d = np.asarray(x, float) - np.asarray(y, float)
        return -0.5 * np.sum(d * d, axis=-1) - np.asarray(u, float)

    gamma = Gamma(
        x_box=_box(radius, 0.0, n),
        y_box=_box(radius, 0.0, n),
        z_interval=lambda x, y: (-z_span, z_span),
    )
    return GeneratingFunction(
        dim=n, eval=g, gamma=gamma, name="ot_quad",
        params={"n": n, "radius": radius, "z_span": z_span},
        gx=gx, gy=gy, gz=gz, gxx=gxx, gxy=gxy, gxz=gxz, gstar=gstar,
    )


def _separated_boxes(n: int, radius: float, gap_center: float):
    """x-box at the origin, y-box shifted along the first axis."""
    x_box = _box(radius, 0.0, n)
    shift = np.zeros(n)
    shift[0] = gap_center
    y_box = _box(radius, shift, n)
    # Euclidean circumradius of each box; the inter-box separation this implies.
    circ = radius * np.sqrt(n)
    r0 = gap_center - 2.0 * circ
    if r0 <= 0.0:
        raise ValueError("boxes are not separated")
    return x_box, y_box, r0


def build_ot_log(n: int = 2, radius: float = 0.5, gap_center: float = 2.0, z_span: float = 4.0) -> GeneratingFunction:
    """g(x, y, z) = log|x - y| - z on separated boxes (cost singular at x = y)."""
    x_box, y_box, r0 = _separated_boxes(n, radius, gap_center)

    def sep(x, y):
        d = np.asarray(x, float) - np.asarray(y, float)
        return np.sum(d * d, axis=-1) >= r0 * r0

    def g(x, y, z):
        d = np.asarray(x, float) - np.asarray(y, float)
        return 0.5 * np.log(np.sum(d * d, axis=-1)) - np.asarray(z, float)

    def gx(x, y, z):
        d = np.asarray(x, float) - np.asarray(y, float)
        r2 = np.sum(d * d, axis=-1)[..., None]
        return np.broadcast_to(d / r2, _batch_shape(x, y, z) + (n,)).copy()

    def gy(x, y, z):
        return -gx(x, y, z)

    def gz(x, y, z):
        return np.full(_batch_shape(x, y, z), -1.0)

    def gxx(x, y, z):
        d = np.asarray(x, float) - np.asarray(y, float)
        r2 = np.sum(d * d, axis=-1)[..., None, None]
        dd = np.einsum("...i,...j->...ij", d, d)
        val = _eye(d.shape[:-1], n) / r2 - 2.0 * dd / (r2 * r2)
        return np.broadcast_to(val, _batch_shape(x, y, z) + (n, n)).copy()

    def gxy(x, y, z):
        return -gxx(x, y, z)

    def gxz(x, y, z):
        return np.zeros(_batch_shape(x, y, z) + (n,))

    def gstar(x, y, u):
        d = np.asarray(x, float) - np.asarray(y, float)
        return 0.5 * np.log(np.sum(d * d, axis=-1)) - np.asarray(u, float)

    gamma = Gamma(x_box=x_box, y_box=y_box, z_interval=lambda x, y: (-z_span, z_span), pair_ok=sep)
    return GeneratingFunction(
        dim=n, eval=g, gamma=gamma, name="ot_log",
        params={"n": n, "radius": radius, "gap_center": gap_center, "z_span": z_span},
        gx=gx, gy=gy, gz=gz, gxx=gxx, gxy=gxy, gxz=gxz, gstar=gstar,
    )


def build_ot_power(
    n: int = 2, p: float = 4.0, radius: float = 0.5, gap_center: float = 2.0, z_span: float = 80.0
) -> GeneratingFunction:
    """g(x, y, z) = -|x - y|^p / p - z; separated boxes keep E nonsingular."""
    if p == 0.0:
        raise ValueError("p must be nonzero")
    x_box, y_box, r0 = _separated_boxes(n, radius, gap_center)

    def sep(x, y):
        d = np.asarray(x, float) - np.asarray(y, float)
        return np.sum(d * d, axis=-1) >= r0 * r0

    def g(x, y, z):
        d = np.asarray(x, float) - np.asarray(y, float)
        r = np.sqrt(np.sum(d * d, axis=-1))
        return -(r ** p) / p - np.asarray(z, float)

    def gx(x, y, z):
        d = np.asarray(x, float) - np.asarray(y, float)
        r = np.sqrt(np.sum(d * d, axis=-1))[..., None]
        return np.broadcast_to(-(r ** (p - 2.0)) * d, _batch_shape(x, y, z) + (n,)).copy()

    def gy(x, y, z):
        return -gx(x, y, z)

    def gz(x, y, z):
        return np.full(_batch_shape(x, y, z), -1.0)

    def gxx(x, y, z):
        d = np.asarray(x, float) - np.asarray(y, float)
        r = np.sqrt(np.sum(d * d, axis=-1))[..., None, None]
        dd = np.einsum("...i,...j->...ij", d, d)
        val = -(r ** (p - 2.0)) * _eye(d.shape[:-1], n) - (p - 2.0) * (r ** (p - 4.0)) * dd
        return np.broadcast_to(val, _batch_shape(x, y, z) + (n, n)).copy()

    def gxy(x, y, z):
        return -gxx(x, y, z)

    def gxz(x, y, z):
        return np.zeros(_batch_shape(x, y, z) + (n,))

    def gstar(x, y, u):
        d = np.asarray(x, float) - np.asarray(y, float)
        r = np.sqrt(np.sum(d * d, axis=-1))
        return -(r ** p) / p - np.asarray(u, float)

    pair_ok = sep if p < 2.0 else None
    gamma = Gamma(x_box=x_box, y_box=y_box, z_interval=lambda x, y: (-z_span, z_span), pair_ok=pair_ok)
    return GeneratingFunction(
        dim=n, eval=g, gamma=gamma, name="ot_power",
        params={"n": n, "p": p, "radius": radius, "gap_center": gap_center, "z_span": z_span},
        gx=gx, gy=gy, gz=gz, gxx=gxx, gxy=gxy, gxz=gxz, gstar=gstar,
    )


def build_synthetic_z(n: int = 2, eps: float = 0.1, radius: float = 1.0) -> GeneratingFunction:
    """g(x, y, z) = -c(x, y)(1 + eps z) - z with quadratic c; z in (-1, 1).

    The one catalog entry with genuine z-dependence: g_xz != 0 and g_z varies
    over Gamma, unlike the optimal-transportation specialization.
    """
    if not 0.0 < eps <= 0.25:
        raise ValueError("eps must lie in (0, 1/4]")

    def c(x, y):
        d = np.asarray(x, float) - np.asarray(y, float)
        return 0.5 * np.sum(d * d, axis=-1)

    def g(x, y, z):
        return -c(x, y) * (1.0 + eps * np.asarray(z, float)) - np.asarray(z, float)

    def gx(x, y, z):
        d = np.asarray(x, float) - np.asarray(y, float)
        w = (1.0 + eps * np.asarray(z, float))[..., None]
        return np.broadcast_to(-d * w, _batch_shape(x, y, z) + (n,)).copy()

    def gy(x, y, z):
        return -gx(x, y, z)

    def gz(x, y, z):
        val = -(1.0 + eps * c(x, y))
        return np.broadcast_to(val, _batch_shape(x, y, z)).copy()

    def gxx(x, y, z):
        w = (1.0 + eps * np.asarray(z, float))[..., None, None]
        return -w * _eye(_batch_shape(x, y, z), n)

    def gxy(x, y, z):
        return -gxx(x, y, z)

    def gxz(x, y, z):
        d = np.asarray(x, float) - np.asarray(y, float)
        return np.broadcast_to(-eps * d, _batch_shape(x, y, z) + (n,)).copy()

    def gstar(x, y, u):
        cc = c(x, y)
        return -(cc + np.asarray(u, float)) / (1.0 + eps * cc)

    gamma = Gamma(x_box=_box(radius, 0.0, n), y_box=_box(radius, 0.0, n), z_interval=lambda x, y: (-1.0, 1.0))
    return GeneratingFunction(
        dim=n, eval=g, gamma=gamma, name="synthetic_z",
        params={"n": n, "eps": eps, "radius": radius},
        gx=gx, gy=gy, gz=gz, gxx=gxx, gxy=gxy, gxz=gxz, gstar=gstar,
    )


def _prop(verdict: str, provenance: str) -> dict:
    return {"verdict": verdict, "provenance": provenance}


_CATALOG: Dict[str, CatalogEntry] = {}


def register(entry: CatalogEntry) -> None:
    """Add an entry to the registry (user plugins use the same hook)."""
    _CATALOG[entry.id] = entry


register(CatalogEntry(
    id="ot_quad",
    description="quadratic transport cost, g = -|x-y|^2/2 - z",
    builder=build_ot_quad,
    default_params={"n": 2, "radius": 1.0, "z_span": 8.0},
    known_properties={
        "A1": _prop("holds", "analytic"),
        "A1*": _prop("holds", "analytic"),
        "A2": _prop("holds", "analytic"),
        "A3w": _prop("holds-with-equality", "analytic"),
        "A3s": _prop("fails", "analytic"),
    },
))

register(CatalogEntry(
    id="ot_log",
    description="logarithmic cost, g = log|x-y| - z, separated boxes",
    builder=build_ot_log,
    default_params={"n": 2, "radius": 0.5, "gap_center": 2.0, "z_span": 4.0},
    known_properties={
        "A1": _prop("holds", "measured"),
        "A1*": _prop("holds", "measured"),
        "A2": _prop("holds", "analytic"),
        "A3w": _prop("holds", "measured"),
        "A3s": _prop("holds", "measured"),
    },
))

register(CatalogEntry(
    id="ot_power",
    description="power cost, g = -|x-y|^p/p - z, separated boxes",
    builder=build_ot_power,
    default_params={"n": 2, "p": 4.0, "radius": 0.5, "gap_center": 2.0, "z_span": 80.0},
    known_properties={
        "A1": _prop("holds", "analytic"),
        "A1*": _prop("holds", "analytic"),
        "A2": _prop("holds", "analytic"),
        "A3w": _prop("fails", "measured"),
        "A3s": _prop("fails", "measured"),
    },
))

register(CatalogEntry(
    id="synthetic_z",
    description="z-dependent quadratic, g = -c(x,y)(1 + eps z) - z",
    builder=build_synthetic_z,
    default_params={"n": 2, "eps": 0.1, "radius": 1.0},
    known_properties={
        "A1": _prop("holds", "measured"),
        "A1*": _prop("holds", "measured"),
        "A2": _prop("holds", "analytic"),
        "A3w": _prop("holds", "measured"),
        "A3s": _prop("holds", "measured"),
    },
))


def list_catalog() -> list:
    """All registered entries, sorted by id."""
    return [_CATALOG[k] for k in sorted(_CATALOG)]


def get_entry(entry_id: str) -> CatalogEntry:
    try:
        return _CATALOG[entry_id]
    except KeyError:
        raise KeyError(f"unknown catalog id: {entry_id}") from None


def build(entry_id: str, params: dict | None = None) -> GeneratingFunction:
    return get_entry(entry_id).build(params)
